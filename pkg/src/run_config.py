"""Flat JSON run config validated against schemas/rangedepth-run-config.json."""
import copy
import json
import os

from jsonschema import Draft7Validator

from depth_model import (
    K_QUERY_K_FFN, ONE_QUERY_K_FFN, SHARED_FFN, ModelConfig
)
from domains import make_partition
from errors import ConfigError, ContractError
from fov_alignment import FovSpec
from objectives import LossWeights
from synth_scenes import MIXED, SynthConfig

SCHEMA_PATH = os.path.join(
    os.path.dirname(os.path.abspath(__file__)), '..', 'schemas',
    'rangedepth-run-config.json'
)

BASELINE_ROW = 'baseline'


def load_schema(path=SCHEMA_PATH):
    with open(path) as fh:
        return json.load(fh)


def _schema_defaults(schema):
    return {
        key: copy.deepcopy(prop['default'])
        for key, prop in schema['properties'].items()
        if 'default' in prop
    }


def parse_override(text):
    """Parse 'key=value' with JSON value semantics.

    Values that are not valid JSON are taken as plain strings.
    """
    key, sep, raw = text.partition('=')
    key = key.strip()
    if not sep or not key:
        raise ConfigError("Override '%s' is not of the form key=value" % text)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key, value


class RunConfig:
    """Validated run config.

    Values are read as attributes, e.g. config.n_bins.
    """

    def __init__(self, values, schema=None):
        """Constructor

        :param dict values: Config values, missing keys get schema defaults
        :param dict schema: JSON schema, loaded from SCHEMA_PATH if None
        """
        self.schema = schema or load_schema()
        data = _schema_defaults(self.schema)
        data.update(copy.deepcopy(values))
        data.pop('$schema', None)
        self.values = data
        self.validate()

    @classmethod
    def load(cls, path, overrides=None):
        """Load config file and apply 'key=value' overrides."""
        try:
            with open(path) as fh:
                values = json.load(fh)
        except OSError as e:
            raise ConfigError("Could not read config %s: %s" % (path, e))
        except ValueError as e:
            raise ConfigError("Config %s is not valid JSON: %s" % (path, e))
        if not isinstance(values, dict):
            raise ConfigError("Config %s must be a JSON object" % path)
        for key, value in (parse_override(o) for o in overrides or []):
            values[key] = value
        return cls(values)

    def __getattr__(self, name):
        values = self.__dict__.get('values')
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def validate(self):
        validator = Draft7Validator(self.schema)
        errors = sorted(validator.iter_errors(self.values), key=lambda e: list(e.path))
        details = [
            "%s: %s" % ("/".join(str(p) for p in e.path) or "<root>", e.message)
            for e in errors
        ]
        if details:
            raise ConfigError("Invalid run config", details)

        v = self.values
        if not v['z_max'] > v['z_min']:
            details.append("z_max: must exceed z_min")
        if v['synth_shape_max'] < v['synth_shape_min']:
            details.append("synth_shape_max: must be >= synth_shape_min")
        if v['synth_rd_mix'] is not None and len(v['synth_rd_mix']) != v['k_domains']:
            details.append("synth_rd_mix: needs one entry per range domain")
        if details:
            raise ConfigError("Invalid run config", details)
        try:
            self.model_config().validate()
        except ContractError as e:
            raise ConfigError("Invalid model settings", [str(e)])

    def with_overrides(self, overrides):
        """Return new config with overrides (dict or 'key=value' list)."""
        values = copy.deepcopy(self.values)
        if isinstance(overrides, dict):
            values.update(overrides)
        else:
            values.update(parse_override(o) for o in overrides)
        return RunConfig(values, self.schema)

    def as_dict(self):
        return copy.deepcopy(self.values)

    def canonical(self):
        """Serialized form with sorted keys and all defaults filled in."""
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, 'w') as fh:
            fh.write(self.canonical())

    def model_config(self):
        v = self.values
        return ModelConfig(
            n_bins=v['n_bins'],
            k_domains=v['k_domains'],
            base_channels=v['base_channels'],
            pst_patch_sizes=tuple(v['pst_patch_sizes']),
            pst_depth=v['pst_depth'],
            pst_heads=v['pst_heads'],
            pst_dim=v['pst_dim'],
            input_size=(v['input_h'], v['input_w']),
            z_min=float(v['z_min']),
            z_max=float(v['z_max']),
            partition=v['partition'],
            head_variant=v['head_variant'],
            bin_type=v['bin_type'],
            fusion=v['fusion'],
            domain_aware=v['domain_aware'],
            hsc=v['hsc']
        )

    def fov_spec(self):
        v = self.values
        return FovSpec.from_degrees(v['fov_x_deg'], v['fov_y_deg'], v['input_w'], v['input_h'])

    def range_domains(self):
        v = self.values
        return make_partition(v['partition'], float(v['z_min']), float(v['z_max']), v['k_domains'])

    def loss_weights(self):
        v = self.values
        return LossWeights(pixel=v['w_pixel'], chamfer=v['w_chamfer'], ce=v['w_ce'])

    def synth_template(self):
        v = self.values
        return SynthConfig(
            seed=v['seed'],
            rd_index=MIXED,
            shape_count=(v['synth_shape_min'], v['synth_shape_max']),
            range_set=self.range_domains(),
            texture_freq=v['synth_texture_freq'],
            image_size=(v['synth_image_h'], v['synth_image_w']),
            fx_jitter=v['synth_fx_jitter'],
            fov_deg=(v['fov_x_deg'], v['fov_y_deg']),
            sky=v['synth_sky']
        )

    def device(self):
        return os.environ.get('RANGEDEPTH_DEVICE') or self.values['device']


def ablation_matrix():
    """Override sets of the module and bin head ablations.

    The first row is the full model; 'baseline' is a plain encoder-decoder
    with transformer bottleneck and width based bins.
    """
    full = {
        'bin_type': 'variation', 'fusion': 'weighted', 'domain_aware': True,
        'hsc': True, 'head_variant': SHARED_FFN
    }
    return [
        ('full', dict(full)),
        ('no_variation_bins', dict(full, bin_type='width')),
        ('no_weighted_fusion', dict(full, bin_type='width', fusion='argmax')),
        ('no_domain_bins', dict(full, bin_type='width', domain_aware=False)),
        (BASELINE_ROW, dict(full, bin_type='width', domain_aware=False, hsc=False)),
        ('one_query_k_ffn', dict(full, head_variant=ONE_QUERY_K_FFN)),
        ('k_query_k_ffn', dict(full, head_variant=K_QUERY_K_FFN)),
    ]


def k_sweep(k_values=(1, 2, 3, 4, 5, 6), uniform_k=4):
    """Override sets of the K sweep plus the uniform partition at uniform_k."""
    rows = [('k%d' % k, {'k_domains': k}) for k in k_values]
    if uniform_k is not None:
        rows.append(('k%d_uniform' % uniform_k, {'k_domains': uniform_k, 'partition': 'uniform'}))
    return rows
