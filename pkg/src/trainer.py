"""Training loop: seeded data, Adam with linear learning rate decay,
per-epoch structured log, periodic validation and resumable checkpoints.
"""
import hashlib
import json
import os
import random
import time

import numpy as np
import torch
from torch.utils.data import DataLoader, Subset

from depth_model import DepthModel, load_checkpoint, save_checkpoint
from errors import CheckpointError, DatasetError, NonFiniteLossError
from eval_metrics import evaluate_samples
from objectives import total_loss
from rgbd_samples import RgbdDirectory
from sample_pipeline import AlignedDepthDataset, batch_depth
from synth_scenes import make_dataset

ADAM_BETAS = (0.9, 0.999)

CHECKPOINT_NAME = 'checkpoint.pt'
TRAIN_LOG_NAME = 'train_log.jsonl'
CONFIG_ECHO_NAME = 'run_config.json'


def seed_everything(seed, deterministic=True):
    """Seed python, numpy and torch RNGs.

    With deterministic set, torch runs single-threaded with deterministic
    kernels.
    """
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def hash_split(keys, fraction):
    """Return (train indices, test indices); the test share holds the keys
    with the smallest sha256 hashes."""
    n_test = int(round(len(keys) * fraction))
    ranked = sorted(
        range(len(keys)),
        key=lambda i: hashlib.sha256(str(keys[i]).encode()).hexdigest()
    )
    test = sorted(ranked[:n_test])
    test_set = set(test)
    return [i for i in range(len(keys)) if i not in test_set], test


def load_samples(config, logger):
    """Return (train samples, test samples) of the configured dataset.

    :param RunConfig config: Run config
    :param Logger logger: Application logger
    """
    if config.dataset == 'synth':
        dataset = make_dataset(
            config.synth_template(), config.synth_count, config.synth_rd_mix,
            config.val_fraction
        )
        logger.info(
            "Synthetic dataset: %d train, %d test samples"
            % (len(dataset.train), len(dataset.test))
        )
        return dataset.train, dataset.test

    directory = RgbdDirectory(config.dataset, logger)
    train, test = hash_split(directory.frame_ids, config.val_fraction)
    logger.info(
        "Dataset %s: %d train, %d test samples"
        % (directory.dataset_id, len(train), len(test))
    )
    return Subset(directory, train), Subset(directory, test)


def linear_lr(step, total_steps, lr_start, lr_end):
    """Learning rate at step of a linear decay from lr_start to lr_end."""
    if total_steps <= 1:
        return lr_start
    t = min(step, total_steps - 1) / float(total_steps - 1)
    return lr_start + (lr_end - lr_start) * t


class Trainer:
    """Trainer class

    Train a DepthModel from a RunConfig.
    """

    def __init__(self, config, logger, output_dir=None):
        """Constructor

        :param RunConfig config: Run config
        :param Logger logger: Application logger
        :param str output_dir: Output directory, defaults to config.output_dir
        """
        self.config = config
        self.logger = logger
        self.output_dir = output_dir or config.output_dir
        self.device = config.device()
        self.model_config = config.model_config()
        self.rds = config.range_domains()
        self.fov = config.fov_spec()
        self.weights = config.loss_weights()

    @property
    def checkpoint_path(self):
        return os.path.join(self.output_dir, CHECKPOINT_NAME)

    @property
    def log_path(self):
        return os.path.join(self.output_dir, TRAIN_LOG_NAME)

    def build_loader(self, samples, epoch):
        dataset = AlignedDepthDataset(
            samples, self.fov, self.rds, train=self.config.augment,
            seed=self.config.seed, percentile=self.config.rd_percentile
        )
        dataset.set_epoch(epoch)
        generator = torch.Generator()
        generator.manual_seed(self.config.seed + epoch)
        return DataLoader(
            dataset, batch_size=self.config.batch_size, shuffle=True,
            num_workers=self.config.num_workers, generator=generator
        )

    def train(self, resume=None, samples=None):
        """Run training and return a result dict.

        :param str resume: Checkpoint to continue from
        :param tuple samples: Optional (train, test) sample sequences
        """
        config = self.config
        seed_everything(config.seed, config.deterministic)
        os.makedirs(self.output_dir, exist_ok=True)
        config.save(os.path.join(self.output_dir, CONFIG_ECHO_NAME))

        train_samples, test_samples = samples or load_samples(config, self.logger)
        if len(train_samples) == 0:
            raise DatasetError("Training set is empty")

        start_epoch = 0
        if resume is not None:
            model, payload = load_checkpoint(resume, self.model_config, 'cpu')
            start_epoch = int(payload['epoch'])
            if start_epoch >= config.epochs:
                raise CheckpointError(
                    "Checkpoint already completed %d of %d epochs"
                    % (start_epoch, config.epochs)
                )
            self.logger.info("Resuming from %s after epoch %d" % (resume, start_epoch))
        else:
            model = DepthModel(self.model_config)
            payload = None
        model.to(self.device)

        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_start, betas=ADAM_BETAS)
        if payload is not None and 'optimizer' in payload:
            optimizer.load_state_dict(payload['optimizer'])

        steps_per_epoch = -(-len(train_samples) // config.batch_size)
        total_steps = steps_per_epoch * config.epochs
        step = start_epoch * steps_per_epoch
        history = []

        for epoch in range(start_epoch + 1, config.epochs + 1):
            started = time.time()
            model.train()
            sums = {'pixel': 0.0, 'chamfer': 0.0, 'domain_ce': 0.0, 'total': 0.0}
            hits = total = batches = 0
            lr = config.lr_start
            for batch in self.build_loader(train_samples, epoch):
                lr = linear_lr(step, total_steps, config.lr_start, config.lr_end)
                for group in optimizer.param_groups:
                    group['lr'] = lr

                images, gt, labels, _ = batch_depth(batch, self.device)
                bundle = model(images)
                breakdown = total_loss(
                    bundle, gt, labels, self.weights,
                    alpha=config.silog_alpha, lam=config.silog_lambda,
                    chamfer_cap=config.chamfer_cap,
                    chamfer_reduction=config.chamfer_reduction,
                    seed=config.seed + step
                )
                if not bool(torch.isfinite(breakdown.total)):
                    raise NonFiniteLossError(epoch, step, breakdown.as_dict())

                optimizer.zero_grad()
                breakdown.total.backward()
                optimizer.step()

                values = breakdown.as_dict()
                for key in sums:
                    sums[key] += values[key]
                if self.model_config.domain_aware:
                    predicted = bundle.domain_probs.probs.argmax(dim=-1) + 1
                    hits += int((predicted.cpu() == labels.cpu()).sum())
                    total += int(labels.numel())
                batches += 1
                step += 1
                if step % config.log_every == 0:
                    self.logger.debug(
                        "epoch %d step %d lr %.3g loss %s" % (epoch, step, lr, values)
                    )

            entry = {
                'epoch': epoch,
                'step': step,
                'lr': lr,
                'loss': {key: value / batches for key, value in sums.items()},
                'rd_accuracy': hits / float(total) if total else None,
                'seconds': round(time.time() - started, 3)
            }
            if config.val_every and epoch % config.val_every == 0 and len(test_samples):
                entry['validation'] = self.validate(model, test_samples)

            history.append(entry)
            with open(self.log_path, 'a') as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            save_checkpoint(
                self.checkpoint_path, model, optimizer, epoch,
                {'run_config': config.as_dict(), 'seed': config.seed}
            )
            self.logger.info(
                "Epoch %d/%d done, loss %.4f, checkpoint saved to %s"
                % (epoch, config.epochs, entry['loss']['total'], self.checkpoint_path)
            )

        return {
            'checkpoint': self.checkpoint_path,
            'train_log': self.log_path,
            'epochs': config.epochs,
            'final_loss': history[-1]['loss']['total'] if history else None,
            'history': history,
            'model': model
        }

    def validate(self, model, samples):
        """Full protocol metrics and RD accuracy on held-out samples."""
        model.eval()
        summary = evaluate_samples(
            model, samples, self.fov, self.rds, self.config.eval_cap,
            self.device, self.config.rd_percentile, logger=self.logger
        )
        model.train()
        rows = summary.rows()
        result = {'rd_accuracy': summary.rd_accuracy}
        if 'all' in rows:
            result.update(rows['all'].as_dict())
        return result
