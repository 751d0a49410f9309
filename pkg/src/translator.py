import json
import os

TRANSLATIONS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'translations')
DEFAULT_LOCALE = 'en'


class Translator:
    """Translator class

    Look up user-facing messages by dotted key in
    translations/<locale>.json, falling back to the default locale and
    finally to the key itself.
    """

    def __init__(self, locale=None, logger=None):
        """Constructor

        :param str locale: Locale, defaults to RANGEDEPTH_LOCALE or 'en'
        :param Logger logger: Application logger
        """
        self.logger = logger
        self.locale = locale or os.environ.get('RANGEDEPTH_LOCALE') or DEFAULT_LOCALE
        self.translations = self.load(self.locale)
        self.fallback = self.translations
        if self.locale != DEFAULT_LOCALE:
            self.fallback = self.load(DEFAULT_LOCALE)

    def load(self, locale):
        path = os.path.join(TRANSLATIONS_DIR, '%s.json' % locale)
        try:
            with open(path, encoding='utf-8') as fh:
                return json.load(fh)
        except (OSError, ValueError) as e:
            if self.logger is not None:
                self.logger.warning("Failed to load translations for %s: %s" % (locale, e))
            return {}

    @staticmethod
    def lookup(translations, key):
        value = translations
        for part in key.split('.'):
            if not isinstance(value, dict) or part not in value:
                return None
            value = value[part]
        return value if isinstance(value, str) else None

    def tr(self, key):
        """Return message of dotted key, e.g. 'error.config_invalid'."""
        return (
            self.lookup(self.translations, key)
            or self.lookup(self.fallback, key)
            or key
        )
