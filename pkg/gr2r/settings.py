"""
Project settings and logging bootstrap.

Defaults live in config/settings.json at the repository root. The path can be
overridden with the GR2R_SETTINGS environment variable; log verbosity comes
from NEF_SPLIT_LOG.
"""

import json
import logging
import os
from functools import lru_cache
from typing import Any, Dict

# Project root directory
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(BASE_DIR, 'config')
DEFAULT_SETTINGS_PATH = os.path.join(CONFIG_DIR, 'settings.json')

LOG_LEVEL_ENV = 'NEF_SPLIT_LOG'
SETTINGS_ENV = 'GR2R_SETTINGS'


@lru_cache(maxsize=None)
def load_settings(path: str = None) -> Dict[str, Any]:
    """Load configuration from settings.json"""
    settings_path = path or os.environ.get(SETTINGS_ENV, DEFAULT_SETTINGS_PATH)
    with open(settings_path, 'r') as f:
        return json.load(f)


def setting(section: str, key: str, default: Any = None) -> Any:
    """Look up one value, falling back to `default` if the key is missing."""
    return load_settings().get(section, {}).get(key, default)


def setup_logging(level: str = None) -> logging.Logger:
    """Set up logging configuration."""
    log_cfg = load_settings().get('logging', {})
    logs_dir = os.path.join(BASE_DIR, log_cfg.get('log_dir', 'logs'))
    os.makedirs(logs_dir, exist_ok=True)

    level_name = (level or os.environ.get(LOG_LEVEL_ENV, 'INFO')).upper()
    if level_name not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
        level_name = 'INFO'

    logging.basicConfig(
        level=getattr(logging, level_name),
        format=log_cfg.get('format', '%(asctime)s - %(levelname)s - %(message)s'),
        handlers=[
            logging.FileHandler(os.path.join(logs_dir, log_cfg.get('log_file', 'gr2r.log'))),
            logging.StreamHandler()
        ],
        force=True
    )
    return logging.getLogger('gr2r')
