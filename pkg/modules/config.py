"""
Configuration Module
Environment settings, logging setup and KEY=VALUE config files
"""

import os
import logging
import dataclasses
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Dict, Iterable, Optional

from dotenv import load_dotenv, dotenv_values

from .errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


@dataclass(frozen=True)
class Settings:
    """Process-level settings read from the environment"""
    device: str = 'cpu'
    runs_dir: str = 'runs'
    palette_path: str = 'data/palette.json'
    run_index_path: str = 'data/runs.json'
    num_workers: int = 4
    log_level: str = 'INFO'
    log_file: str = 'cxrsynth.log'


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Read settings once per process"""
    return Settings(
        device=os.getenv('CXRSYNTH_DEVICE', 'cpu'),
        runs_dir=os.getenv('CXRSYNTH_RUNS_DIR', 'runs'),
        palette_path=os.getenv('CXRSYNTH_PALETTE', 'data/palette.json'),
        run_index_path=os.getenv('CXRSYNTH_RUN_INDEX', 'data/runs.json'),
        num_workers=int(os.getenv('CXRSYNTH_NUM_WORKERS', 4)),
        log_level=os.getenv('LOG_LEVEL', 'INFO').upper(),
        log_file=os.getenv('LOG_FILE', 'cxrsynth.log')
    )


def configure_logging(settings: Optional[Settings] = None):
    """Configure root logging with a file handler and a stream handler"""
    settings = settings or get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(settings.log_file),
            logging.StreamHandler()
        ]
    )


def resolve_device(name: Optional[str] = None):
    """Map a device name ('cpu', 'cuda', 'auto') to a torch device"""
    import torch

    name = name or get_settings().device
    if name == 'auto':
        name = 'cuda' if torch.cuda.is_available() else 'cpu'
    if name.startswith('cuda') and not torch.cuda.is_available():
        logger.warning(f"Device {name} requested but CUDA is unavailable, using cpu")
        name = 'cpu'
    return torch.device(name)


def parse_overrides(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """Parse ['KEY=VALUE', ...] command line overrides"""
    overrides = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise ConfigError(f"Override '{pair}' is not of the form KEY=VALUE")
        key, value = pair.split('=', 1)
        overrides[key.strip().lower()] = value.strip()
    return overrides


def load_config_file(path: Optional[str], overrides: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """
    Read a KEY=VALUE config file and apply overrides on top

    Args:
        path: Config file path, or None for overrides only
        overrides: Already parsed overrides (lower-case keys)

    Returns:
        Dict of lower-case keys to raw string values
    """
    values = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"Config file not found: {path}", path=path)
        values = {
            key.lower(): value
            for key, value in dotenv_values(path).items()
            if value is not None
        }
    values.update(overrides or {})
    return values


def _coerce(raw: Any, target_type: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw

    type_name = getattr(target_type, '__name__', str(target_type))
    text = raw.strip()
    try:
        if target_type is bool or type_name == 'bool':
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if target_type is int or type_name == 'int':
            return int(text)
        if target_type is float or type_name == 'float':
            return float(text)
        if 'Tuple[int' in str(target_type) or 'tuple[int' in str(target_type):
            return tuple(int(part) for part in text.split(',') if part.strip())
        if 'Tuple[float' in str(target_type) or 'tuple[float' in str(target_type):
            return tuple(float(part) for part in text.split(',') if part.strip())
        if 'Tuple[str' in str(target_type) or 'tuple[str' in str(target_type):
            return tuple(part.strip() for part in text.split(',') if part.strip())
        if 'Optional[int' in str(target_type):
            return None if text.lower() in ('', 'none') else int(text)
        if 'Optional[float' in str(target_type):
            return None if text.lower() in ('', 'none') else float(text)
        if 'Optional[str' in str(target_type):
            return None if text.lower() in ('', 'none') else text
    except ValueError:
        raise ConfigError(f"Invalid value for '{key}': {raw!r}", key=key)
    return text


def build_dataclass(cls, values: Dict[str, Any], allow_unknown: bool = False):
    """
    Instantiate a config dataclass from loosely typed values

    Args:
        cls: Dataclass type
        values: Mapping of field names (any case) to raw values
        allow_unknown: Ignore keys that are not fields of cls

    Returns:
        Instance of cls, validated when it defines validate()
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        name = key.lower()
        if name not in fields:
            if allow_unknown:
                continue
            raise ConfigError(f"Unknown key '{key}' for {cls.__name__}", key=key)
        kwargs[name] = _coerce(raw, fields[name].type, name)

    instance = cls(**kwargs)
    if hasattr(instance, 'validate'):
        instance.validate()
    return instance
