"""
Configuration management.

Runtime settings (log level, debug logging) come from environment variables
with sensible defaults. Experiment settings come from JSON files plus dotted
command-line overrides, so that a run directory alone reproduces its outputs.
"""

import copy
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Generator, Iterable, Optional, Tuple, Union


logger = logging.getLogger(__name__)

RUN_CONFIG_NAME = 'run_config.json'


def get_config() -> Dict[str, Any]:
    """
    Get runtime configuration from environment variables.

    These values never change numeric results.

    Returns:
        Dictionary with configuration values.
    """
    return {
        'DEBUG': os.getenv('DEBUG', 'False').lower() == 'true',
        'LOG_LEVEL': os.getenv('LOG_LEVEL', 'INFO'),
    }


def configure_logging() -> None:
    """Send log records to stdout at LOG_LEVEL, or DEBUG when DEBUG is set."""
    config = get_config()
    level = logging.DEBUG if config['DEBUG'] else getattr(logging, config['LOG_LEVEL'].upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout)
        ]
    )


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """
    Load a JSON experiment configuration.

    Args:
        path: Path to a JSON file, or None for an empty configuration.

    Returns:
        Parsed configuration dictionary.

    Raises:
        ValueError: If the file is not valid JSON or not a JSON object.
    """
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ValueError(f"Config {path} must contain a JSON object")
    return data


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def validate_override(override: Any) -> Tuple[bool, Optional[str]]:
    """
    Validate one dotted override of the form ``a.b.c=value``.

    Args:
        override: Override string to validate.

    Returns:
        Tuple of (is_valid, error_message).
    """
    if not isinstance(override, str):
        return False, "Override must be a string"
    if '=' not in override:
        return False, f"Override '{override}' must look like key.path=value"
    key = override.split('=', 1)[0].strip()
    if not key:
        return False, f"Override '{override}' has an empty key"
    if any(not part for part in key.split('.')):
        return False, f"Override '{override}' has an empty path segment"
    return True, None


def apply_overrides(config: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """
    Apply dotted-path overrides to a copy of a configuration.

    Values are parsed as JSON literals, so ``model.d_h=64`` sets an int and
    ``epochs=[15,15,70]`` sets a list; anything unparsable stays a string.

    Args:
        config: Base configuration.
        overrides: Strings like ``model.lambda1=0.3``.

    Returns:
        New configuration with overrides applied.

    Raises:
        ValueError: If an override is malformed or walks through a non-object.
    """
    result = copy.deepcopy(config)
    for override in overrides:
        is_valid, error_msg = validate_override(override)
        if not is_valid:
            raise ValueError(error_msg)
        key, raw = override.split('=', 1)
        parts = key.strip().split('.')
        node = result
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ValueError(f"Cannot override '{key}': '{part}' is not an object")
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return result


def dataclass_kwargs(cls: Any, data: Dict[str, Any]) -> Dict[str, Any]:
    """
    Filter a dictionary to the fields of a dataclass, rejecting unknown keys.

    Raises:
        ValueError: If the dictionary holds keys the dataclass does not define.
    """
    fields = set(cls.__dataclass_fields__)
    unknown = sorted(set(data) - fields)
    if unknown:
        raise ValueError(f"Unknown {cls.__name__} field(s): {', '.join(unknown)}")
    return dict(data)


@contextmanager
def run_directory(
    out: Union[str, Path],
    command: str,
    config: Dict[str, Any],
    seed: Optional[int],
) -> Generator[Path, None, None]:
    """
    Output directory of one run, described by a resolved-config copy.

    ``run_config.json`` is written before the run starts so a failed run
    still records what it attempted.

    Args:
        out: Output directory, created if missing.
        command: CLI command name.
        config: Fully resolved configuration.
        seed: Seed of the run.

    Yields:
        Path of the output directory.
    """
    from rmfnet import __version__

    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    record = {'command': command, 'config': config, 'seed': seed, 'version': __version__}
    (path / RUN_CONFIG_NAME).write_text(json.dumps(record, indent=2, sort_keys=True, default=str))
    try:
        yield path
    except Exception as e:
        logger.error(f"Run '{command}' failed; partial outputs left in {path}: {e}")
        raise
