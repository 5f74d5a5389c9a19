"""
Errors shared across modules.

Kept apart from run_config.py so the config dataclasses in losses.py,
segnet.py, trainer.py and synthdata.py can raise them without importing
the CLI layer.
"""


class ConfigError(ValueError):
    """An unknown key, a malformed value or an out-of-range hyper-parameter."""
