# encoding: utf-8

from __future__ import annotations

import os

from typing import Any

from sdsstools import get_config, get_logger, get_package_version


DEFAULT_CONFIG_FILE = os.path.join(os.path.dirname(__file__), "etc/spda.yml")


def load_config(config_file: str | os.PathLike | None = None):
    """Reloads the configuration, optionally merging a user file on top.

    The package-level ``config`` dictionary is updated in place so that modules
    that imported it see the new values.

    """

    if "config" in globals() and config is not None:
        globals()["config"].clear()
    else:
        globals()["config"] = {}

    new_config = get_config(
        "spda",
        config_file=DEFAULT_CONFIG_FILE,
        allow_user=config_file is not None,
        user_path=str(config_file) if config_file is not None else None,
    )
    globals()["config"].update(new_config)

    return new_config


# pip package name
NAME = "spda"

# Loads config. config name is the package name.
config: dict[str, Any] = load_config()

# Imported before the logger so that tensor.log does not shadow spda.log.
from .tensor import *

log = get_logger(NAME)

# package name should be pip package name
__version__ = get_package_version(path=__file__, package_name=NAME)

