#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-02
# @Filename: exceptions.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations


class SpdaError(Exception):
    """A custom core spda exception"""

    def __init__(self, message=None):
        message = "There has been an error" if not message else message

        super(SpdaError, self).__init__(message)


class NumericalError(SpdaError):
    """Non-finite values or a matrix function evaluated outside its domain."""

    pass


class ConvergenceError(NumericalError):
    """An iterative routine did not converge or a retraction collapsed."""

    pass


class ShapeError(SpdaError, ValueError):
    """Incompatible shapes or channel counts."""

    pass


class CorruptFileError(SpdaError):
    """A case or checkpoint file cannot be decoded."""

    pass


class CheckpointError(SpdaError):
    """A checkpoint does not match the requested model configuration."""

    pass


class ConfigurationError(SpdaError):
    """Invalid configuration values."""

    pass


class SpdaWarning(Warning):
    """Base warning for spda."""


class SpdaUserWarning(UserWarning, SpdaWarning):
    """The primary warning class."""

    pass
