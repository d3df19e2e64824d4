#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-09
# @Filename: segnet.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json
import os
import pathlib
import struct
from dataclasses import dataclass, field

from typing import Any

import numpy

from spda import log
from spda.attention import AttentionConfig, SogaHead, build_attention_head
from spda.exceptions import (
    CheckpointError,
    ConfigurationError,
    CorruptFileError,
    NumericalError,
    ShapeError,
)
from spda.nn import Conv3d, ConvBlock, ConvTranspose3d, Module
from spda.spd import min_eigenvalue
from spda.tensor import (
    Tensor,
    clamp,
    concat,
    log as tlog,
    maxpool3d,
    mul,
    no_grad,
    reduce_mean,
    reduce_sum,
    sigmoid,
    upsample_nearest3d,
)


__all__ = [
    "UNetConfig",
    "SegModel",
    "dice_bce_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]


CHECKPOINT_MAGIC = b"SPDM"
CHECKPOINT_VERSION = 1

UPSAMPLE_MODES = ("nearest", "transposed")


@dataclass
class UNetConfig:
    """Architecture of a `.SegModel`."""

    levels: int = 3
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    in_channels: int = 3
    out_channels: int = 1
    upsample: str = "nearest"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        self.channels = [int(cc) for cc in self.channels]
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig.from_config(self.attention)

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> UNetConfig:
        """Builds the architecture from the ``network`` and ``attention`` sections."""

        network = dict(config["network"])
        known = cls.__dataclass_fields__.keys()

        return cls(
            **{key: value for key, value in network.items() if key in known},
            attention=AttentionConfig.from_config(config["attention"]),
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "levels": self.levels,
            "channels": list(self.channels),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "upsample": self.upsample,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "attention": self.attention.to_dict(),
        }

    def validate(self):
        """Raises `.ConfigurationError` if the architecture is inconsistent."""

        if self.levels < 1 or len(self.channels) != self.levels:
            raise ConfigurationError(
                f"{self.levels} levels but {len(self.channels)} channel counts."
            )

        if any(c1 >= c2 for c1, c2 in zip(self.channels[:-1], self.channels[1:])):
            raise ConfigurationError("Channel counts must be strictly increasing.")

        if self.upsample not in UPSAMPLE_MODES:
            raise ConfigurationError(f"Unknown upsample mode {self.upsample!r}.")

        # The bottleneck has no skip connection and no head.
        for channels in self.channels[:-1]:
            try:
                self.attention.validate_channels(channels)
            except ShapeError as err:
                raise ConfigurationError(str(err))

    @property
    def divisor(self) -> int:
        """Spatial dimensions must be multiples of this value."""

        return 2 ** (self.levels - 1)


class SegModel(Module):
    """A 3D U-Net with optional channel attention on the skip connections.

    The backbone and the attention heads are initialised from two independent
    generators seeded with ``[seed, 0]`` and ``[seed, 1]``, so models that
    differ only in the attention variant share their backbone weights.

    Parameters
    ----------
    config
        The architecture.
    seed
        Initialisation seed.

    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()

        config.validate()

        self.config = config
        self.seed = int(seed)

        rng = numpy.random.default_rng([self.seed, 0])
        head_rng = numpy.random.default_rng([self.seed, 1])

        chans = config.channels
        momentum, eps = config.bn_momentum, config.bn_eps

        self.encoders = []
        for level, channels in enumerate(chans):
            in_channels = config.in_channels if level == 0 else chans[level - 1]
            self.encoders.append(ConvBlock(in_channels, channels, rng, momentum, eps))

        self.ups = []
        self.decoders = []
        for level in range(config.levels - 1):
            if config.upsample == "transposed":
                self.ups.append(ConvTranspose3d(chans[level + 1], chans[level], rng))
            else:
                self.ups.append(
                    Conv3d(chans[level + 1], chans[level], rng, kernel_size=1)
                )
            self.decoders.append(
                ConvBlock(2 * chans[level], chans[level], rng, momentum, eps)
            )

        self.final = Conv3d(chans[0], config.out_channels, rng, kernel_size=1)

        self.heads = [
            build_attention_head(config.attention, chans[level], head_rng)
            for level in range(config.levels - 1)
        ]

    def _upsample(self, level: int, x: Tensor) -> Tensor:
        if self.config.upsample == "transposed":
            return self.ups[level](x)
        return self.ups[level](upsample_nearest3d(x))

    def check_input(self, volume: Tensor):
        if volume.ndim != 5 or volume.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"Expected [B, {self.config.in_channels}, H, W, D], got {volume.shape}."
            )

        divisor = self.config.divisor
        if any(size % divisor != 0 for size in volume.shape[2:]):
            raise ShapeError(
                f"Spatial shape {volume.shape[2:]} is not divisible by {divisor}."
            )

    def forward(self, volume: Tensor, eigen_log: list | None = None) -> Tensor:
        """Returns the ``[B, out_channels, H, W, D]`` probability volume.

        If ``eigen_log`` is a list, the minimum eigenvalue of the post-ReEig
        descriptors of every SOGA head is appended to it as
        ``(level, value)``.

        """

        self.check_input(volume)

        skips = []
        x = volume
        for level, encoder in enumerate(self.encoders):
            if level > 0:
                x = maxpool3d(x)
            x = encoder(x)
            skips.append(x)

        x = skips.pop()
        for level in reversed(range(self.config.levels - 1)):
            f_e = skips[level]
            f_d = self._upsample(level, x)

            head = self.heads[level]
            if head is None:
                f_hat = f_e
            else:
                f_hat, _ = head(f_e, f_d)
                if eigen_log is not None and isinstance(head, SogaHead):
                    with no_grad():
                        mats = head.descriptors(f_e, f_d)
                    eigen_log.append((level, min(min_eigenvalue(mm) for mm in mats)))

            x = self.decoders[level](concat([f_hat, f_d], 1))

        return sigmoid(self.final(x))

    def predict(self, volume: numpy.ndarray) -> numpy.ndarray:
        """Probability map ``[H, W, D]`` of one ``[3, H, W, D]`` volume."""

        mode = self.training
        self.eval()

        with no_grad():
            out = self(Tensor(volume[None])).data[0, 0]

        self.train(mode)

        return out

    def stiefel_parameters(self):
        return [pp for pp in self.parameters() if pp.manifold == "stiefel"]

    def euclidean_parameters(self):
        return [pp for pp in self.parameters() if pp.manifold != "stiefel"]


def dice_bce_loss(pred: Tensor, target: Tensor | numpy.ndarray, smooth: float = 1.0):
    """Sum of the soft Dice loss and the mean binary cross-entropy.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]`` before both terms. Sums are
    global over the batch.

    Raises
    ------
    NumericalError
        If predictions are non-finite or outside ``[0, 1]`` or the target is
        not binary.

    """

    target = target if isinstance(target, Tensor) else Tensor(target)

    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {pred.shape} vs target {target.shape}.")

    if not numpy.all(numpy.isfinite(pred.data)):
        raise NumericalError("Non-finite predictions.")
    if pred.data.min() < -1e-7 or pred.data.max() > 1 + 1e-7:
        raise NumericalError("Predictions must be probabilities in [0, 1].")
    if not numpy.all((target.data == 0) | (target.data == 1)):
        raise NumericalError("The target must be binary.")

    prob = clamp(pred, 1e-7, 1.0 - 1e-7)

    intersection = reduce_sum(mul(prob, target))
    union = reduce_sum(prob) + reduce_sum(target)
    dice = 1.0 - (2.0 * intersection + smooth) / (union + smooth)

    bce = -reduce_mean(target * tlog(prob) + (1.0 - target) * tlog(1.0 - prob))

    return dice + bce


def _checkpoint_tensors(model: SegModel):
    for name, param in model.named_parameters():
        yield name, "param", param.data
    for name, buffer in model.named_buffers():
        yield name, "buffer", buffer


def save_checkpoint(
    model: SegModel,
    path: str | os.PathLike,
    epoch: int = 0,
    run_config: dict[str, Any] | None = None,
):
    """Writes a versioned binary checkpoint.

    The file starts with ``SPDM``, a little-endian ``uint16`` version and a
    ``uint32`` header length, followed by a JSON header (sorted keys) and the
    raw ``<f8`` buffers of parameters and then batch norm statistics, in
    declaration order.

    """

    tensors = list(_checkpoint_tensors(model))

    header = {
        "config": model.config.to_dict(),
        "seed": model.seed,
        "epoch": int(epoch),
        "run_config": run_config or {},
        "tensors": [
            {"name": name, "kind": kind, "shape": list(data.shape)}
            for name, kind, data in tensors
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    with open(path, "wb") as fd:
        fd.write(CHECKPOINT_MAGIC)
        fd.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_bytes)))
        fd.write(header_bytes)
        for _, _, data in tensors:
            fd.write(numpy.ascontiguousarray(data, dtype="<f8").tobytes())

    log.debug(f"Checkpoint for epoch {epoch} written to {path!s}.")


def load_checkpoint(
    path: str | os.PathLike,
    model: SegModel | None = None,
) -> tuple[SegModel, dict[str, Any]]:
    """Reads a checkpoint written by `.save_checkpoint`.

    Parameters
    ----------
    path
        The checkpoint file.
    model
        If provided, the weights are loaded into this model, which must have
        the same architecture. Otherwise a model is built from the header.

    Returns
    -------
    model, header
        The model with the stored weights, and the decoded JSON header.

    Raises
    ------
    CorruptFileError
        On a bad magic, unknown version or truncated file.
    CheckpointError
        If ``model`` does not match the stored architecture.

    """

    raw = pathlib.Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize("<HI")

    if len(raw) < prefix or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFileError(f"{path!s} is not a checkpoint file.")

    version, header_len = struct.unpack("<HI", raw[len(CHECKPOINT_MAGIC) : prefix])
    if version != CHECKPOINT_VERSION:
        raise CorruptFileError(f"Unsupported checkpoint version {version}.")

    try:
        header = json.loads(raw[prefix : prefix + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CorruptFileError(f"Cannot decode the header of {path!s}.")

    entries = header["tensors"]
    expected = sum(int(numpy.prod(ee["shape"])) for ee in entries) * 8
    payload = raw[prefix + header_len :]
    if len(payload) != expected:
        raise CorruptFileError(
            f"{path!s}: expected {expected} bytes of weights, found {len(payload)}."
        )

    if model is None:
        model = SegModel(UNetConfig(**header["config"]), seed=header["seed"])

    stored = [(ee["name"], ee["kind"], tuple(ee["shape"])) for ee in entries]
    current = [
        (name, kind, tuple(data.shape))
        for name, kind, data in _checkpoint_tensors(model)
    ]
    if stored != current:
        raise CheckpointError(f"{path!s} does not match the model architecture.")

    params = dict(model.named_parameters())
    offset = 0
    for name, kind, shape in stored:
        count = int(numpy.prod(shape))
        values = numpy.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        values = values.reshape(shape).astype(numpy.float64)
        offset += count * 8

        if kind == "param":
            params[name].data = values.copy()
        else:
            module_path, attr = name.rsplit(".", 1)
            getattr(_find_module(model, module_path), attr)[...] = values

    return model, header


def _find_module(model: Module, path: str) -> Module:
    obj: Any = model
    for part in path.split("."):
        obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
    return obj
