#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-08
# @Filename: attention.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

from typing import Any

import numpy

from spda.exceptions import ConfigurationError, ShapeError
from spda.nn import Linear, Module
from spda.spd import SpdBranch, spd_pool, upper_triangle_vec
from spda.tensor import Tensor, channel_scale, concat, reduce_mean, relu, sigmoid


__all__ = [
    "Variant",
    "AttentionConfig",
    "AttentionHead",
    "FoaHead",
    "SoaHead",
    "SogaHead",
    "build_attention_head",
]


class Variant(str, enum.Enum):
    """Skip-connection attention variants."""

    NONE = "none"
    FOA = "foa"
    SOA = "soa"
    SOGA = "soga"


@dataclass
class AttentionConfig:
    """Configuration shared by the attention heads of every level.

    Parameters
    ----------
    variant
        Which head to build at each skip connection.
    reduction_ratio
        Hidden width of the coefficient map is ``C / reduction_ratio``.
    epsilon
        ReEig threshold of the SOGA branches.
    bire_blocks
        Number of BiRe blocks in each SOGA branch.
    inner_relu
        Whether a ReLU is applied between the two fully connected layers.
    sqrt2_offdiag
        Isometric (``√2``) scaling of the off-diagonal entries on
        vectorisation.

    """

    variant: Variant = Variant.SOGA
    reduction_ratio: int = 4
    epsilon: float = 1e-4
    bire_blocks: int = 1
    inner_relu: bool = True
    sqrt2_offdiag: bool = True

    def __post_init__(self):
        try:
            self.variant = Variant(self.variant)
        except ValueError:
            raise ConfigurationError(f"Unknown attention variant {self.variant!r}.")

        if self.reduction_ratio < 1:
            raise ConfigurationError("reduction_ratio must be a positive integer.")
        if self.epsilon <= 0:
            raise ConfigurationError("The ReEig threshold must be positive.")
        if self.bire_blocks < 1:
            raise ConfigurationError("At least one BiRe block is required.")

    @classmethod
    def from_config(cls, section: dict[str, Any]) -> AttentionConfig:
        """Builds the configuration from the ``attention`` section."""

        known = cls.__dataclass_fields__.keys()
        return cls(**{key: value for key, value in section.items() if key in known})

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["variant"] = self.variant.value
        return data

    def validate_channels(self, channels: int):
        """Raises `.ShapeError` if a level with ``channels`` is unsupported."""

        if self.variant == Variant.NONE:
            return

        if channels % self.reduction_ratio != 0:
            raise ShapeError(
                f"Reduction ratio {self.reduction_ratio} does not divide "
                f"{channels} channels."
            )

        if self.variant in (Variant.SOA, Variant.SOGA) and channels % 2 != 0:
            raise ShapeError(f"{self.variant.value} requires an even channel count.")

        if self.variant == Variant.SOGA and channels % 2**self.bire_blocks != 0:
            raise ShapeError(
                f"Cannot stack {self.bire_blocks} BiRe blocks on {channels} channels."
            )


class AttentionHead(Module):
    """Channel recalibration ``F̂ = F_e ⊙ α`` with ``α = δ(W² h + b²)``.

    Subclasses define `.embed`, the descriptor of the encoder and decoder
    features fed to the two fully connected layers.

    """

    def __init__(
        self,
        channels: int,
        embedding_dim: int,
        config: AttentionConfig,
        rng: numpy.random.Generator,
    ):
        super().__init__()

        config.validate_channels(channels)

        self.channels = channels
        self.embedding_dim = embedding_dim
        self.inner_relu = config.inner_relu

        hidden = channels // config.reduction_ratio
        self.fc1 = Linear(embedding_dim, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

        #: If set, α is replaced by this constant (used to test reductions).
        self.force_alpha: float | None = None

    def embed(self, f_e: Tensor, f_d: Tensor) -> Tensor:  # pragma: no cover
        raise NotImplementedError

    def _check_inputs(self, f_e: Tensor, f_d: Tensor):
        if f_e.ndim != 5 or f_e.shape != f_d.shape:
            raise ShapeError(
                f"Encoder {f_e.shape} and decoder {f_d.shape} features do not match."
            )
        if f_e.shape[1] != self.channels:
            raise ShapeError(
                f"Head built for {self.channels} channels, got {f_e.shape[1]}."
            )

    def coefficients(self, f_e: Tensor, f_d: Tensor) -> Tensor:
        """Returns the ``[B, C]`` channel coefficients."""

        hidden = self.fc1(self.embed(f_e, f_d))
        if self.inner_relu:
            hidden = relu(hidden)

        return sigmoid(self.fc2(hidden))

    def forward(self, f_e: Tensor, f_d: Tensor) -> tuple[Tensor, Tensor]:
        self._check_inputs(f_e, f_d)

        if self.force_alpha is not None:
            alpha = Tensor(numpy.full(f_e.shape[:2], self.force_alpha))
        else:
            alpha = self.coefficients(f_e, f_d)

        return channel_scale(f_e, alpha), alpha


class FoaHead(AttentionHead):
    """First-order attention on global average pooled features."""

    def __init__(self, channels: int, config: AttentionConfig, rng):
        super().__init__(channels, 2 * channels, config, rng)

    def embed(self, f_e: Tensor, f_d: Tensor) -> Tensor:
        axes = (2, 3, 4)
        return concat([reduce_mean(f_e, axis=axes), reduce_mean(f_d, axis=axes)], 1)


class SoaHead(AttentionHead):
    """Second-order attention on the raw SPD-pooled covariance."""

    def __init__(self, channels: int, config: AttentionConfig, rng):
        super().__init__(channels, channels * (channels + 1), config, rng)
        self.sqrt2 = config.sqrt2_offdiag

    def embed(self, f_e: Tensor, f_d: Tensor) -> Tensor:
        vec_e = upper_triangle_vec(spd_pool(f_e), sqrt2=self.sqrt2)
        vec_d = upper_triangle_vec(spd_pool(f_d), sqrt2=self.sqrt2)
        return concat([vec_e, vec_d], 1)


class SogaHead(AttentionHead):
    """Second-order geometric attention.

    The encoder and decoder descriptors go through two independent SPD
    branches (BiRe blocks, LogEig, vectorisation) before being fused.

    """

    def __init__(self, channels: int, config: AttentionConfig, rng):
        config.validate_channels(channels)

        branch_e = SpdBranch(
            channels,
            rng,
            n_blocks=config.bire_blocks,
            epsilon=config.epsilon,
            sqrt2=config.sqrt2_offdiag,
        )
        branch_d = SpdBranch(
            channels,
            rng,
            n_blocks=config.bire_blocks,
            epsilon=config.epsilon,
            sqrt2=config.sqrt2_offdiag,
        )

        super().__init__(channels, 2 * branch_e.embedding_dim, config, rng)

        self.branch_e = branch_e
        self.branch_d = branch_d

    def embed(self, f_e: Tensor, f_d: Tensor) -> Tensor:
        return concat([self.branch_e(spd_pool(f_e)), self.branch_d(spd_pool(f_d))], 1)

    def descriptors(self, f_e: Tensor, f_d: Tensor) -> list[Tensor]:
        """The post-ReEig matrices of both branches, for diagnostics."""

        return self.branch_e.rectified(spd_pool(f_e)) + self.branch_d.rectified(
            spd_pool(f_d)
        )


def build_attention_head(
    config: AttentionConfig,
    channels: int,
    rng: numpy.random.Generator,
) -> AttentionHead | None:
    """Returns the head for ``config.variant``, or `None` for no attention."""

    if config.variant == Variant.NONE:
        return None
    elif config.variant == Variant.FOA:
        return FoaHead(channels, config, rng)
    elif config.variant == Variant.SOA:
        return SoaHead(channels, config, rng)
    else:
        return SogaHead(channels, config, rng)
