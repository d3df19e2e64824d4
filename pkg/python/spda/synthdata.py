#!/usr/bin/env python
# -*- coding: utf-8 -*-
#
# @Author: José Sánchez-Gallego (gallegoj@uw.edu)
# @Date: 2024-03-11
# @Filename: synthdata.py
# @License: BSD 3-clause (http://www.opensource.org/licenses/BSD-3-Clause)

from __future__ import annotations

import json
import multiprocessing
import os
import pathlib
import struct
import zlib
from dataclasses import asdict, dataclass, field

from typing import Any, Sequence

import numpy
import scipy.ndimage

from spda import log
from spda.exceptions import ConfigurationError, CorruptFileError, SpdaError


__all__ = [
    "SIZE_CLASSES",
    "LesionRecord",
    "SynthCase",
    "SynthParams",
    "splitmix64",
    "case_seed",
    "zscore_normalize",
    "generate_case",
    "generate_dataset",
    "generate_from_params",
    "save_case",
    "load_case",
    "write_dataset",
    "read_dataset",
    "read_manifest",
    "get_processes",
]


SIZE_CLASSES = ("small", "medium", "large")

CASE_MAGIC = b"SPDA"
CASE_VERSION = 1

MAX_ATTEMPTS = 100

# A Gaussian bump exp(-q/2) is at half maximum where q = 2 ln 2.
HALF_MAX_Q = 2.0 * numpy.log(2.0)

_MASK64 = (1 << 64) - 1


@dataclass
class LesionRecord:
    """A synthetic lesion.

    ``semi_axes`` are the half-maximum semi-axes of the ellipsoid in voxels and
    ``n_voxels`` the exact voxel count of the lesion in the mask.

    """

    centroid: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    n_voxels: int
    volume_mm3: float
    size_class: str


@dataclass
class SynthCase:
    """A synthetic three-channel volume with its lesion mask.

    ``volume`` has shape ``[3, H, W, D]`` and is z-score normalised per
    channel; ``mask`` is a boolean ``[H, W, D]`` array.

    """

    case_id: int
    volume: numpy.ndarray
    mask: numpy.ndarray
    lesions: list[LesionRecord] = field(default_factory=list)
    seed: int = 0

    @property
    def label(self) -> bool:
        """Whether the case contains at least one lesion."""

        return len(self.lesions) > 0

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)


@dataclass
class SynthParams:
    """Generator parameters. Mirrors the ``synth`` configuration section."""

    n_cases: int = 64
    prevalence: float = 0.5
    size_mix: tuple[float, float, float] = (0.34, 0.33, 0.33)
    shape: tuple[int, int, int] = (32, 32, 32)
    voxel_volume: float = 0.75
    max_lesions: int = 1
    size_ranges_mm3: tuple = ((300, 931), (931, 2337), (2337, 3600))
    seed: int = 7

    def __post_init__(self):
        self.size_mix = tuple(float(ww) for ww in self.size_mix)
        self.shape = tuple(int(ss) for ss in self.shape)
        self.size_ranges_mm3 = tuple(tuple(rr) for rr in self.size_ranges_mm3)

        if self.n_cases < 1:
            raise ConfigurationError("At least one case must be generated.")
        if not 0.0 <= self.prevalence <= 1.0:
            raise ConfigurationError("The lesion prevalence must be in [0, 1].")
        if len(self.size_mix) != 3 or abs(sum(self.size_mix) - 1.0) > 1e-6:
            raise ConfigurationError("size_mix must be three weights summing to 1.")
        if any(ww < 0 for ww in self.size_mix):
            raise ConfigurationError("size_mix weights must be non-negative.")
        if len(self.shape) != 3:
            raise ConfigurationError("The volume shape must have three dimensions.")
        if self.voxel_volume <= 0:
            raise ConfigurationError("The voxel volume must be positive.")
        if self.max_lesions < 1:
            raise ConfigurationError("max_lesions must be at least 1.")

    @classmethod
    def from_config(cls, section: dict[str, Any], **overrides) -> SynthParams:
        known = cls.__dataclass_fields__.keys()
        values = {key: value for key, value in section.items() if key in known}
        values.update({kk: vv for kk, vv in overrides.items() if vv is not None})
        return cls(**values)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["size_mix"] = list(self.size_mix)
        data["shape"] = list(self.shape)
        data["size_ranges_mm3"] = [list(rr) for rr in self.size_ranges_mm3]
        return data


def splitmix64(state: int) -> int:
    """One output of the SplitMix64 generator for a 64-bit ``state``."""

    zz = (state + 0x9E3779B97F4A7C15) & _MASK64
    zz = ((zz ^ (zz >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    zz = ((zz ^ (zz >> 27)) * 0x94D049BB133111EB) & _MASK64
    return zz ^ (zz >> 31)


def case_seed(master_seed: int, index: int) -> int:
    """The seed of case ``index``: SplitMix64 of ``master + index·γ``."""

    return splitmix64((master_seed + index * 0x9E3779B97F4A7C15) & _MASK64)


def zscore_normalize(volume: numpy.ndarray) -> numpy.ndarray:
    """Per-channel ``(x - mean) / std``. Channels with ``std < 1e-12`` become zero."""

    volume = numpy.asarray(volume, dtype=numpy.float64)
    out = numpy.zeros_like(volume)

    for ii, channel in enumerate(volume):
        std = channel.std()
        if std < 1e-12:
            continue
        out[ii] = (channel - channel.mean()) / std

    return out


def _grid(shape: tuple[int, int, int]) -> list[numpy.ndarray]:
    axes = [numpy.arange(nn, dtype=numpy.float64) for nn in shape]
    return numpy.meshgrid(*axes, indexing="ij")


def _quadratic(grid, centre, scales) -> numpy.ndarray:
    return sum(((gg - cc) / ss) ** 2 for gg, cc, ss in zip(grid, centre, scales))


def _place_lesion(
    rng: numpy.random.Generator,
    params: SynthParams,
    grid: list[numpy.ndarray],
    occupied: numpy.ndarray,
):
    size_class = int(rng.choice(3, p=params.size_mix))
    low, high = params.size_ranges_mm3[size_class]
    target_voxels = rng.uniform(low, high) / params.voxel_volume

    radius = (3.0 * target_voxels / (4.0 * numpy.pi)) ** (1.0 / 3.0)
    stretch = rng.uniform(0.75, 1.33, size=3)
    stretch /= numpy.prod(stretch) ** (1.0 / 3.0)
    semi_axes = radius * stretch

    structure = scipy.ndimage.generate_binary_structure(3, 3)

    for _ in range(MAX_ATTEMPTS):
        centre = []
        for size, axis in zip(params.shape, semi_axes):
            lo, hi = axis, size - 1 - axis
            if lo > hi:
                break
            centre.append(rng.uniform(lo, hi))

        if len(centre) < 3:
            continue

        sigmas = semi_axes / numpy.sqrt(HALF_MAX_Q)
        quad = _quadratic(grid, centre, sigmas)
        lesion = quad <= HALF_MAX_Q
        if not lesion.any():
            continue

        # Dilating by one voxel keeps lesions in separate 26-connected components.
        if numpy.any(scipy.ndimage.binary_dilation(lesion, structure) & occupied):
            continue

        n_voxels = int(lesion.sum())
        record = LesionRecord(
            centroid=tuple(float(cc) for cc in centre),
            semi_axes=tuple(float(aa) for aa in semi_axes),
            n_voxels=n_voxels,
            volume_mm3=n_voxels * params.voxel_volume,
            size_class=SIZE_CLASSES[size_class],
        )

        return record, lesion, numpy.exp(-0.5 * quad)

    raise SpdaError(
        f"Could not place a {SIZE_CLASSES[size_class]} lesion after "
        f"{MAX_ATTEMPTS} attempts. The volume is too small for the requested lesions."
    )


def generate_case(params: SynthParams, index: int) -> SynthCase:
    """Generates case ``index`` of a dataset. Depends only on the master seed."""

    seed = case_seed(params.seed, index)
    rng = numpy.random.default_rng(seed)

    shape = params.shape
    grid = _grid(shape)

    mask = numpy.zeros(shape, dtype=bool)
    bumps = numpy.zeros(shape)
    lesions: list[LesionRecord] = []

    if rng.random() < params.prevalence:
        n_lesions = int(rng.integers(1, params.max_lesions + 1))
        for _ in range(n_lesions):
            record, lesion, bump = _place_lesion(rng, params, grid, mask)
            mask |= lesion
            bumps += bump * lesion
            lesions.append(record)

    centre = [(nn - 1) / 2.0 for nn in shape]
    gland = numpy.exp(-0.5 * _quadratic(grid, centre, [nn / 4.0 for nn in shape]))

    shared = scipy.ndimage.gaussian_filter(rng.standard_normal(shape), sigma=2.0)
    noise = [
        scipy.ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0)
        for _ in range(3)
    ]

    # T2W analog mildly dark, DWI analog bright and ADC analog dark in lesions.
    volume = numpy.stack(
        [
            1.0 * gland - 0.6 * bumps + 0.5 * shared + 0.3 * noise[0],
            0.6 * gland + 1.5 * bumps + 0.3 * shared + 0.3 * noise[1],
            0.8 * gland - 1.2 * bumps - 0.4 * shared + 0.3 * noise[2],
        ]
    )

    return SynthCase(
        case_id=index,
        volume=zscore_normalize(volume),
        mask=mask,
        lesions=lesions,
        seed=seed,
    )


def get_processes(processes: int | None = None) -> int:
    """Number of worker processes, by default from ``$SPDA_THREADS`` (1)."""

    if processes is None:
        processes = int(os.environ.get("SPDA_THREADS", "1"))

    return max(1, processes)


def generate_dataset(
    n_cases: int,
    prevalence: float = 0.5,
    size_mix: Sequence[float] = (0.34, 0.33, 0.33),
    shape: Sequence[int] = (32, 32, 32),
    seed: int = 7,
    processes: int | None = None,
    **kwargs,
) -> list[SynthCase]:
    """Generates a deterministic synthetic dataset.

    Parameters
    ----------
    n_cases
        Number of cases.
    prevalence
        Probability that a case contains lesions.
    size_mix
        Weights of the small, medium and large lesion classes.
    shape
        The ``(H, W, D)`` grid.
    seed
        Master seed. Case ``i`` uses `.case_seed` of the master seed, so the
        output does not depend on the number of worker processes.
    processes
        Worker processes. Defaults to ``$SPDA_THREADS``.
    kwargs
        Other `.SynthParams` fields (``voxel_volume``, ``max_lesions``,
        ``size_ranges_mm3``).

    """

    params = SynthParams(
        n_cases=n_cases,
        prevalence=prevalence,
        size_mix=tuple(size_mix),
        shape=tuple(shape),
        seed=seed,
        **kwargs,
    )

    return generate_from_params(params, processes=processes)


def generate_from_params(params: SynthParams, processes: int | None = None):
    """Generates the dataset described by ``params``."""

    processes = get_processes(processes)
    args = [(params, index) for index in range(params.n_cases)]

    if processes > 1:
        with multiprocessing.Pool(processes) as pool:
            cases = pool.starmap(generate_case, args)
    else:
        cases = [generate_case(*arg) for arg in args]

    n_positive = sum(case.label for case in cases)
    log.debug(f"Generated {len(cases)} cases, {n_positive} with lesions.")

    return cases


def save_case(case: SynthCase, path: str | os.PathLike):
    """Writes a case file.

    The file holds ``SPDA``, a ``uint16`` version and a ``uint32`` header
    length, then the payload: a JSON header, the ``<f8`` volume and the
    bit-packed mask. A CRC32 of the payload closes the file.

    """

    header = {
        "case_id": case.case_id,
        "seed": case.seed,
        "shape": list(case.mask.shape),
        "label": case.label,
        "lesions": [asdict(record) for record in case.lesions],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()

    volume_bytes = numpy.ascontiguousarray(case.volume, dtype="<f8").tobytes()
    mask_bytes = numpy.packbits(case.mask.astype(numpy.uint8).ravel()).tobytes()

    payload = header_bytes + volume_bytes + mask_bytes

    with open(path, "wb") as fd:
        fd.write(CASE_MAGIC)
        fd.write(struct.pack("<HI", CASE_VERSION, len(header_bytes)))
        fd.write(payload)
        fd.write(struct.pack("<I", zlib.crc32(payload)))


def load_case(path: str | os.PathLike) -> SynthCase:
    """Reads a file written by `.save_case`.

    Raises
    ------
    CorruptFileError
        On a bad magic, version mismatch, truncation or checksum failure.

    """

    raw = pathlib.Path(path).read_bytes()
    prefix = len(CASE_MAGIC) + struct.calcsize("<HI")

    if len(raw) < prefix or raw[: len(CASE_MAGIC)] != CASE_MAGIC:
        raise CorruptFileError(f"{path!s} is not a case file.")

    version, header_len = struct.unpack("<HI", raw[len(CASE_MAGIC) : prefix])
    if version != CASE_VERSION:
        raise CorruptFileError(f"{path!s}: unsupported version {version}.")

    if len(raw) < prefix + header_len + 4:
        raise CorruptFileError(f"{path!s} is truncated.")

    payload, crc = raw[prefix:-4], struct.unpack("<I", raw[-4:])[0]

    try:
        header = json.loads(payload[:header_len].decode())
        shape = tuple(header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError):
        raise CorruptFileError(f"{path!s}: cannot decode the header.")

    n_voxels = int(numpy.prod(shape))
    volume_len = 3 * n_voxels * 8
    mask_len = (n_voxels + 7) // 8

    if len(payload) != header_len + volume_len + mask_len:
        raise CorruptFileError(f"{path!s} is truncated.")

    if zlib.crc32(payload) != crc:
        raise CorruptFileError(f"{path!s}: checksum mismatch.")

    body = payload[header_len:]
    volume = numpy.frombuffer(body[:volume_len], dtype="<f8").reshape((3,) + shape)
    bits = numpy.frombuffer(body[volume_len:], dtype=numpy.uint8)
    mask = numpy.unpackbits(bits, count=n_voxels).reshape(shape).astype(bool)

    lesions = [
        LesionRecord(
            centroid=tuple(record["centroid"]),
            semi_axes=tuple(record["semi_axes"]),
            n_voxels=record["n_voxels"],
            volume_mm3=record["volume_mm3"],
            size_class=record["size_class"],
        )
        for record in header["lesions"]
    ]

    return SynthCase(
        case_id=header["case_id"],
        volume=volume.astype(numpy.float64),
        mask=mask,
        lesions=lesions,
        seed=header["seed"],
    )


def write_dataset(
    cases: Sequence[SynthCase],
    directory: str | os.PathLike,
    params: SynthParams | None = None,
    force: bool = False,
    provenance: dict[str, Any] | None = None,
) -> pathlib.Path:
    """Writes ``cases/case_%05d.spda`` files and ``manifest.json``.

    Raises
    ------
    SpdaError
        If the directory is not empty and ``force`` is not set.

    """

    directory = pathlib.Path(directory)
    cases_dir = directory / "cases"

    if directory.is_dir() and any(directory.iterdir()) and not force:
        raise SpdaError(f"{directory!s} is not empty. Use force to overwrite.")

    cases_dir.mkdir(parents=True, exist_ok=True)
    if force:
        for old in cases_dir.glob("*.spda"):
            old.unlink()

    entries = []
    for case in cases:
        filename = f"case_{case.case_id:05d}.spda"
        save_case(case, cases_dir / filename)
        entries.append(
            {
                "file": f"cases/{filename}",
                "case_id": case.case_id,
                "label": case.label,
                "n_lesions": len(case.lesions),
            }
        )

    manifest = {
        "format_version": CASE_VERSION,
        "seed": params.seed if params else None,
        "params": params.to_dict() if params else {},
        "cases": entries,
    }
    if provenance:
        manifest["provenance"] = provenance

    with open(directory / "manifest.json", "w") as fd:
        json.dump(manifest, fd, indent=2, sort_keys=True)

    log.info(f"Wrote {len(entries)} cases to {directory!s}.")

    return directory


def read_manifest(directory: str | os.PathLike) -> dict[str, Any]:
    """Returns the decoded ``manifest.json`` of a dataset directory."""

    path = pathlib.Path(directory) / "manifest.json"
    if not path.exists():
        raise SpdaError(f"No manifest found in {directory!s}.")

    with open(path) as fd:
        return json.load(fd)


def read_dataset(directory: str | os.PathLike) -> list[SynthCase]:
    """Loads every case of a dataset directory in lexicographic file order."""

    files = sorted((pathlib.Path(directory) / "cases").glob("*.spda"))
    if len(files) == 0:
        raise SpdaError(f"No case files found in {directory!s}.")

    return [load_case(path) for path in files]
