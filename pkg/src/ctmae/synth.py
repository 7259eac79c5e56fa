"""Deterministic synthetic chest-CT stand-ins.

Each volume is a body ellipsoid (intensity 0.6) holding two lung ellipsoids
(base 0.25) on an empty background (0.0). Inside the lungs a sinusoidal
texture along z encodes the class: 2, 4, 6 or 8 cycles per lung height.
Everything is expressed in normalized [0, 1] intensity; files on disk are
written in Hounsfield units so the preprocessing chain maps them back.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .preprocess import HU_HI, HU_LO, ManifestRecord, write_manifest
from .volume_io import DT_INT16, MaskVolume, Volume, encode_nifti, write_mask

CLASS_CYCLES = (2, 4, 6, 8)
TEXTURE_AMPLITUDE = 0.2
LUNG_BASE = 0.25
BODY_LEVEL = 0.6
NOISE_SIGMA = 0.02


@dataclass(frozen=True)
class SynthSpec:
    side: int = 32
    label: int = 0
    seed: int = 0
    # lung centres and radii as fractions of the cube side
    lung_centers: Tuple[Tuple[float, float, float], ...] = ((0.3, 0.5, 0.5), (0.7, 0.5, 0.5))
    lung_radii: Tuple[float, float, float] = (0.18, 0.32, 0.4)
    body_radii: Tuple[float, float, float] = (0.47, 0.42, 0.48)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # per-scan texture phase; frequency alone then identifies the class
    random_phase: bool = True

    def __post_init__(self):
        if self.label not in range(len(CLASS_CYCLES)):
            raise ValueError(f"label must be in 0..{len(CLASS_CYCLES) - 1}")
        if self.side < 2:
            raise ValueError("side must be at least 2")


def _grid(side):
    c = (np.arange(side) + 0.5) / side
    return np.meshgrid(c, c, c, indexing="ij")


def _ellipsoid(x, y, z, center, radii):
    return (((x - center[0]) / radii[0]) ** 2 + ((y - center[1]) / radii[1]) ** 2
            + ((z - center[2]) / radii[2]) ** 2) <= 1.0


def lung_mask(spec: SynthSpec) -> np.ndarray:
    x, y, z = _grid(spec.side)
    mask = np.zeros((spec.side,) * 3, dtype=bool)
    for center in spec.lung_centers:
        mask |= _ellipsoid(x, y, z, center, spec.lung_radii)
    return mask


def generate(spec: SynthSpec):
    """Return ``(Volume, MaskVolume, label)`` in normalized intensity."""
    x, y, z = _grid(spec.side)
    lungs = lung_mask(spec)
    body = _ellipsoid(x, y, z, (0.5, 0.5, 0.5), spec.body_radii) | lungs
    cycles = CLASS_CYCLES[spec.label]
    height = 2 * spec.lung_radii[2]
    z0 = spec.lung_centers[0][2] - spec.lung_radii[2]
    rng = np.random.default_rng([spec.seed, spec.label])
    phase = rng.uniform(0.0, 2 * np.pi) if spec.random_phase else 0.0
    texture = TEXTURE_AMPLITUDE * np.sin(2 * np.pi * cycles * (z - z0) / height + phase)
    vol = np.where(body, BODY_LEVEL, 0.0)
    vol = np.where(lungs, LUNG_BASE + texture, vol)
    vol = vol + rng.normal(0.0, NOISE_SIGMA, size=vol.shape)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    return (Volume.from_array(vol, spec.spacing),
            MaskVolume.from_array(lungs.astype(np.uint8), spec.spacing),
            spec.label)


def to_hu(normalized: np.ndarray) -> np.ndarray:
    return HU_LO + (HU_HI - HU_LO) * np.asarray(normalized, dtype=np.float64)


def generate_corpus(n_per_class: int, side: int, seed: int, out_dir) -> List[ManifestRecord]:
    """Write ``4 * n_per_class`` scans and masks plus ``manifest.tsv`` to ``out_dir``.

    Scans are stored as int16 Hounsfield units.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for label in range(len(CLASS_CYCLES)):
        for k in range(n_per_class):
            spec = SynthSpec(side=side, label=label, seed=seed * 1_000_003 + k)
            vol, mask, _ = generate(spec)
            stem = f"synth_c{label}_{k:03d}"
            scan_path, mask_path = out_dir / f"{stem}.nii", out_dir / f"{stem}_mask.nii"
            hu = np.round(to_hu(vol.data)).astype(np.int16)
            scan_path.write_bytes(encode_nifti(hu, vol.spacing, DT_INT16))
            write_mask(mask, mask_path)
            records.append(ManifestRecord(scan_path, mask_path, label))
    write_manifest(records, out_dir / "manifest.tsv")
    return records


def band_energies(volume: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Spectral energy along z of the lung-masked signal at each class frequency.

    Used as a fixed, model-free feature set to confirm the classes are separable.
    """
    v = np.asarray(volume, dtype=np.float64)
    m = np.asarray(mask) > 0
    counts = m.sum(axis=(0, 1))
    profile = np.where(counts > 0, (v * m).sum(axis=(0, 1)) / np.maximum(counts, 1), 0.0)
    zs = np.flatnonzero(counts)
    seg = profile[zs.min():zs.max() + 1]
    seg = seg - seg.mean()
    n = seg.size
    t = np.arange(n) / n
    energies = []
    for cycles in CLASS_CYCLES:
        basis = np.exp(-2j * np.pi * cycles * t)
        energies.append(abs((seg * basis).sum()) ** 2)
    return np.asarray(energies)
