"""Dataset plumbing: disk layout, the 10x augmentation recipe, and a
deterministic synthetic vehicle-silhouette dataset with an oracle drag label.

Disk layout: a dataset directory holds ``labels.csv`` (columns filename, cd,
condition) plus the referenced 8-bit RGB PNGs under ``images/``.

The synthetic generator is the desk-scale stand-in for a CFD-labeled
dataset: each record renders a filled side-view silhouette (body slab,
trapezoidal cabin, two wheel discs) whose drag label is a fixed function of
the geometry parameters, not of the pixels:

    cd = 0.15 + 0.25 (H/L) + 0.15 (1 - a/90) + 0.15 (1 - r/90) + 0.05 (2 rho / H)

The label is symmetric under horizontal flips (a and r enter symmetrically),
so flip augmentation is label-safe by construction.
"""

import csv
import hashlib
import math
import os
from dataclasses import dataclass

import numpy as np

from . import imageops
from .rng import generator

__all__ = [
    "DatasetRecord",
    "SynthVehicleParams",
    "oracle_cd",
    "render_vehicle",
    "synth_vehicle_dataset",
    "save_dataset",
    "load_dataset",
    "augment",
    "AugmentParams",
    "draw_augment_params",
    "apply_augment",
    "split_by_id_hash",
]

AUGMENTATIONS_PER_RECORD = 10
MAX_VSHIFT = 25
JITTER = 0.05

# parameter ranges as fractions of the canvas side (angles in degrees);
# chosen so silhouettes never clip the frame even after +-25 px shifts at
# side 224, and so labels stay inside (0.15, 0.75)
_L_RANGE = (0.55, 0.85)
_H_FRAC_RANGE = (0.16, 0.32)  # of side
_CABIN_FRAC_RANGE = (0.35, 0.65)  # of H
_ANGLE_RANGE = (15.0, 75.0)
_WHEEL_FRAC_RANGE = (0.15, 0.35)  # of H
_GROUND_FRAC = 0.84
_FILL = 0.15  # silhouette gray on white background


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    image: np.ndarray  # (3, H, W) in [0, 1]
    drag_label: float
    condition: str = None


@dataclass(frozen=True)
class SynthVehicleParams:
    """Side-view geometry in pixel units (angles in degrees).

    L: body length, H: body height, h: cabin height, a: windshield angle,
    r: rear slope angle, rho: wheel radius.
    """

    L: float
    H: float
    h: float
    a: float
    r: float
    rho: float

    def __post_init__(self):
        if not (0 < self.H < self.L):
            raise ValueError(f"need 0 < H < L, got H={self.H}, L={self.L}")
        for name, ang in (("a", self.a), ("r", self.r)):
            if not (10.0 <= ang <= 80.0):
                raise ValueError(f"{name} must be in [10, 80] degrees, got {ang}")
        if self.rho <= 0 or self.h <= 0:
            raise ValueError("rho and h must be positive")


def oracle_cd(params):
    """Ground-truth drag label from geometry (cabin height h is a nuisance
    parameter: visible in the image, absent from the label)."""
    p = params
    return (
        0.15
        + 0.25 * (p.H / p.L)
        + 0.15 * (1.0 - p.a / 90.0)
        + 0.15 * (1.0 - p.r / 90.0)
        + 0.05 * (2.0 * p.rho / p.H)
    )


def render_vehicle(params, side):
    """Rasterize the silhouette on a white canvas of shape (3, side, side)."""
    p = params
    s = int(side)
    yy, xx = np.mgrid[0:s, 0:s].astype(float)

    ground = _GROUND_FRAC * s
    cx = s / 2.0
    body_left = cx - p.L / 2.0
    body_right = cx + p.L / 2.0
    body_bottom = ground - p.rho
    body_top = body_bottom - p.H

    mask = (
        (xx >= body_left) & (xx <= body_right) & (yy >= body_top) & (yy <= body_bottom)
    )

    # cabin trapezoid on top of the body; slopes measured from horizontal,
    # front (windshield, angle a) on the right, rear slope r on the left.
    base_left = cx - 0.25 * p.L
    base_right = cx + 0.25 * p.L
    cot_a = 1.0 / math.tan(math.radians(p.a))
    cot_r = 1.0 / math.tan(math.radians(p.r))
    # cap cabin height so the roof keeps positive width; the cap changes h
    # only, which the label never reads
    base_w = base_right - base_left
    h_max = 0.85 * base_w / (cot_a + cot_r)
    h_eff = min(p.h, h_max)
    rise = body_top - yy  # positive above the body top
    cabin = (
        (rise >= 0)
        & (rise <= h_eff)
        & (xx >= base_left + rise * cot_r)
        & (xx <= base_right - rise * cot_a)
    )
    mask |= cabin

    for wx in (cx - 0.3 * p.L, cx + 0.3 * p.L):
        mask |= (xx - wx) ** 2 + (yy - (ground - p.rho)) ** 2 <= p.rho ** 2

    img = np.ones((3, s, s))
    img[:, mask] = _FILL
    return img


def _draw_params(rng, side):
    s = float(side)
    L = rng.uniform(*_L_RANGE) * s
    H = rng.uniform(*_H_FRAC_RANGE) * s
    h = rng.uniform(*_CABIN_FRAC_RANGE) * H
    a = rng.uniform(*_ANGLE_RANGE)
    r = rng.uniform(*_ANGLE_RANGE)
    rho = rng.uniform(*_WHEEL_FRAC_RANGE) * H
    return SynthVehicleParams(L=L, H=H, h=h, a=a, r=r, rho=rho)


def synth_vehicle_dataset(n, seed, side=224):
    """n deterministic records; record i draws its parameters from the
    splittable stream (seed, i), so any subset is reproducible."""
    n = int(n)
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    records = []
    for i in range(n):
        params = _draw_params(generator(seed, i), side)
        records.append(
            DatasetRecord(
                id=f"synth_{i:05d}",
                image=render_vehicle(params, side),
                drag_label=oracle_cd(params),
            )
        )
    return records


def save_dataset(records, directory):
    """Write labels.csv + images/*.png (the layout load_dataset reads)."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "cd", "condition"])
        for rec in records:
            fname = f"images/{rec.id}.png"
            imageops.save_png(rec.image, os.path.join(directory, fname))
            writer.writerow([fname, f"{rec.drag_label:.17g}", rec.condition or ""])


def load_dataset(directory):
    """Read a dataset directory back into records.

    Errors name the offending row or file; an empty labels.csv is a valid
    empty dataset.
    """
    labels_path = os.path.join(directory, "labels.csv")
    if not os.path.isfile(labels_path):
        raise FileNotFoundError(f"no labels.csv in {directory}")
    records = []
    with open(labels_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            fname = (row.get("filename") or "").strip()
            if not fname:
                raise ValueError(f"{labels_path}:{lineno}: missing filename")
            try:
                label = float(row["cd"])
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"{labels_path}:{lineno}: unparsable cd {row.get('cd')!r}")
            if not math.isfinite(label):
                raise ValueError(f"{labels_path}:{lineno}: nonfinite cd {label}")
            img_path = os.path.join(directory, fname)
            if not os.path.isfile(img_path):
                raise FileNotFoundError(f"{labels_path}:{lineno}: image not found: {fname}")
            image = imageops.load_png(img_path)
            condition = (row.get("condition") or "").strip() or None
            rec_id = os.path.splitext(os.path.basename(fname))[0]
            records.append(
                DatasetRecord(id=rec_id, image=image, drag_label=label, condition=condition)
            )
    return records


@dataclass(frozen=True)
class AugmentParams:
    """One sampled augmentation; identity is (False, 0, 1, 1, 1, 1)."""

    flip: bool
    shift: int
    brightness: float
    contrast: float
    saturation: float
    hue: float


def draw_augment_params(rng):
    return AugmentParams(
        flip=bool(rng.random() < 0.5),
        shift=int(rng.integers(-MAX_VSHIFT, MAX_VSHIFT + 1)),
        brightness=float(rng.uniform(1 - JITTER, 1 + JITTER)),
        contrast=float(rng.uniform(1 - JITTER, 1 + JITTER)),
        saturation=float(rng.uniform(1 - JITTER, 1 + JITTER)),
        hue=float(rng.uniform(1 - JITTER, 1 + JITTER)),
    )


def apply_augment(image, params):
    """Flip, shift, then the four color jitters; output clamped to [0, 1].

    The hue factor maps to a rotation angle of 2 pi (factor - 1).  With
    identity parameters the input image passes through bit-exactly.
    """
    out = np.asarray(image, dtype=float)
    if params.flip:
        out = imageops.hflip(out)
    if params.shift != 0:
        out = imageops.vshift(out, params.shift)
    out = imageops.adjust_brightness(out, params.brightness)
    out = imageops.adjust_contrast(out, params.contrast)
    out = imageops.adjust_saturation(out, params.saturation)
    out = imageops.adjust_hue(out, 2.0 * math.pi * (params.hue - 1.0))
    return np.clip(out, 0.0, 1.0)


def augment(record, seed, *path):
    """Exactly 10 jittered copies of a record; the label never changes.

    ``path`` selects a splittable substream, letting callers give every
    record its own independent stream from one root seed.
    """
    rng = generator(seed, *path)
    out = []
    for j in range(AUGMENTATIONS_PER_RECORD):
        params = draw_augment_params(rng)
        out.append(
            DatasetRecord(
                id=f"{record.id}_aug{j}",
                image=apply_augment(record.image, params),
                drag_label=record.drag_label,
                condition=record.condition,
            )
        )
    return out


def split_by_id_hash(records, test_percent=20):
    """Deterministic train/test split keyed on a stable hash of the id.

    A record goes to the test set when sha256(id) mod 100 < test_percent;
    the split therefore survives reordering, subsetting, and reruns.
    """
    train, test = [], []
    for rec in records:
        bucket = int.from_bytes(hashlib.sha256(rec.id.encode()).digest()[:8], "big") % 100
        (test if bucket < test_percent else train).append(rec)
    return train, test
