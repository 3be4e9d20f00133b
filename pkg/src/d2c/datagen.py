"""Procedural class-conditional toy datasets with a hidden per-sample
difficulty factor.

Both generators are pure functions of their arguments: a fixed draw order
(difficulty factors, then base noise, then clutter) makes regeneration
bitwise identical. The difficulty factor scales the clutter each sample
receives; it is recorded for scorer validation and never used by training.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .io_common import read_container, write_container

DATASET_MAGIC = b"D2CD"
DATASET_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    samples: np.ndarray            # (n, D) float32
    labels: np.ndarray             # (n,)  int64
    class_count: int
    difficulty_factor: np.ndarray  # (n,)  float64 in [0, 1]
    seed: int
    kind: str = "unknown"
    class_names: list[str] | None = None

    def __post_init__(self):
        n = len(self.samples)
        if len(self.labels) != n or len(self.difficulty_factor) != n:
            raise ValueError("samples/labels/difficulty_factor lengths disagree")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")
        if np.any(self.difficulty_factor < 0) or np.any(self.difficulty_factor > 1):
            raise ValueError("difficulty_factor outside [0, 1]")
        counts = np.bincount(self.labels, minlength=self.class_count)
        if np.any(counts == 0):
            raise ValueError("every class needs at least one sample")

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def default_class_names(C: int) -> list[str]:
    return [f"class {i}" for i in range(C)]


def gen_gauss2d(C: int, n_per_class: int, clutter_max: float, seed: int,
                dim: int = 2, radius: float = 4.0,
                class_std: float = 0.5) -> LabeledDataset:
    """Gaussian blobs centered on a circle, plus difficulty-scaled clutter.

    Class y sits at angle 2πy/C, radius `radius`, in the first two of `dim`
    coordinates. Each sample is center + N(0, class_std²·I) + clutter·N(0, I)
    with clutter = difficulty_factor·clutter_max and difficulty_factor drawn
    U[0, 1] per sample. `dim` > 2 embeds the same circle layout in a larger
    ambient space (isotropic noise in every coordinate), which concentrates
    the clutter norm around its scale and makes the hidden difficulty
    recoverable from geometry alone.
    """
    if C < 2:
        raise ValueError(f"need at least 2 classes, got {C}")
    if n_per_class < 4:
        raise ValueError(f"need n_per_class >= 4, got {n_per_class}")
    if clutter_max < 0:
        raise ValueError(f"clutter_max must be >= 0, got {clutter_max}")
    if dim < 2:
        raise ValueError(f"dim must be >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    n = C * n_per_class
    angles = 2.0 * np.pi * np.arange(C) / C
    centers = np.zeros((C, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    df = rng.uniform(size=n)
    base = rng.standard_normal((n, dim))
    clutter = rng.standard_normal((n, dim))
    x = centers[labels] + class_std * base + (df * clutter_max)[:, None] * clutter
    return LabeledDataset(samples=x.astype(np.float32), labels=labels,
                          class_count=C, difficulty_factor=df, seed=seed,
                          kind="gauss2d", class_names=default_class_names(C))


def _shape_templates() -> np.ndarray:
    """Eight distinct 8x8 binary glyphs."""
    t = np.zeros((8, 8, 8), dtype=np.float64)
    t[0, 3:5, :] = 1.0; t[0, :, 3:5] = 1.0            # cross
    t[1, 0, :] = t[1, 7, :] = 1.0; t[1, :, 0] = t[1, :, 7] = 1.0  # box outline
    idx = np.arange(8)
    t[2, idx, idx] = 1.0; t[2, idx, 7 - idx] = 1.0    # X
    t[3, 2, :] = t[3, 5, :] = 1.0                     # horizontal bars
    t[4, :, 2] = t[4, :, 5] = 1.0                     # vertical bars
    t[5, 2:6, 2:6] = 1.0                              # filled block
    t[6, 0, :] = 1.0; t[6, :, 3:5] = 1.0              # T
    t[7, :, 0] = 1.0; t[7, 7, :] = 1.0                # L
    return t


def gen_shapes8x8(C: int, n_per_class: int, clutter_max: float, seed: int,
                  jitter: bool = True) -> LabeledDataset:
    """8x8 procedural glyphs with affine jitter and difficulty-scaled clutter.

    clutter_max is the maximum fraction of the 64 pixels receiving additive
    background clutter at difficulty 1; pixel values are clamped to [0, 1].
    """
    templates = _shape_templates()
    if not 1 <= C <= len(templates):
        raise ValueError(f"C={C} exceeds the {len(templates)} distinct shape templates")
    if C < 2:
        raise ValueError(f"need at least 2 classes, got {C}")
    if n_per_class < 4:
        raise ValueError(f"need n_per_class >= 4, got {n_per_class}")
    if clutter_max < 0:
        raise ValueError(f"clutter_max must be >= 0, got {clutter_max}")
    rng = np.random.default_rng(seed)
    n = C * n_per_class
    labels = np.repeat(np.arange(C, dtype=np.int64), n_per_class)
    df = rng.uniform(size=n)
    shifts = rng.integers(-1, 2, size=(n, 2)) if jitter else np.zeros((n, 2), int)
    x = np.empty((n, 64), dtype=np.float64)
    for i in range(n):
        img = templates[labels[i]]
        if jitter:
            img = np.roll(img, (shifts[i, 0], shifts[i, 1]), axis=(0, 1))
        img = img.reshape(64).copy()
        n_clut = int(np.floor(df[i] * clutter_max * 64))
        if n_clut > 0:
            pos = rng.choice(64, size=n_clut, replace=False)
            img[pos] += rng.uniform(0.25, 1.0, size=n_clut)
        x[i] = np.clip(img, 0.0, 1.0)
    names = ["cross", "box", "cross-diagonal", "bars-horizontal",
             "bars-vertical", "block", "tee", "ell"][:C]
    return LabeledDataset(samples=x.astype(np.float32), labels=labels,
                          class_count=C, difficulty_factor=df, seed=seed,
                          kind="shapes8x8", class_names=names)


GENERATORS = {"gauss2d": gen_gauss2d, "shapes8x8": gen_shapes8x8}


def generate(kind: str, C: int, n_per_class: int, clutter_max: float,
             seed: int, **kwargs) -> LabeledDataset:
    if kind not in GENERATORS:
        raise ValueError(f"unknown generator '{kind}'; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](C, n_per_class, clutter_max, seed, **kwargs)


def split_train_heldout(ds: LabeledDataset) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic index-parity split: even rows train, odd rows held out."""
    def pick(mask):
        return replace(
            ds,
            samples=ds.samples[mask],
            labels=ds.labels[mask],
            difficulty_factor=ds.difficulty_factor[mask],
        )
    idx = np.arange(ds.n)
    return pick(idx % 2 == 0), pick(idx % 2 == 1)


def write_dataset(ds: LabeledDataset, path) -> bytes:
    """Samples-only profile of the condensed-container format."""
    manifest = {
        "profile": "samples",
        "kind": ds.kind,
        "seed": int(ds.seed),
        "class_count": int(ds.class_count),
        "labels": [int(v) for v in ds.labels],
        "difficulty_factor": [float(v) for v in ds.difficulty_factor],
        "class_names": ds.class_names,
    }
    return write_container(path, DATASET_MAGIC, DATASET_VERSION, manifest,
                           {"samples": ds.samples.astype(np.float32)})


def read_dataset(path) -> LabeledDataset:
    _, manifest, arrays = read_container(path, DATASET_MAGIC, DATASET_VERSION)
    if manifest.get("profile") != "samples":
        raise ValueError(f"{path}: not a samples-profile container "
                         f"(profile={manifest.get('profile')!r})")
    return LabeledDataset(
        samples=arrays["samples"],
        labels=np.asarray(manifest["labels"], dtype=np.int64),
        class_count=int(manifest["class_count"]),
        difficulty_factor=np.asarray(manifest["difficulty_factor"], dtype=np.float64),
        seed=int(manifest["seed"]),
        kind=manifest.get("kind", "unknown"),
        class_names=manifest.get("class_names"),
    )
