"""Distribution metrics and the condensation comparison harness.

Fréchet distance between Gaussian fits (exact symmetric-eigendecomposition
form, no iterative square roots) plus an unbiased RBF-kernel MMD. The
harness trains one reference model per seed, scores the train split once,
then sweeps selection variants; reference checkpoints and score tables are
content-addressed on disk so reruns and grid extensions skip the expensive
stages.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .attacher import AttachConfig, build_condensed
from .datagen import split_train_heldout
from .io_common import fingerprint_hex, manifest_bytes
from .model import DenoiserModel, ModelConfig, load_model, save_model
from .scorer import MCConfig, check_fingerprint, read_scores, score_dataset, \
    write_scores
from .schedule import make_schedule
from .selector import SelectionSpec, select
from .trainer import TrainConfig, sample_per_class, train, train_reference


# -------------------------------------------------------------------- metrics

def _sym_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues are clipped at zero: sample covariances sit on the PSD
    boundary and roundoff pushes them slightly past it.
    """
    w, v = np.linalg.eigh((mat + mat.T) / 2.0)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Squared Fréchet distance between Gaussian fits of two samples:

        ||mu_x - mu_y||^2 + tr(S_x + S_y - 2 (S_x^1/2 S_y S_x^1/2)^1/2)
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"need 2-d samples with equal width, got {x.shape} "
                         f"and {y.shape}")
    d = x.shape[1]
    if x.shape[0] < d + 1 or y.shape[0] < d + 1:
        raise ValueError(f"need at least dim+1={d + 1} rows per side for a "
                         f"covariance fit, got {x.shape[0]} and {y.shape[0]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples contain non-finite values")
    mu_x, mu_y = x.mean(axis=0), y.mean(axis=0)
    cx = np.cov(x, rowvar=False)
    cy = np.cov(y, rowvar=False)
    rx = _sym_sqrt(cx)
    inner = _sym_sqrt(rx @ cy @ rx)
    val = float(((mu_x - mu_y) ** 2).sum()
                + np.trace(cx) + np.trace(cy) - 2.0 * np.trace(inner))
    return max(val, 0.0)        # roundoff can leave a tiny negative residue


def frechet_per_class(x, x_labels, y, y_labels) -> float:
    """Mean of the class-conditional Fréchet distances.

    Pooled moments can hide a model that nails the global mixture while
    scrambling classes; this variant fits one Gaussian per class on each
    side. Both label sets must cover the same classes.
    """
    cx = np.unique(np.asarray(x_labels))
    cy = np.unique(np.asarray(y_labels))
    if cx.shape != cy.shape or not np.array_equal(cx, cy):
        raise ValueError(f"label sets differ: {cx.tolist()} vs {cy.tolist()}")
    vals = [frechet_distance(np.asarray(x)[np.asarray(x_labels) == c],
                             np.asarray(y)[np.asarray(y_labels) == c])
            for c in cx]
    return float(np.mean(vals))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances via the Gram-matrix expansion.

    ||a_i - b_j||^2 = ||a_i||^2 + ||b_j||^2 - 2 a_i.b_j; O(n^2) memory
    instead of the O(n^2 d) broadcast tensor, which matters at eval sizes.
    Roundoff can leave tiny negatives, clipped here.
    """
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    return np.clip(aa[:, None] + bb[None, :] - 2.0 * (a @ b.T), 0.0, None)


def median_heuristic(x: np.ndarray, y: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample (zero pairs excluded)."""
    z = np.vstack([np.asarray(x, dtype=np.float64),
                   np.asarray(y, dtype=np.float64)])
    sq = _sq_dists(z, z)
    iu = np.triu_indices(len(z), k=1)
    d = np.sqrt(sq[iu])
    d = d[d > 0]
    return float(np.median(d)) if len(d) else 1.0


def mmd_rbf(x: np.ndarray, y: np.ndarray, bandwidth=None) -> float:
    """Unbiased squared MMD with kernel exp(-||a-b||^2 / (2 sigma^2)).

    ``bandwidth`` (sigma) defaults to the median heuristic on the pooled
    sample. The estimator excludes diagonal terms, so its expectation is
    exactly zero when both samples share a distribution.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("unbiased MMD needs at least 2 rows per side")
    if bandwidth is None:
        bandwidth = median_heuristic(x, y)
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    g = 1.0 / (2.0 * bandwidth * bandwidth)

    def k(a, b):
        return np.exp(-g * _sq_dists(a, b))

    kxx = k(x, x)
    kyy = k(y, y)
    kxy = k(x, y)
    sx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sx + sy - 2.0 * kxy.mean())


# ------------------------------------------------------------------ the grid

def variant_name(spec: SelectionSpec) -> str:
    return f"interval-k{spec.k}" if spec.strategy == "interval" else spec.strategy


@dataclass(frozen=True)
class ComparisonConfig:
    variants: tuple            # SelectionSpec per grid cell
    seeds: tuple = (0,)
    d_model: int = 16
    d_text: int = 32
    d_feat: int = 16
    B: int = 3
    h: int = 4
    ell: int = 2
    L: int = 8
    attach: AttachConfig = AttachConfig()
    mc: MCConfig = MCConfig()
    ref_train: TrainConfig = TrainConfig(steps=400, batch_size=32, lr=1e-3,
                                         p_null=0.1, use_proj=False)
    cond_train: TrainConfig = TrainConfig(steps=400, batch_size=32, lr=1e-3,
                                          p_null=0.1, use_proj=True)
    n_eval_per_class: int = 500
    sample_steps: int = 16
    cfg_scale: float = 1.0
    cache_dir: str | None = None


@dataclass
class CacheStats:
    ref_hits: int = 0
    ref_misses: int = 0
    score_hits: int = 0
    score_misses: int = 0

    @property
    def misses(self) -> int:
        return self.ref_misses + self.score_misses


@dataclass
class ComparisonTable:
    rows: list = field(default_factory=list)

    COLUMNS = ("variant", "strategy", "k", "m", "seed", "frechet",
               "frechet_pc", "mmd", "n_condensed", "error")

    def append(self, **kw):
        assert set(kw) == set(self.COLUMNS)
        self.rows.append(kw)

    def ok_rows(self):
        return [r for r in self.rows if not r["error"]]

    def by_variant(self, metric: str = "frechet") -> dict:
        """variant -> (mean, std, count) over successful rows."""
        out: dict[str, list] = {}
        for r in self.ok_rows():
            out.setdefault(r["variant"], []).append(r[metric])
        return {v: (float(np.mean(xs)), float(np.std(xs)), len(xs))
                for v, xs in out.items()}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                enc = dict(r)
                for col in ("frechet", "frechet_pc", "mmd"):
                    enc[col] = repr(r[col])
                w.writerow(enc)

    @classmethod
    def from_csv(cls, path) -> "ComparisonTable":
        table = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                table.append(
                    variant=r["variant"], strategy=r["strategy"],
                    k=None if r["k"] == "" else int(r["k"]),
                    m=int(r["m"]), seed=int(r["seed"]),
                    frechet=float(r["frechet"]),
                    frechet_pc=float(r["frechet_pc"]), mmd=float(r["mmd"]),
                    n_condensed=int(r["n_condensed"]), error=r["error"])
        return table

    def export_plot_data(self, path) -> None:
        """JSON with the interval k-curve and per-variant aggregates."""
        agg_f = self.by_variant("frechet")
        agg_m = self.by_variant("mmd")
        curve = sorted((int(v.split("interval-k")[1]), s[0])
                       for v, s in agg_f.items() if v.startswith("interval-k"))
        payload = {
            "k_curve": {"k": [c[0] for c in curve],
                        "frechet_mean": [c[1] for c in curve]},
            "variants": {v: {"frechet_mean": agg_f[v][0],
                             "frechet_std": agg_f[v][1],
                             "mmd_mean": agg_m[v][0],
                             "seeds": agg_f[v][2]} for v in agg_f},
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True, indent=1)


def _dataset_key(ds) -> str:
    meta = f"{ds.kind}|{ds.seed}|{ds.class_count}|{ds.difficulty_factor}"
    return fingerprint_hex(ds.samples.tobytes() + ds.labels.tobytes()
                           + meta.encode())


def _cfg_key(**parts) -> str:
    return fingerprint_hex(manifest_bytes(
        {k: repr(v) for k, v in parts.items()}))


def run_comparison(dataset, cfg: ComparisonConfig):
    """Sweep selection variants; returns (ComparisonTable, CacheStats).

    Per seed: parity-split the dataset, train/score one reference model on
    the train half (cached), then per variant select, attach, train a
    condensed flow model, sample, and compare against the held-out half.
    """
    train_split, held = split_train_heldout(dataset)
    table = ComparisonTable()
    stats = CacheStats()
    cache = cfg.cache_dir
    if cache:
        os.makedirs(cache, exist_ok=True)
    ds_key = _dataset_key(dataset)
    C, D = dataset.class_count, dataset.dim
    ref_mcfg = ModelConfig(C=C, D=D, d_model=cfg.d_model, d_text=cfg.d_text,
                           d_feat=cfg.d_feat, B=cfg.B, h=cfg.h, ell=cfg.ell,
                           prediction_kind="epsilon")
    cond_mcfg = replace(ref_mcfg, prediction_kind="velocity")
    vp = make_schedule("vp-continuous")
    flow = make_schedule("linear-flow")

    for seed in cfg.seeds:
        ref_key = _cfg_key(stage="reference", ds=ds_key, seed=seed,
                           model=ref_mcfg, train=cfg.ref_train, sched=vp.kind)
        ref_path = cache and os.path.join(cache, f"ref-{ref_key}.d2cm")
        if ref_path and os.path.exists(ref_path):
            ref = load_model(ref_path)
            stats.ref_hits += 1
        else:
            ref = DenoiserModel(ref_mcfg, seed=seed)
            train_reference(ref, vp, train_split,
                            replace(cfg.ref_train, seed=seed))
            stats.ref_misses += 1
            if ref_path:
                save_model(ref, ref_path)

        score_key = _cfg_key(stage="scores", ref=ref_key, mc=cfg.mc)
        score_path = cache and os.path.join(cache, f"scores-{score_key}.d2cs")
        if score_path and os.path.exists(score_path):
            scores = read_scores(score_path)
            check_fingerprint(scores, ref)
            stats.score_hits += 1
        else:
            scores = score_dataset(ref, vp, train_split, cfg.mc, text_L=cfg.L)
            stats.score_misses += 1
            if score_path:
                write_scores(scores, score_path)

        for spec in cfg.variants:
            name = variant_name(spec)
            if spec.strategy == "random":
                # vary the draw with the run seed, not just the spec seed
                spec_run = replace(spec, seed=(spec.seed or 0) + 1009 * seed)
            else:
                spec_run = spec
            try:
                sel = select(spec_run, table=scores, dataset=train_split)
                cd = build_condensed(train_split, sel, cfg.attach,
                                     score_table=scores)
                model = DenoiserModel(cond_mcfg, seed=seed)
                res = train(model, flow, cd,
                            replace(cfg.cond_train, seed=seed))
                x, xl = sample_per_class(
                    res.model, flow, [cd.bundles()[c] for c in range(C)],
                    cfg.n_eval_per_class, steps=cfg.sample_steps,
                    cfg_scale=cfg.cfg_scale, seed=31 * seed + 7,
                    p_null_hint=cfg.cond_train.p_null)
                fr = frechet_distance(held.samples, x)
                fr_pc = frechet_per_class(held.samples, held.labels, x, xl)
                mm = mmd_rbf(held.samples, x)
                table.append(variant=name, strategy=spec.strategy, k=spec.k,
                             m=spec.m, seed=seed, frechet=fr,
                             frechet_pc=fr_pc, mmd=mm,
                             n_condensed=cd.n, error="")
            except Exception as e:           # cell failures must not kill the grid
                table.append(variant=name, strategy=spec.strategy, k=spec.k,
                             m=spec.m, seed=seed, frechet=float("nan"),
                             frechet_pc=float("nan"), mmd=float("nan"),
                             n_condensed=0,
                             error=f"{type(e).__name__}: {e}")
    return table, stats
