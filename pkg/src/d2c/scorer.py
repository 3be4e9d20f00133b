"""Per-sample diffusion difficulty: the Monte-Carlo expected denoising loss
under a reference model.

Score = mean over a stratified t-grid (stratum midpoints) and seeded noise
draws of ||ε − ε̂||². Low score = easy/clean sample, high = hard/cluttered.

Determinism contract: each sample's RNG derives from (base_seed,
sample_index) alone and all of a sample's perturbations are evaluated in one
deterministically-ordered batched forward, so results are independent of
worker count, iteration order, and batching of *other* samples.
"""
from __future__ import annotations

import csv
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attacher import class_bundles
from .io_common import (
    BadMagicError, ByteReader, ChecksumError, UnsupportedVersionError,
    blake2b8, pack_u32, pack_u64,
)
from .model import ConditionBundle, DenoiserModel, model_fingerprint
from .schedule import NoiseSchedule, alpha_sigma

SCORES_MAGIC = b"D2CS"
SCORES_VERSION = 1


@dataclass(frozen=True)
class MCConfig:
    S_t: int = 8        # t strata (midpoints of [0,1] subintervals)
    S_eps: int = 4      # noise draws per stratum
    base_seed: int = 0

    def __post_init__(self):
        if self.S_t < 1 or self.S_eps < 1:
            raise ValueError("MC config needs S_t >= 1 and S_eps >= 1")


@dataclass(frozen=True)
class ScoreTable:
    scores: np.ndarray           # (n,) float64, >= 0
    indices: np.ndarray          # (n,) int64 global sample indices
    labels: np.ndarray           # (n,) int64
    mc: MCConfig
    model_fingerprint: str       # blake2b-64 hex of the reference checkpoint

    def __post_init__(self):
        if not (len(self.scores) == len(self.indices) == len(self.labels)):
            raise ValueError("score table columns disagree in length")
        if np.any(~np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise ValueError("scores must be finite and >= 0")


def _grid_times(sched: NoiseSchedule, S_t: int):
    """(t used by alpha_sigma, normalized t for the time embedding)."""
    mids = (np.arange(S_t) + 0.5) / S_t
    if sched.kind == "ddpm-discrete":
        ti = np.clip(np.floor(mids * sched.T).astype(int) + 1, 1, sched.T)
        return ti, ti / sched.T
    return mids, mids


def score_sample(model: DenoiserModel, sched: NoiseSchedule, x, y: int,
                 bundle: ConditionBundle, mc: MCConfig,
                 sample_index: int = 0) -> float:
    """Difficulty of one sample: MC average of the denoising loss.

    All S_t·S_ε perturbations are evaluated in a single stratum-major batch;
    the per-sample rng is seeded by (base_seed, sample_index).
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64).reshape(-1)
    rng = np.random.default_rng([mc.base_seed, sample_index])
    t_sched, t_embed = _grid_times(sched, mc.S_t)
    a, s = alpha_sigma(sched, t_sched)
    eps = rng.standard_normal((mc.S_t, mc.S_eps, x.shape[0]))
    x_t = a[:, None, None] * x + s[:, None, None] * eps
    flat = x_t.reshape(mc.S_t * mc.S_eps, -1).astype(np.float32)
    t_rows = np.repeat(t_embed, mc.S_eps)
    cond = model.fuse_conditions(bundle)
    pred, _ = model.forward(flat, t_rows, cond)
    eps_hat = _to_epsilon(model, sched, pred.data, flat, t_rows)
    err = eps.reshape(mc.S_t * mc.S_eps, -1) - eps_hat
    loss = float((err * err).sum(axis=1).mean())
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite denoising loss for sample "
                                 f"{sample_index}")
    return loss


def _to_epsilon(model, sched, pred, x_t, t_rows):
    """Convert the model's prediction to ε̂ for the squared-error score."""
    if model.cfg.prediction_kind == "epsilon":
        return np.asarray(pred, dtype=np.float64)
    if sched.kind != "linear-flow":
        raise ValueError("velocity prediction scores only under linear-flow "
                         "(v = ε − x₀ is tied to the linear path)")
    # on the linear path: eps = x_t + (1 - t) * v
    return np.asarray(x_t, dtype=np.float64) + \
        (1.0 - t_rows)[:, None] * np.asarray(pred, dtype=np.float64)


def _worker_count(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("D2C_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def score_dataset(model: DenoiserModel, sched: NoiseSchedule, dataset,
                  mc: MCConfig, bundles=None, threads=None,
                  text_L: int = 8, text_seed: int = 0) -> ScoreTable:
    """Score every sample; per-sample seeds make the result independent of
    worker count and iteration order.

    ``bundles``: per-class ConditionBundle list; derived from the dataset's
    class names with the attach text encoder when omitted.
    """
    if bundles is None:
        if dataset.class_names is None:
            raise ValueError("dataset has no class name table; pass bundles")
        bundles = class_bundles(dataset.class_names, d_text=model.cfg.d_text,
                                L=text_L, seed=text_seed)
    n = dataset.n
    labels = np.asarray(dataset.labels, dtype=np.int64)
    scores = np.empty(n, dtype=np.float64)

    def work(i: int) -> None:
        try:
            scores[i] = score_sample(model, sched, dataset.samples[i],
                                     int(labels[i]), bundles[labels[i]], mc,
                                     sample_index=i)
        except Exception as e:
            raise type(e)(f"sample {i}: {e}") from e

    workers = _worker_count(threads)
    if workers == 1:
        for i in range(n):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, range(n)))
    return ScoreTable(scores=scores, indices=np.arange(n, dtype=np.int64),
                      labels=labels, mc=mc,
                      model_fingerprint=model_fingerprint(model))


def check_fingerprint(table: ScoreTable, model: DenoiserModel) -> bool:
    """Warn (and return False) when a table was produced by different weights."""
    ok = table.model_fingerprint == model_fingerprint(model)
    if not ok:
        warnings.warn(
            f"score table fingerprint {table.model_fingerprint} does not match "
            f"the model ({model_fingerprint(model)}); scores may be stale",
            stacklevel=2)
    return ok


# ---------------------------------------------------------------- file format

def serialize_scores(table: ScoreTable) -> bytes:
    out = bytearray()
    out += SCORES_MAGIC
    out += pack_u32(SCORES_VERSION)
    out += pack_u32(len(table.scores))
    out += pack_u32(table.mc.S_t)
    out += pack_u32(table.mc.S_eps)
    out += pack_u64(table.mc.base_seed)
    out += bytes.fromhex(table.model_fingerprint).ljust(8, b"\x00")
    rec = np.empty(len(table.scores),
                   dtype=[("idx", "<u4"), ("label", "<u4"), ("score", "<f8")])
    rec["idx"] = table.indices
    rec["label"] = table.labels
    rec["score"] = table.scores
    out += rec.tobytes()
    out += blake2b8(bytes(out))
    return bytes(out)


def write_scores(table: ScoreTable, path) -> bytes:
    data = serialize_scores(table)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_scores(path) -> ScoreTable:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or not data.startswith(SCORES_MAGIC):
        raise BadMagicError(f"{path}: magic {data[:4]!r} != {SCORES_MAGIC!r}")
    if len(data) < 12:
        raise ChecksumError(f"{path}: too short for a checksum footer")
    if blake2b8(data[:-8]) != data[-8:]:
        raise ChecksumError(f"{path}: score table checksum mismatch")
    r = ByteReader(data[:-8], label=str(path))
    r.take(4)
    version = r.u32()
    if version != SCORES_VERSION:
        raise UnsupportedVersionError(
            f"{path}: score format version {version} unsupported")
    n = r.u32()
    s_t = r.u32()
    s_eps = r.u32()
    base_seed = r.u64()
    fp = r.take(8).hex()
    rec = np.frombuffer(r.take(16 * n),
                        dtype=[("idx", "<u4"), ("label", "<u4"), ("score", "<f8")])
    r.expect_end()
    return ScoreTable(scores=rec["score"].astype(np.float64),
                      indices=rec["idx"].astype(np.int64),
                      labels=rec["label"].astype(np.int64),
                      mc=MCConfig(S_t=s_t, S_eps=s_eps, base_seed=base_seed),
                      model_fingerprint=fp)


def scores_to_csv(table: ScoreTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "score"])
        for i, l, s in zip(table.indices, table.labels, table.scores):
            w.writerow([int(i), int(l), repr(float(s))])
