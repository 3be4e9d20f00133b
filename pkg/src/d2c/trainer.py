"""Denoiser training and sampling.

The training objective is

    L_total = L_diff + lambda * L_proj

where L_diff is the mean per-sample squared denoising error and L_proj is the
negative mean cosine between projected alignment features and the attached
visual tokens. Reference models (full datasets, no visual tokens) train with
the diffusion term alone.

One rng drives the whole loop in a fixed draw order (batch, t strata, noise,
condition dropout), so runs with different loss ablations see identical
batches and are directly comparable.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .attacher import class_bundles
from .model import ConditionBundle, DenoiserModel
from .schedule import NoiseSchedule, alpha_sigma, ddpm_reverse_step, \
    euler_flow_step
from .tensorcore import (
    AdamState, Tape, Tensor, add, gather_rows, mul, reshape, row_cosine,
    scale, sub, tmean, tsum,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_proj: float = 0.5
    p_null: float = 0.1          # condition-dropout probability
    seed: int = 0
    ema_decay: float = 0.0       # 0: track current weights; 1: keep initial
    use_text: bool = True        # ablation: text branch of the fused condition
    use_class: bool = True       # ablation: class-embedding branch
    use_proj: bool = True        # alignment loss (needs visual tokens)
    log_every: int = 10

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.p_null <= 1.0:
            raise ValueError(f"p_null must be in [0, 1], got {self.p_null}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError(f"ema_decay must be in [0, 1], got {self.ema_decay}")
        if self.lambda_proj < 0.0:
            raise ValueError(f"lambda_proj must be >= 0, got {self.lambda_proj}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("step", "L_diff", "L_proj", "L_total", "grad_norm")

    def append(self, step, l_diff, l_proj, l_total, grad_norm):
        self.rows.append({"step": int(step), "L_diff": float(l_diff),
                          "L_proj": float(l_proj), "L_total": float(l_total),
                          "grad_norm": float(grad_norm)})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (r[k] if k == "step" else repr(r[k]))
                            for k in self.COLUMNS})

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.append(r["step"], r["L_diff"], r["L_proj"], r["L_total"],
                           r["grad_norm"])
        return log


@dataclass
class TrainResult:
    model: DenoiserModel
    ema: DenoiserModel
    log: TrainLog
    config: TrainConfig


def bundles_for_data(data, model: DenoiserModel, text_seed: int = 0,
                     L: int = 8) -> list[ConditionBundle]:
    """Per-class condition bundles aligned with class ids 0..C-1."""
    by_id = getattr(data, "bundles", None)
    if callable(by_id):                      # condensed: stored token blocks
        table = by_id()
        missing = [c for c in range(model.cfg.C) if c not in table]
        if missing:
            raise ValueError(f"condensed data lacks classes {missing} needed "
                             f"by the model")
        return [table[c] for c in range(model.cfg.C)]
    if data.class_names is None:
        raise ValueError("dataset has no class name table")
    return class_bundles(data.class_names, d_text=model.cfg.d_text, L=L,
                         seed=text_seed)


class _BatchSampler:
    """Without-replacement batches; reshuffles when an epoch is exhausted."""

    def __init__(self, n: int, batch_size: int, rng):
        self.n = n
        self.bs = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.bs]
        self.pos += self.bs
        return out


def _latin_t(rng, n: int) -> np.ndarray:
    """Stratified t draw: one uniform point per 1/n stratum, shuffled."""
    strata = rng.permutation(n)
    return (strata + rng.uniform(size=n)) / n


def train(model: DenoiserModel, sched: NoiseSchedule, data,
          cfg: TrainConfig, bundles=None) -> TrainResult:
    """Optimize the denoiser on ``data`` (full or condensed)."""
    if bundles is None:
        bundles = bundles_for_data(data, model)
    visual = getattr(data, "visual", None)
    if cfg.use_proj and visual is None:
        raise ValueError("alignment loss needs attached visual tokens; "
                         "train with use_proj=False on raw datasets")
    X = np.asarray(data.samples, dtype=np.float32)
    labels = np.asarray(data.labels, dtype=np.int64)
    n, D = X.shape
    if D != model.cfg.D:
        raise ValueError(f"data dimension {D} != model D={model.cfg.D}")
    if labels.max(initial=0) >= model.cfg.C:
        raise ValueError("label outside the model's class range")

    rng = np.random.default_rng(cfg.seed)
    batches = _BatchSampler(n, cfg.batch_size, rng)
    params = model.parameters()
    opt = AdamState(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                    eps=cfg.adam_eps)
    ema = {k: p.data.copy() for k, p in model.params.items()}
    log = TrainLog()

    for step in range(cfg.steps):
        batch = batches.next()
        bs = len(batch)
        # fixed draw order keeps batches identical across loss ablations
        t = _latin_t(rng, bs)
        eps = rng.standard_normal((bs, D))
        drop = rng.uniform(size=bs) < cfg.p_null

        if sched.kind == "ddpm-discrete":
            t_sched = np.clip(np.floor(t * sched.T).astype(int) + 1,
                              1, sched.T)
            t_embed = t_sched / sched.T
        else:
            t_sched = t
            t_embed = t
        a, s = alpha_sigma(sched, t_sched)
        x0 = X[batch].astype(np.float64)
        x_t = (a[:, None] * x0 + s[:, None] * eps).astype(np.float32)
        if model.cfg.prediction_kind == "velocity":
            target = (eps - x0).astype(np.float32)
        else:
            target = eps.astype(np.float32)
        ids = labels[batch].copy()
        ids[drop] = model.cfg.C              # null row of the condition table

        with Tape() as tape:
            table = model.condition_table(bundles, use_text=cfg.use_text,
                                          use_class=cfg.use_class)
            cond = gather_rows(table, ids)
            pred, feats = model.forward(Tensor(x_t), t_embed, cond)
            diff = sub(pred, Tensor(target))
            l_diff = tmean(tsum(mul(diff, diff), axis=1))
            if cfg.use_proj:
                proj = reshape(model.project_features(feats),
                               (bs * model.cfg.h, model.cfg.d_feat))
                v = Tensor(np.asarray(visual[batch], dtype=np.float32)
                           .reshape(bs * model.cfg.h, model.cfg.d_feat))
                l_proj = scale(tmean(row_cosine(proj, v)), -1.0)
                l_total = add(l_diff, scale(l_proj, cfg.lambda_proj))
            else:
                l_proj = None
                l_total = l_diff
            tape.backward(l_total, params=params)

        gsq = 0.0
        for p in params:
            if p.grad is not None:
                gsq += float((p.grad.astype(np.float64) ** 2).sum())
        grad_norm = float(np.sqrt(gsq))
        ld = float(l_diff.item())
        lp = 0.0 if l_proj is None else float(l_proj.item())
        lt = float(l_total.item())
        if not (np.isfinite(lt) and np.isfinite(grad_norm)):
            raise RuntimeError(
                f"non-finite training state at step {step}: L_diff={ld} "
                f"L_proj={lp} L_total={lt} grad_norm={grad_norm}")
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            log.append(step, ld, lp, lt, grad_norm)

        opt.step()
        opt.zero_grad()
        d = cfg.ema_decay
        for k, p in model.params.items():
            ema[k] = d * ema[k] + (1.0 - d) * p.data

    ema_model = DenoiserModel(model.cfg, params=ema)
    return TrainResult(model=model, ema=ema_model, log=log, config=cfg)


def train_reference(model: DenoiserModel, sched: NoiseSchedule, dataset,
                    cfg: TrainConfig, text_seed: int = 0) -> TrainResult:
    """Train on a full labeled dataset: diffusion loss only."""
    cfg = replace(cfg, use_proj=False)
    bundles = bundles_for_data(dataset, model, text_seed=text_seed)
    return train(model, sched, dataset, cfg, bundles=bundles)


# ------------------------------------------------------------------- sampling

def _guided(model, sched, x, t_embed, cond, cfg_scale):
    pred, _ = model.forward(x, t_embed, cond)
    if cfg_scale == 1.0:
        # exact conditional path: no extrapolation arithmetic at scale 1
        return pred.data
    null = model.params["null_embed"]
    pred_null, _ = model.forward(x, t_embed, null)
    return pred_null.data + cfg_scale * (pred.data - pred_null.data)


def sample(model: DenoiserModel, sched: NoiseSchedule,
           bundle: ConditionBundle, n: int, steps: int = 32,
           cfg_scale: float = 1.0, seed: int = 0,
           p_null_hint: float | None = None) -> np.ndarray:
    """Draw ``n`` samples for one class condition.

    linear-flow schedules integrate the velocity field with Euler steps from
    t=1 to 0; ddpm-discrete schedules run the ancestral reverse chain. The
    vp-continuous schedule is for training and scoring only.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if cfg_scale != 1.0 and not p_null_hint:
        warnings.warn(
            "guidance scale != 1 but the model saw no condition dropout "
            "(p_null unset or 0); the unconditional branch is untrained",
            stacklevel=2)
    rng = np.random.default_rng(seed)
    D = model.cfg.D
    cond = model.fuse_conditions(bundle)

    if sched.kind == "linear-flow":
        if model.cfg.prediction_kind != "velocity":
            raise ValueError("flow sampling needs a velocity-prediction model")
        x = rng.standard_normal((n, D)).astype(np.float32)
        dt = 1.0 / steps
        for k in range(steps):
            t = 1.0 - k * dt
            v = _guided(model, sched, Tensor(x), t, cond, cfg_scale)
            x = euler_flow_step(x, t, v, min(dt, t)).astype(np.float32)
        return x
    if sched.kind == "ddpm-discrete":
        if model.cfg.prediction_kind != "epsilon":
            raise ValueError("ancestral sampling needs an epsilon-prediction "
                             "model")
        x = rng.standard_normal((n, D)).astype(np.float32)
        for t in range(sched.T, 0, -1):
            e = _guided(model, sched, Tensor(x), t / sched.T, cond, cfg_scale)
            x = ddpm_reverse_step(sched, x, t, e, rng).astype(np.float32)
        return x
    raise ValueError(f"schedule kind '{sched.kind}' does not support sampling "
                     f"(use linear-flow or ddpm-discrete)")


def sample_per_class(model: DenoiserModel, sched: NoiseSchedule, bundles,
                     n_per_class: int, steps: int = 32, cfg_scale: float = 1.0,
                     seed: int = 0, p_null_hint=None):
    """Sample every class; returns (samples, labels) with class-major rows."""
    xs, ys = [], []
    for cid, b in enumerate(bundles):
        xs.append(sample(model, sched, b, n_per_class, steps=steps,
                         cfg_scale=cfg_scale, seed=seed + cid,
                         p_null_hint=p_null_hint))
        ys.append(np.full(n_per_class, cid, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)
