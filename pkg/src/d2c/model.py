"""Conditional denoiser: residual MLP backbone with adaptive scale/shift
modulation, dual-conditional embedding fusion (convolved text tokens +
learnable class embedding), and the feature-projection head used by the
alignment loss.

Zero-initialization contract: the modulation projections, the output head,
and the fusion MLP's output layer all start at zero, so a fresh model is the
identity in its modulation, predicts the zero vector, and fuses conditions to
exactly pooled-text + class-embedding. Several tests and the step-0 ablation
identities lean on this.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io_common import (
    BadMagicError, ByteReader, ChecksumError, UnsupportedVersionError,
    blake2b8, pack_u32,
)
from .tensorcore import (
    Tensor, add, conv1d_same, gather_rows, matmul, mul, reshape, silu,
    stack_rows, tmean, tsum, scale as tscale,
)

MODEL_MAGIC = b"D2CM"
MODEL_VERSION = 1
PREDICTION_KINDS = ("epsilon", "velocity")
_TIME_FREQS = 8  # sinusoidal features: sin/cos at pi * 2^i, i < _TIME_FREQS


@dataclass(frozen=True)
class ModelConfig:
    C: int                      # classes
    D: int                      # flat sample dimension
    d_model: int = 16           # condition/embedding width
    d_text: int = 32            # surrogate text-token dimension
    d_feat: int = 16            # visual-token dimension (phi output)
    B: int = 3                  # residual blocks
    h: int = 4                  # feature tokens at the alignment layer
    ell: int = 2                # alignment layer index, 1-based in [1, B]
    prediction_kind: str = "epsilon"

    def __post_init__(self):
        if self.prediction_kind not in PREDICTION_KINDS:
            raise ValueError(f"prediction_kind must be one of {PREDICTION_KINDS}")
        if not 1 <= self.ell <= self.B:
            raise ValueError(f"alignment layer {self.ell} outside [1, {self.B}]")
        for name in ("C", "D", "d_model", "d_text", "d_feat", "B", "h"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def width(self) -> int:
        # hidden width is h * d_model so the alignment layer reshapes into
        # exactly h tokens of width d_model
        return self.h * self.d_model


@dataclass
class ConditionBundle:
    y: int
    tokens: np.ndarray          # (L, d_text) float
    mask: np.ndarray            # (L,) bool
    null: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.ndim != 2 or self.mask.shape != (self.tokens.shape[0],):
            raise ValueError(
                f"mask length {self.mask.shape} does not match tokens "
                f"{self.tokens.shape}")


def null_bundle(L: int, d_text: int) -> ConditionBundle:
    return ConditionBundle(y=0, tokens=np.zeros((L, d_text), dtype=np.float32),
                           mask=np.ones(L, dtype=bool), null=True)


def _param_decls(cfg: ModelConfig):
    """(name, shape, init) triples in declaration order — also the
    serialization order of the checkpoint format."""
    W, dm = cfg.width, cfg.d_model
    decls = [("in_w", (cfg.D, W), "fan"), ("in_b", (W,), "zero")]
    for i in range(1, cfg.B + 1):
        decls += [
            (f"blk{i}_mod_scale_w", (dm, W), "zero"),
            (f"blk{i}_mod_scale_b", (W,), "zero"),
            (f"blk{i}_mod_shift_w", (dm, W), "zero"),
            (f"blk{i}_mod_shift_b", (W,), "zero"),
            (f"blk{i}_w1", (W, W), "fan"),
            (f"blk{i}_b1", (W,), "zero"),
            (f"blk{i}_w2", (W, W), "fan"),
            (f"blk{i}_b2", (W,), "zero"),
        ]
    decls += [
        ("out_w", (W, cfg.D), "zero"),
        ("out_b", (cfg.D,), "zero"),
        ("time_w1", (2 * _TIME_FREQS, dm), "fan"),
        ("time_b1", (dm,), "zero"),
        ("time_w2", (dm, dm), "fan"),
        ("time_b2", (dm,), "zero"),
        ("e_c", (cfg.C, dm), "embed"),
        ("fuse_conv_w", (3, cfg.d_text, dm), "fan"),
        ("fuse_conv_b", (dm,), "zero"),
        ("fuse_w1", (dm, dm), "fan"),
        ("fuse_b1", (dm,), "zero"),
        ("fuse_w2", (dm, dm), "zero"),
        ("fuse_b2", (dm,), "zero"),
        ("null_embed", (dm,), "embed"),
        ("phi_w1", (dm, dm), "fan"),
        ("phi_b1", (dm,), "zero"),
        ("phi_w2", (dm, cfg.d_feat), "fan"),
        ("phi_b2", (cfg.d_feat,), "zero"),
        ("phi_skip", (dm, cfg.d_feat), "fan"),
    ]
    return decls


class DenoiserModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params=None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        for name, shape, init in _param_decls(cfg):
            if params is not None:
                data = params[name]
                if data.shape != shape:
                    raise ValueError(f"parameter {name} has shape {data.shape}, "
                                     f"expected {shape}")
            elif init == "zero":
                data = np.zeros(shape)
            elif init == "embed":
                data = rng.standard_normal(shape) / np.sqrt(cfg.d_model)
            else:  # fan-in scaled
                data = rng.standard_normal(shape) / np.sqrt(shape[0])
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------ condition

    def fuse_conditions(self, bundle: ConditionBundle, use_text: bool = True,
                        use_class: bool = True) -> Tensor:
        """Fuse one bundle into a (d_model,) condition vector.

        Text path: zero masked token rows, 1-D convolve (kernel 3, same
        padding), mean-pool over unmasked positions, then a residual MLP.
        The class embedding adds on top; a null bundle short-circuits to the
        learned null embedding (ignoring tokens, mask, and label).
        """
        if bundle.null:
            return self.params["null_embed"]
        if not (0 <= bundle.y < self.cfg.C):
            raise ValueError(f"class label {bundle.y} outside [0, {self.cfg.C})")
        if not use_text and not use_class:
            raise ValueError("at least one condition branch must stay enabled")
        parts = []
        if use_text:
            if not bundle.mask.any():
                raise ValueError("empty prompt: mask has no true positions")
            if bundle.tokens.shape[1] != self.cfg.d_text:
                raise ValueError(
                    f"token dim {bundle.tokens.shape[1]} != d_text {self.cfg.d_text}")
            toks = Tensor(bundle.tokens)
            mcol = Tensor(bundle.mask.astype(bundle.tokens.dtype)[:, None])
            conv = conv1d_same(mul(toks, mcol),
                               self.params["fuse_conv_w"], self.params["fuse_conv_b"])
            pooled = tscale(tsum(mul(conv, mcol), axis=0),
                            1.0 / float(bundle.mask.sum()))
            row = reshape(pooled, (1, self.cfg.d_model))
            hid = silu(add(matmul(row, self.params["fuse_w1"]), self.params["fuse_b1"]))
            mlp = add(matmul(hid, self.params["fuse_w2"]), self.params["fuse_b2"])
            parts.append(add(reshape(mlp, (self.cfg.d_model,)), pooled))
        if use_class:
            erow = gather_rows(self.params["e_c"], np.array([bundle.y]))
            parts.append(reshape(erow, (self.cfg.d_model,)))
        out = parts[0]
        for p in parts[1:]:
            out = add(out, p)
        return out

    def condition_table(self, bundles, use_text: bool = True,
                        use_class: bool = True) -> Tensor:
        """Stack fused conditions for each bundle plus a final null row.

        Row i is bundles[i]; row len(bundles) is the null embedding, so
        per-item condition dropout is a gather index swap.
        """
        rows = [self.fuse_conditions(b, use_text=use_text, use_class=use_class)
                for b in bundles]
        rows.append(self.params["null_embed"])
        return stack_rows(rows)

    # -------------------------------------------------------------- forward

    def _time_features(self, t, dtype) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        freqs = np.pi * (2.0 ** np.arange(_TIME_FREQS))
        ang = t * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)

    def forward(self, x_t, t, cond: Tensor):
        """Denoise a batch: returns (prediction (n, D), features (n, h, d_model)).

        ``t`` is the normalized time in [0, 1] (callers divide by T for the
        discrete chain); ``cond`` is (n, d_model) fused conditions or a
        single (d_model,) vector broadcast over the batch. 1-D ``x_t`` is
        treated as a singleton batch and squeezed on return.
        """
        cfg = self.cfg
        xd = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
        single = xd.ndim == 1
        if single:
            xd = xd[None, :]
        n = xd.shape[0]
        if xd.shape[1] != cfg.D:
            raise ValueError(f"x_t dimension {xd.shape[1]} != D={cfg.D}")
        x = x_t if isinstance(x_t, Tensor) and not single else Tensor(xd)
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))

        tf = Tensor(self._time_features(t_arr, xd.dtype))
        temb = add(matmul(silu(add(matmul(tf, self["time_w1"]), self["time_b1"])),
                          self["time_w2"]), self["time_b2"])
        if cond.ndim == 1:
            cond = reshape(cond, (1, cfg.d_model))
            if n > 1:
                cond = add(cond, Tensor(np.zeros((n, cfg.d_model), dtype=xd.dtype)))
        c = add(temb, cond)

        hcur = add(matmul(x, self["in_w"]), self["in_b"])
        feats = None
        for i in range(1, cfg.B + 1):
            sc = add(matmul(c, self[f"blk{i}_mod_scale_w"]), self[f"blk{i}_mod_scale_b"])
            sh = add(matmul(c, self[f"blk{i}_mod_shift_w"]), self[f"blk{i}_mod_shift_b"])
            u = add(add(hcur, mul(hcur, sc)), sh)
            v = add(matmul(silu(add(matmul(u, self[f"blk{i}_w1"]), self[f"blk{i}_b1"])),
                           self[f"blk{i}_w2"]), self[f"blk{i}_b2"])
            hcur = add(hcur, v)
            if i == cfg.ell:
                feats = reshape(hcur, (n, cfg.h, cfg.d_model))
        pred = add(matmul(hcur, self["out_w"]), self["out_b"])
        if single:
            pred = reshape(pred, (cfg.D,))
            feats = reshape(feats, (cfg.h, cfg.d_model))
        return pred, feats

    def project_features(self, features: Tensor) -> Tensor:
        """Map alignment-layer tokens through phi -> (..., h, d_feat).

        Rows are not normalized here; the cosine in the loss does that.
        """
        shape = features.shape
        if shape[-1] != self.cfg.d_model:
            raise ValueError(f"feature width {shape[-1]} != d_model")
        flat = reshape(features, (-1, self.cfg.d_model)) if features.ndim != 2 \
            else features
        hid = silu(add(matmul(flat, self["phi_w1"]), self["phi_b1"]))
        out = add(add(matmul(hid, self["phi_w2"]), self["phi_b2"]),
                  matmul(flat, self["phi_skip"]))
        if features.ndim != 2:
            out = reshape(out, shape[:-1] + (self.cfg.d_feat,))
        return out


# ---------------------------------------------------------------- checkpoint

def serialize_model(model: DenoiserModel) -> bytes:
    cfg = model.cfg
    out = bytearray()
    out += MODEL_MAGIC
    out += pack_u32(MODEL_VERSION)
    out += bytes([PREDICTION_KINDS.index(cfg.prediction_kind)])
    for v in (cfg.C, cfg.D, cfg.d_model, cfg.d_text, cfg.d_feat, cfg.B,
              cfg.h, cfg.ell):
        out += pack_u32(v)
    for name, _, _ in _param_decls(cfg):
        out += np.ascontiguousarray(
            model.params[name].data.astype("<f4", copy=False)).tobytes()
    out += blake2b8(bytes(out))
    return bytes(out)


def save_model(model: DenoiserModel, path) -> bytes:
    data = serialize_model(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def model_fingerprint(model: DenoiserModel) -> str:
    return blake2b8(serialize_model(model)).hex()


def load_model(path) -> DenoiserModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8 or not data.startswith(MODEL_MAGIC):
        raise BadMagicError(f"{path}: not a model checkpoint "
                            f"(magic {data[:4]!r} != {MODEL_MAGIC!r})")
    if blake2b8(data[:-8]) != data[-8:]:
        raise ChecksumError(f"{path}: checkpoint checksum mismatch")
    r = ByteReader(data[:-8], label=str(path))
    r.take(4)
    version = r.u32()
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(
            f"{path}: checkpoint version {version} unsupported (have {MODEL_VERSION})")
    kind = PREDICTION_KINDS[r.u8()]
    C, D, dm, dt, df, B, h, ell = (r.u32() for _ in range(8))
    cfg = ModelConfig(C=C, D=D, d_model=dm, d_text=dt, d_feat=df, B=B, h=h,
                      ell=ell, prediction_kind=kind)
    params = {}
    for name, shape, _ in _param_decls(cfg):
        count = int(np.prod(shape))
        blob = r.take(4 * count)
        params[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(
            np.float32)
    r.expect_end()
    return DenoiserModel(cfg, params=params)
