"""Attach phase: deterministic surrogate encoders and the enriched condensed
dataset container.

The "encoders" are seeded hash constructions, not learned models: a text
token's vector depends only on (seed, word), and visual tokens are fixed
random projections of contiguous sample patches. That keeps the artifact
hermetic and bitwise reproducible across machines while exercising the same
data paths a real encoder pair would.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .datagen import LabeledDataset
from .io_common import read_container, write_container
from .model import ConditionBundle
from .selector import SelectionResult

CONDENSED_MAGIC = b"D2CD"
CONDENSED_VERSION = 1

# dimension profile of the production-scale counterpart; desk scale runs the
# defaults below, these are context only and unused by any code path
FULL_SCALE = {"L": 16, "d_text": 2048, "h": 256, "d_feat": 768}


@dataclass(frozen=True)
class AttachConfig:
    L: int = 8
    d_text: int = 32
    d_feat: int = 16
    h: int = 4
    text_seed: int = 0
    visual_seed: int = 0


@dataclass(frozen=True)
class TextEmbedding:
    class_id: int
    prompt: str
    tokens: np.ndarray    # (L, d_text) float32; padding rows are zero
    mask: np.ndarray      # (L,) bool; True exactly on real tokens


@dataclass(frozen=True)
class VisualTokens:
    sample_id: int
    tokens: np.ndarray    # (h, d_feat) float32, rows unit-normalized


def _token_vector(word: str, d_text: int, seed: int) -> np.ndarray:
    key = int.from_bytes(
        hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")
    rng = np.random.default_rng([seed, key])
    v = rng.standard_normal(d_text)          # float64 accumulation
    return (v / np.linalg.norm(v)).astype(np.float32)


def text_encode(class_name: str, d_text: int = 32, L: int = 8,
                seed: int = 0, class_id: int = 0) -> TextEmbedding:
    """Encode the fixed prompt for one class.

    Whitespace tokenization of "a photo of a {class_name}"; each word maps to
    a unit vector seeded by (seed, blake2b(word)). Prompts longer than L
    raise — silent truncation would corrupt conditioning.
    """
    if not class_name or not class_name.strip():
        raise ValueError("class name must be non-empty")
    prompt = f"a photo of a {class_name}"
    words = prompt.split()
    if len(words) > L:
        raise ValueError(
            f"prompt has {len(words)} tokens, exceeding L={L}: {prompt!r}")
    tokens = np.zeros((L, d_text), dtype=np.float32)
    mask = np.zeros(L, dtype=bool)
    for i, w in enumerate(words):
        tokens[i] = _token_vector(w, d_text, seed)
        mask[i] = True
    return TextEmbedding(class_id=class_id, prompt=prompt, tokens=tokens,
                         mask=mask)


class VisualEncoder:
    """Fixed random patch projection shared across samples."""

    def __init__(self, D: int, h: int, d_feat: int, seed: int = 0):
        if D % h != 0:
            raise ValueError(f"sample dimension {D} not divisible by h={h} patches")
        self.D, self.h, self.d_feat = D, h, d_feat
        self.patch = D // h
        rng = np.random.default_rng([seed, self.patch, d_feat])
        self.proj = rng.standard_normal((self.patch, d_feat))

    def encode(self, x: np.ndarray, sample_id: int = 0) -> VisualTokens:
        x = np.asarray(getattr(x, "data", x), dtype=np.float64).reshape(-1)
        if x.shape[0] != self.D:
            raise ValueError(f"sample dimension {x.shape[0]} != {self.D}")
        patches = x.reshape(self.h, self.patch)
        raw = patches @ self.proj
        norms = np.linalg.norm(raw, axis=1)
        tokens = np.empty_like(raw)
        for i in range(self.h):
            if norms[i] == 0.0:
                # degenerate all-zero patch: fall back to the first basis vector
                tokens[i] = 0.0
                tokens[i, 0] = 1.0
            else:
                tokens[i] = raw[i] / norms[i]
        return VisualTokens(sample_id=sample_id, tokens=tokens.astype(np.float32))


def visual_encode(x, h: int, d_feat: int, seed: int = 0,
                  sample_id: int = 0) -> VisualTokens:
    x = np.asarray(getattr(x, "data", x)).reshape(-1)
    return VisualEncoder(x.shape[0], h, d_feat, seed).encode(x, sample_id)


def class_bundles(class_names, d_text: int, L: int, seed: int) -> list[ConditionBundle]:
    """One fused-condition input per class, in class-id order."""
    out = []
    for cid, name in enumerate(class_names):
        te = text_encode(name, d_text=d_text, L=L, seed=seed, class_id=cid)
        out.append(ConditionBundle(y=cid, tokens=te.tokens, mask=te.mask))
    return out


@dataclass(frozen=True)
class CondensedDataset:
    samples: np.ndarray           # (M, D) float32, class-major then rank order
    labels: np.ndarray            # (M,) int64
    class_ids: list[int]          # ascending classes present
    class_names: list[str]        # aligned with class_ids
    text: dict[int, TextEmbedding]
    visual: np.ndarray            # (M, h, d_feat) float32
    config: AttachConfig
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def bundles(self) -> dict[int, ConditionBundle]:
        return {cid: ConditionBundle(y=cid, tokens=te.tokens, mask=te.mask)
                for cid, te in self.text.items()}


def build_condensed(dataset: LabeledDataset, selection: SelectionResult,
                    cfg: AttachConfig, score_table=None) -> CondensedDataset:
    """Assemble selected samples with their class text embeddings and
    per-sample visual tokens; ordering is class-major then selection rank."""
    if dataset.class_names is None:
        raise ValueError("dataset has no class name table; cannot build prompts")
    enc = VisualEncoder(dataset.dim, cfg.h, cfg.d_feat, seed=cfg.visual_seed)
    class_ids = sorted(selection.per_class)
    rows, labels, vis = [], [], []
    text = {}
    stats = {}
    for cid in class_ids:
        te = text_encode(dataset.class_names[cid], d_text=cfg.d_text, L=cfg.L,
                         seed=cfg.text_seed, class_id=cid)
        text[cid] = te
        idx = selection.per_class[cid]
        for gi in idx:
            rows.append(dataset.samples[gi])
            labels.append(cid)
            vis.append(enc.encode(dataset.samples[gi], sample_id=int(gi)).tokens)
        if score_table is not None:
            s = score_table.scores[idx]
            stats[str(cid)] = {"min": float(s.min()), "mean": float(s.mean()),
                               "max": float(s.max())}
    provenance = {
        "selection": selection.spec_dict(),
        "score_stats": stats,
        "scorer_fingerprint":
            score_table.model_fingerprint if score_table is not None else "",
        "selected_indices": {str(c): [int(i) for i in selection.per_class[c]]
                             for c in class_ids},
    }
    return CondensedDataset(
        samples=np.array(rows, dtype=np.float32),
        labels=np.array(labels, dtype=np.int64),
        class_ids=class_ids,
        class_names=[dataset.class_names[c] for c in class_ids],
        text=text,
        visual=np.array(vis, dtype=np.float32),
        config=cfg,
        provenance=provenance,
    )


def write_condensed(ds: CondensedDataset, path) -> bytes:
    cfg = ds.config
    manifest = {
        "profile": "condensed",
        "labels": [int(v) for v in ds.labels],
        "class_ids": [int(c) for c in ds.class_ids],
        "class_names": ds.class_names,
        "prompts": [ds.text[c].prompt for c in ds.class_ids],
        "masks": [[bool(b) for b in ds.text[c].mask] for c in ds.class_ids],
        "attach": {"L": cfg.L, "d_text": cfg.d_text, "d_feat": cfg.d_feat,
                   "h": cfg.h, "text_seed": cfg.text_seed,
                   "visual_seed": cfg.visual_seed},
        "provenance": ds.provenance,
    }
    text_block = np.stack([ds.text[c].tokens for c in ds.class_ids])
    sections = {
        "samples": ds.samples.astype(np.float32),
        "text_tokens": text_block.astype(np.float32),
        "visual_tokens": ds.visual.astype(np.float32),
    }
    return write_container(path, CONDENSED_MAGIC, CONDENSED_VERSION, manifest,
                           sections)


def read_condensed(path) -> CondensedDataset:
    _, manifest, arrays = read_container(path, CONDENSED_MAGIC, CONDENSED_VERSION)
    if manifest.get("profile") != "condensed":
        raise ValueError(f"{path}: not a condensed-profile container "
                         f"(profile={manifest.get('profile')!r})")
    a = manifest["attach"]
    cfg = AttachConfig(L=a["L"], d_text=a["d_text"], d_feat=a["d_feat"],
                       h=a["h"], text_seed=a["text_seed"],
                       visual_seed=a["visual_seed"])
    class_ids = [int(c) for c in manifest["class_ids"]]
    text = {}
    for i, cid in enumerate(class_ids):
        text[cid] = TextEmbedding(
            class_id=cid,
            prompt=manifest["prompts"][i],
            tokens=arrays["text_tokens"][i],
            mask=np.asarray(manifest["masks"][i], dtype=bool),
        )
    return CondensedDataset(
        samples=arrays["samples"],
        labels=np.asarray(manifest["labels"], dtype=np.int64),
        class_ids=class_ids,
        class_names=list(manifest["class_names"]),
        text=text,
        visual=arrays["visual_tokens"],
        config=cfg,
        provenance=manifest.get("provenance", {}),
    )
