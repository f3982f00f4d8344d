"""Local+dilated causal masks, candidate packing, sparse attention, and cost estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import data as D


def allowed(i: int, j: int, k: int, r: int) -> bool:
    """The sparsity predicate for query position ``i`` and key position ``j``."""
    return j <= i and ((i - j) < k or (i - j) % r == 0)


def sparse_causal_mask(L: int, k: int, r: int) -> np.ndarray:
    if L < 1 or k < 1 or r < 1:
        raise ValueError("L, k and r must be >= 1")
    gap = np.arange(L)[:, None] - np.arange(L)[None, :]
    return (gap >= 0) & ((gap < k) | (gap % r == 0))


def extend_mask_for_candidates(base: np.ndarray, m2: int, k: int, r: int) -> np.ndarray:
    """Append ``m2`` mutually isolated candidate rows, each placed at position ``L``."""
    if m2 < 1:
        raise ValueError("m2 must be >= 1")
    L = base.shape[0]
    out = np.zeros((L + m2, L + m2), dtype=bool)
    out[:L, :L] = base
    gap = L - np.arange(L)
    out[L:, :L] = ((gap < k) | (gap % r == 0))[None, :]
    out[np.arange(L, L + m2), np.arange(L, L + m2)] = True
    return out


@lru_cache(maxsize=64)
def structural_mask(L_max: int, m2: int, k: int, r: int) -> np.ndarray:
    base = sparse_causal_mask(L_max, k, r) if L_max else np.zeros((0, 0), bool)
    if m2 == 0:
        return base
    if L_max == 0:
        return np.eye(m2, dtype=bool)
    return extend_mask_for_candidates(base, m2, k, r)


def batch_mask(valid: np.ndarray, L_max: int, m2: int, k: int, r: int) -> np.ndarray:
    """(B, L_tot, L_tot) attention permissions; invalid rows may only see themselves."""
    struct = structural_mask(L_max, m2, k, r)
    allow = struct[None] & valid[:, None, :] & valid[:, :, None]
    idx = np.arange(struct.shape[0])
    allow[:, idx, idx] = True
    return allow


def render_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask)


# ---------------------------------------------------------- packed inference

@dataclass
class PackedBatch:
    batch: D.Batch
    slots: list[tuple[int, int]]   # (packed row, candidate slot) for every original candidate
    m1: int

    @property
    def n_inferences(self) -> int:
        return len(self.batch)


def pack_request(imp: D.Impression, m2: int) -> list[D.Impression]:
    """Split one user's ``m1`` candidates into groups of at most ``m2``."""
    groups = []
    for start in range(0, len(imp.candidates), m2):
        groups.append(D.Impression(imp.uid, imp.behaviors, imp.profile,
                                   imp.candidates[start:start + m2], imp.labels[start:start + m2]))
    return groups


def pack(requests, vocab: D.FeatureVocab, config) -> PackedBatch:
    groups, slots, m1 = [], [], 0
    for imp in requests:
        for g in pack_request(imp, config.m2):
            for u in range(len(g.candidates)):
                slots.append((len(groups), u))
            groups.append(g)
        m1 += len(imp.candidates)
    batch = D.encode(groups, vocab, config.L_max, config.m2, config.n1, config.n2, config.n3)
    return PackedBatch(batch, slots, m1)


def packed_predict(model, packed: PackedBatch) -> np.ndarray:
    """Scores for every real candidate, in original request order."""
    cand = packed.batch.cand_valid
    if not cand.any(axis=1).all():
        raise ValueError("packed group without a real candidate")
    probs = model.predict_batch(packed.batch)
    # forward emits real candidates in (row, slot) order
    flat = np.full(cand.shape, np.nan)
    flat[cand] = probs
    return np.array([flat[row, u] for row, u in packed.slots])


# ------------------------------------------------------------ sparse kernel

@lru_cache(maxsize=32)
def gather_plan(L: int, k: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-row allowed key indices padded to the widest row, and the padding mask."""
    rows = [np.flatnonzero(sparse_causal_mask_row(i, k, r)) for i in range(L)]
    width = max(len(x) for x in rows)
    idx = np.zeros((L, width), dtype=np.int64)
    ok = np.zeros((L, width), dtype=bool)
    for i, cols in enumerate(rows):
        idx[i, :len(cols)] = cols
        ok[i, :len(cols)] = True
    return idx, ok


def sparse_causal_mask_row(i: int, k: int, r: int) -> np.ndarray:
    gap = i - np.arange(i + 1)
    return (gap < k) | (gap % r == 0)


def sparse_attention(q: np.ndarray, key: np.ndarray, value: np.ndarray, k: int, r: int) -> np.ndarray:
    """Single-head causal attention that only touches allowed (query, key) pairs."""
    L, dim = q.shape
    idx, ok = gather_plan(L, k, r)
    scores = np.einsum("ld,lwd->lw", q, key[idx]) / math.sqrt(dim)
    scores = np.where(ok, scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("lw,lwd->ld", w, value[idx])


def dense_masked_attention(q: np.ndarray, key: np.ndarray, value: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scores = np.where(mask, q @ key.T / math.sqrt(q.shape[1]), -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    return w @ value


# -------------------------------------------------------------- cost model

@dataclass
class CostEstimate:
    full_attention: float
    sparse_attention: float
    cross_attention: float
    unpacked_per_user: float
    packed_per_user: float
    inferences_unpacked: int
    inferences_packed: int

    @property
    def sparse_ratio(self) -> float:
        return self.sparse_attention / self.full_attention

    @property
    def packed_ratio(self) -> float:
        return self.packed_per_user / self.unpacked_per_user


def estimate_cost(config, L: int, k: int, r: int, m1: int, m2: int, B: int = 1) -> CostEstimate:
    """Operation counts from the big-O forms, with unit constants."""
    l, n1d, n2 = config.l, config.n1 * config.d, config.n2
    if min(l, n1d, n2, L, k, r, m1, m2, B) <= 0:
        raise ValueError("all cost arguments must be positive")
    full = B * l * L * L * n1d
    sparse = B * l * L * (k + L / r) * n1d
    cross = B * l * L * n2 * n1d
    unpacked = m1 * (sparse + cross)
    Lp = L + m2
    n_packed = math.ceil(m1 / m2)
    packed = n_packed * (B * l * Lp * (k + Lp / r) * n1d + B * l * Lp * n2 * n1d)
    return CostEstimate(full, sparse, cross, unpacked, packed, m1, n_packed)
