"""Impression schema, feature hashing, sequence layout, and the synthetic clickstream generator."""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

REGULAR_FIELDS = ("item", "cat", "btype", "hour")
PAD_SLOT = 0
PLACEHOLDER_SLOT = 1
N_RESERVED = 2
CANDIDATE_BTYPE = "<candidate>"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorEvent:
    item: str
    cat: str
    btype: str
    ts: int

    def regular(self) -> tuple[str, str, str, str]:
        return (self.item, self.cat, self.btype, hour_of(self.ts))


@dataclass(frozen=True)
class Candidate:
    item: str
    cat: str
    ts: int
    detail: dict = field(default_factory=dict, hash=False)

    def regular(self) -> tuple[str, str, str, str]:
        return (self.item, self.cat, CANDIDATE_BTYPE, hour_of(self.ts))


@dataclass
class Impression:
    uid: str
    behaviors: list[BehaviorEvent]
    profile: dict
    candidates: list[Candidate]
    labels: list[int]

    @property
    def candidate(self) -> Candidate:
        return self.candidates[0]

    @property
    def label(self) -> int:
        return self.labels[0]

    @property
    def exposure_ts(self) -> int:
        return min(c.ts for c in self.candidates)

    def problems(self) -> list[str]:
        out = []
        ts = [b.ts for b in self.behaviors]
        if any(t < 0 for t in ts):
            out.append("negative behavior timestamp")
        if any(a > b for a, b in zip(ts, ts[1:])):
            out.append("behavior timestamps not nondecreasing")
        if not self.candidates:
            out.append("no candidate")
        elif ts and ts[-1] > self.exposure_ts:
            out.append("behavior after candidate exposure")
        if len(self.labels) != len(self.candidates) or any(y not in (0, 1) for y in self.labels):
            out.append("labels must be 0/1, one per candidate")
        return out


def hour_of(ts: int) -> str:
    return str((int(ts) // 3600) % 24)


# ------------------------------------------------------------------ hashing

class FeatureVocab:
    """Field registry over one shared hashed table; slots 0/1 are PAD/PLACEHOLDER."""

    def __init__(self, table_size: int, fields: Iterable[str] = ()):
        if table_size < 4 or table_size & (table_size - 1):
            raise ValueError(f"table_size must be a power of two >= 4, got {table_size}")
        self.table_size = table_size
        self.fields: dict[str, int] = {}
        self._cache: dict[tuple[int, str], int] = {}
        for name in fields:
            self.register(name)

    def register(self, name: str) -> int:
        return self.fields.setdefault(name, len(self.fields))

    def slot(self, name: str, raw) -> int:
        try:
            fid = self.fields[name]
        except KeyError:
            raise KeyError(f"field {name!r} is not registered") from None
        return hash_feature(fid, raw, self.table_size, self._cache)

    @classmethod
    def for_schema(cls, table_size: int, profile_keys: Sequence[str], detail_keys: Sequence[str]):
        names = list(REGULAR_FIELDS)
        names += [f"profile.{k}" for k in profile_keys] + [f"detail.{k}" for k in detail_keys]
        return cls(table_size, names)


def hash_feature(field_id: int, raw_value, table_size: int, cache: dict | None = None) -> int:
    key = (field_id, str(raw_value))
    if cache is not None and key in cache:
        return cache[key]
    digest = hashlib.blake2b(f"{field_id}\x1f{key[1]}".encode(), digest_size=8).digest()
    slot = N_RESERVED + int.from_bytes(digest, "little") % (table_size - N_RESERVED)
    if cache is not None:
        cache[key] = slot
    return slot


# ---------------------------------------------------------- sequence layout

@dataclass
class SequenceLayout:
    tokens: np.ndarray      # (L_max + m2, n1) slots
    row_ts: np.ndarray      # (L_max + m2,)
    positions: np.ndarray   # (L_max + m2,); every candidate row sits at position L_max
    valid: np.ndarray       # (L_max + m2,) bool
    n_real: int


def build_target_aware_sequence(behaviors: Sequence[BehaviorEvent], candidates: Sequence[Candidate],
                                L_max: int, m2: int, vocab: FeatureVocab, n1: int = 4) -> SequenceLayout:
    """Left-pad the last ``L_max`` behaviors and append ``m2`` candidate rows."""
    if not candidates:
        raise ValueError("at least one candidate is required")
    if len(candidates) > m2:
        raise ValueError(f"{len(candidates)} candidates exceed m2={m2}")
    if len(behaviors) > L_max:
        raise ValueError(f"{len(behaviors)} behaviors exceed L_max={L_max}")
    names = REGULAR_FIELDS[:n1]
    L_tot = L_max + m2
    tokens = np.full((L_tot, n1), PAD_SLOT, dtype=np.int64)
    row_ts = np.zeros(L_tot, dtype=np.int64)
    valid = np.zeros(L_tot, dtype=bool)
    start = L_max - len(behaviors)
    for r, b in enumerate(behaviors, start):
        tokens[r] = [vocab.slot(f, v) for f, v in zip(names, b.regular())]
        row_ts[r] = b.ts
        valid[r] = True
    for u in range(m2):
        r = L_max + u
        if u < len(candidates):
            c = candidates[u]
            tokens[r] = [vocab.slot(f, v) for f, v in zip(names, c.regular())]
            row_ts[r] = c.ts
            valid[r] = True
        else:
            tokens[r] = PLACEHOLDER_SLOT
    positions = np.concatenate([np.arange(L_max), np.full(m2, L_max)])
    return SequenceLayout(tokens, row_ts, positions, valid, len(candidates))


@dataclass
class Batch:
    """Stacked model inputs for a group of impressions."""

    tokens: np.ndarray      # (B, L_max + m2, n1)
    row_ts: np.ndarray      # (B, L_max + m2)
    valid: np.ndarray       # (B, L_max + m2)
    profile: np.ndarray     # (B, n2)
    detail: np.ndarray      # (B, m2, n3)
    labels: np.ndarray      # (B, m2), 0 on placeholder slots
    L_max: int
    m2: int

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def cand_valid(self) -> np.ndarray:
        return self.valid[:, self.L_max:]

    @property
    def positions(self) -> np.ndarray:
        return np.concatenate([np.arange(self.L_max), np.full(self.m2, self.L_max)])

    def real_labels(self) -> np.ndarray:
        return self.labels[self.cand_valid]

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.tokens[idx], self.row_ts[idx], self.valid[idx], self.profile[idx],
                     self.detail[idx], self.labels[idx], self.L_max, self.m2)


def profile_keys_of(imp: Impression, n2: int) -> list[str]:
    keys = sorted(imp.profile)
    if len(keys) < n2:
        raise DataError(f"profile has {len(keys)} fields, model expects n2={n2}")
    return keys[:n2]


def detail_keys_of(c: Candidate, n3: int) -> list[str]:
    keys = sorted(c.detail)
    if len(keys) < n3:
        raise DataError(f"candidate detail has {len(keys)} fields, model expects n3={n3}")
    return keys[:n3]


def encode(impressions: Sequence[Impression], vocab: FeatureVocab, L_max: int, m2: int = 1,
           n1: int = 4, n2: int = 4, n3: int = 4) -> Batch:
    """Hash and lay out impressions; only the newest ``L_max`` behaviors are kept."""
    B = len(impressions)
    L_tot = L_max + m2
    tokens = np.empty((B, L_tot, n1), dtype=np.int64)
    row_ts = np.empty((B, L_tot), dtype=np.int64)
    valid = np.empty((B, L_tot), dtype=bool)
    profile = np.empty((B, n2), dtype=np.int64)
    detail = np.full((B, m2, n3), PLACEHOLDER_SLOT, dtype=np.int64)
    labels = np.zeros((B, m2))
    for i, imp in enumerate(impressions):
        behaviors = imp.behaviors[-L_max:] if L_max > 0 else []
        lay = build_target_aware_sequence(behaviors, imp.candidates, L_max, m2, vocab, n1)
        tokens[i], row_ts[i], valid[i] = lay.tokens, lay.row_ts, lay.valid
        profile[i] = [vocab.slot(f"profile.{k}", imp.profile[k]) for k in profile_keys_of(imp, n2)]
        for u, c in enumerate(imp.candidates):
            detail[i, u] = [vocab.slot(f"detail.{k}", c.detail[k]) for k in detail_keys_of(c, n3)]
            labels[i, u] = imp.labels[u]
    return Batch(tokens, row_ts, valid, profile, detail, labels, L_max, m2)


def vocab_for(impressions: Sequence[Impression], table_size: int) -> FeatureVocab:
    first = impressions[0]
    return FeatureVocab.for_schema(table_size, sorted(first.profile), sorted(first.candidate.detail))


# ------------------------------------------------------------- JSONL I/O

def impression_to_dict(imp: Impression) -> dict:
    c = imp.candidate
    return {
        "uid": imp.uid,
        "behaviors": [{"item": b.item, "cat": b.cat, "btype": b.btype, "ts": b.ts} for b in imp.behaviors],
        "profile": dict(imp.profile),
        "candidate": {"item": c.item, "cat": c.cat, "ts": c.ts, "detail": dict(c.detail)},
        "label": imp.label,
    }


def impression_from_dict(rec: dict) -> Impression:
    c = rec["candidate"]
    return Impression(
        uid=str(rec["uid"]),
        behaviors=[BehaviorEvent(str(b["item"]), str(b["cat"]), str(b["btype"]), int(b["ts"]))
                   for b in rec["behaviors"]],
        profile={str(k): str(v) for k, v in rec["profile"].items()},
        candidates=[Candidate(str(c["item"]), str(c["cat"]), int(c["ts"]),
                              {str(k): str(v) for k, v in c["detail"].items()})],
        labels=[int(rec["label"])],
    )


def write_jsonl(path, impressions: Iterable[Impression]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for imp in impressions:
            fh.write(json.dumps(impression_to_dict(imp), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_jsonl(path, rejected: list | None = None) -> Iterator[Impression]:
    """Yield impressions; records violating invariants are skipped and reported.

    Malformed lines raise :class:`DataError` naming the line number.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                imp = impression_from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as exc:
                raise DataError(f"{path}: line {lineno}: malformed record ({exc})") from exc
            problems = imp.problems()
            if problems:
                log.warning("%s: line %d rejected: %s", path, lineno, "; ".join(problems))
                if rejected is not None:
                    rejected.append((lineno, problems))
                continue
            yield imp


def iterate_batches(dataset: Sequence, B: int, shuffle_seed: int | None = None) -> Iterator[list]:
    for idx in batch_indices(len(dataset), B, shuffle_seed):
        yield [dataset[i] for i in idx]


def batch_indices(n: int, B: int, shuffle_seed: int | None = None) -> list[np.ndarray]:
    if B < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[i:i + B] for i in range(0, n, B)]


def time_split(dataset: Sequence[Impression], boundary_ts: int):
    train = [imp for imp in dataset if imp.exposure_ts < boundary_ts]
    held = [imp for imp in dataset if imp.exposure_ts >= boundary_ts]
    if not train or not held:
        warnings.warn(f"time_split at {boundary_ts}: train={len(train)} eval={len(held)}", stacklevel=2)
    return train, held


# -------------------------------------------------------------- generator

DAY = 86400
AGE_BUCKETS = 7
CITIES = 10
DEVICES = 3
CTR_BUCKETS = 10


@dataclass
class GenConfig:
    users: int = 2000
    behaviors_per_user: int = 32
    categories: int = 16
    base_rate: float = 0.2
    w_far: float = 6.0
    w_recent: float = 4.0
    recency_tau: float = 3.0      # decay (in behaviors) of the recent-half weights; <= 0 is uniform
    seed: int = 0
    impressions_per_user: int = 1
    items_per_category: int = 40
    interest_concentration: float = 0.3
    drift: float = 0.6
    profile_weight: float = 0.5
    quality_weight: float = 0.5
    in_interest_prob: float = 0.6
    start_day: int = 100
    exposure_days: int = 14

    def validate(self) -> None:
        for name in ("users", "behaviors_per_user", "categories", "impressions_per_user",
                     "items_per_category", "exposure_days"):
            if getattr(self, name) <= 0:
                raise ValueError(f"gen config: {name} must be positive")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError("gen config: base_rate must lie in (0, 1)")
        if self.interest_concentration <= 0:
            raise ValueError("gen config: interest_concentration must be positive")
        if not 0.0 <= self.drift <= 1.0 or not 0.0 <= self.in_interest_prob <= 1.0:
            raise ValueError("gen config: drift and in_interest_prob must lie in [0, 1]")


@dataclass
class SyntheticLogs:
    impressions: list[Impression]
    click_prob: np.ndarray   # true click probability of every impression
    bias: float              # calibrated intercept

    @cached_property
    def boundary_ts(self) -> int:
        """Exposure time splitting the last quarter of the exposure window off for eval."""
        ts = np.array([imp.exposure_ts for imp in self.impressions])
        return int(np.quantile(ts, 0.75))


def calibrate_bias(logits: np.ndarray, base_rate: float) -> float:
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if expit(logits + mid).mean() < base_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic_logs(cfg: GenConfig, seed: int | None = None) -> SyntheticLogs:
    """Clickstream with a planted interest structure.

    Every user draws a long-term interest over categories; the recent half of
    the history follows a drifted copy of it. A candidate's click logit is
    ``w_recent * share(recent half, cat) + w_far * share(distant half, cat)``
    (the recent share decays with behavior age)
    plus profile/category and item-quality terms and a calibrated intercept,
    so the distant half carries signal only a long enough sequence can see.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    C, H = cfg.categories, cfg.behaviors_per_user
    n_items = C * cfg.items_per_category
    quality = rng.normal(0.0, 1.0, n_items)
    gender_pref = rng.normal(0.0, 1.0, (2, C))
    age_pref = rng.normal(0.0, 1.0, (AGE_BUCKETS, C))
    btypes = ("click", "cart", "order")

    raw, logits = [], []
    half = H // 2
    age = np.arange(half)[::-1]
    recency = np.exp(-age / cfg.recency_tau) if cfg.recency_tau > 0 else np.ones(half)
    recency /= recency.sum()
    for u in range(cfg.users):
        far_interest = rng.dirichlet(np.full(C, cfg.interest_concentration))
        near_interest = (1 - cfg.drift) * far_interest + cfg.drift * rng.dirichlet(
            np.full(C, cfg.interest_concentration))
        profile = {"age": int(rng.integers(AGE_BUCKETS)), "gender": int(rng.integers(2)),
                   "city": int(rng.integers(CITIES)), "device": int(rng.integers(DEVICES))}
        n_events = H + cfg.impressions_per_user - 1
        # newest behaviors are drawn from the drifted interest
        cats = np.where(np.arange(n_events) < n_events - half,
                        rng.choice(C, size=n_events, p=far_interest),
                        rng.choice(C, size=n_events, p=near_interest))
        items = cats * cfg.items_per_category + rng.integers(cfg.items_per_category, size=n_events)
        kinds = rng.choice(3, size=n_events, p=[0.8, 0.15, 0.05])
        gaps = rng.exponential(0.5 * DAY, size=n_events).astype(np.int64) + 1
        first_exposure = (cfg.start_day + rng.uniform(0, cfg.exposure_days)) * DAY
        ts = np.cumsum(gaps)
        ts = ts - ts[H - 1] + int(first_exposure) - int(rng.integers(60, 3600))
        ts = np.maximum(ts, 0)
        for k in range(cfg.impressions_per_user):
            hist = slice(k, k + H)
            h_cats = cats[hist]
            exposure = int(ts[k + H - 1]) + int(rng.integers(60, 3600))
            if rng.random() < cfg.in_interest_prob:
                c_cat = int(rng.choice(C, p=near_interest))
            else:
                c_cat = int(rng.integers(C))
            c_item = c_cat * cfg.items_per_category + int(rng.integers(cfg.items_per_category))
            share_far = float(np.mean(h_cats[:H - half] == c_cat)) if H - half else 0.0
            share_near = float(recency @ (h_cats[H - half:] == c_cat))
            logit = (cfg.w_recent * share_near + cfg.w_far * share_far
                     + cfg.profile_weight * (gender_pref[profile["gender"], c_cat]
                                             + age_pref[profile["age"], c_cat])
                     + cfg.quality_weight * quality[c_item])
            noisy_q = quality[c_item] + rng.normal(0.0, 0.5)
            detail = {"ctr3d": int(np.clip(np.floor((noisy_q + 2.5) * 2), 0, CTR_BUCKETS - 1)),
                      "price": int(rng.integers(8)), "slot": int(rng.integers(5)),
                      "promo": int(rng.integers(2))}
            behaviors = [BehaviorEvent(f"i{items[j]}", f"c{cats[j]}", btypes[kinds[j]], int(ts[j]))
                         for j in range(k, k + H)]
            raw.append((u, profile, behaviors, c_item, c_cat, exposure, detail))
            logits.append(logit)

    logits = np.array(logits)
    bias = calibrate_bias(logits, cfg.base_rate)
    probs = expit(logits + bias)
    labels = (rng.random(len(probs)) < probs).astype(int)
    impressions = []
    for (u, profile, behaviors, c_item, c_cat, exposure, detail), y in zip(raw, labels):
        impressions.append(Impression(
            uid=f"u{u}", behaviors=behaviors,
            profile={k: str(v) for k, v in profile.items()},
            candidates=[Candidate(f"i{c_item}", f"c{c_cat}", exposure,
                                  {k: str(v) for k, v in detail.items()})],
            labels=[int(y)]))
    return SyntheticLogs(impressions, probs, bias)
