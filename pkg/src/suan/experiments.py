"""Desk-scale protocol shared by the scripts and the acceptance suite.

Every run trains one freshly initialised model for one epoch over the training
split of a 100k-user synthetic log and scores the fixed held-out split.
Runs are memoised in a ``cache`` dict so sweeps that share a configuration
(the (8, 2, 2) model at L=8 sits on both axes) train it once.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sparse as SP
from .data import GenConfig, vocab_for
from .model import VARIANTS, ModelConfig, SuanModel
from .scaling import GradeLadder, LadderData, ScalingPoint, fit_power_law, run_grade_ladder
from .training import DistillConfig, TrainConfig, distill_train, encode_for, evaluate

DESK_GEN = GenConfig(users=100_000, behaviors_per_user=16, w_recent=6.0, w_far=3.0, recency_tau=6.0, seed=0)
DESK_MODEL = ModelConfig(d=8, l=2, h=2, L_max=8, table_size=1 << 14, mlp_dims=(64, 32, 1))
DESK_TRAIN = TrainConfig(lr=3e-3, batch_size=128, epochs=1)
DESK_LADDER = GradeLadder(sizes=[(4, 1, 1), (8, 1, 1), (8, 2, 2), (16, 2, 2), (16, 4, 4)],
                          lengths=[2, 4, 8, 16, 32])
SIZE_AXIS_L = 8
ABLATION_L = 8
SEEDS = (0, 1, 2)
DISTILL_SEEDS = (0, 1, 2, 3, 4)
DISTILL_TEACHER = DESK_MODEL.replace(d=16, L_max=16)
DISTILL_STUDENT = DESK_MODEL.replace(d=4, l=1, h=1, L_max=8, window=2, dilation=2)
DISTILL_T = 2.0


@dataclass
class Sweep:
    axis: str
    points: list[ScalingPoint]
    runs: list[ScalingPoint] = field(default_factory=list)
    seconds: float = 0.0

    def means(self) -> dict:
        return {p.meta["rung"]: p.auc for p in self.points}


def desk_data(gen: GenConfig = DESK_GEN) -> LadderData:
    return LadderData.from_config(gen)


def length_sweep(data: LadderData, seeds=SEEDS, cache: dict | None = None,
                 ladder: GradeLadder = DESK_LADDER, base: ModelConfig = DESK_MODEL,
                 tcfg: TrainConfig = DESK_TRAIN) -> Sweep:
    t0, runs = time.perf_counter(), []
    pts = run_grade_ladder(data, ladder, "length", seeds, base, tcfg, cache=cache, runs=runs)
    return Sweep("length", pts, runs, time.perf_counter() - t0)


def size_sweep(data: LadderData, seeds=SEEDS, cache: dict | None = None,
               ladder: GradeLadder = DESK_LADDER, base: ModelConfig = DESK_MODEL,
               tcfg: TrainConfig = DESK_TRAIN) -> Sweep:
    t0, runs = time.perf_counter(), []
    pts = run_grade_ladder(data, ladder, "model_size", seeds, base.replace(L_max=SIZE_AXIS_L), tcfg,
                           cache=cache, runs=runs)
    return Sweep("model_size", pts, runs, time.perf_counter() - t0)


def ablation(data: LadderData, seeds=SEEDS, cache: dict | None = None, base: ModelConfig = DESK_MODEL,
             tcfg: TrainConfig = DESK_TRAIN) -> dict[str, list[float]]:
    """Eval AUC per seed for the full model and every variant A-G."""
    from .scaling import train_and_eval
    base = base.replace(L_max=ABLATION_L)
    out = {}
    for name, toggles in [("full", {})] + sorted(VARIANTS.items()):
        cfg = base.replace(**toggles)
        out[name] = [train_and_eval(cfg.replace(seed=s), data, _seeded(tcfg, s), cache=cache)
                     for s in seeds]
    return out


def distill_comparison(data: LadderData, seeds=DISTILL_SEEDS, teacher: ModelConfig = DISTILL_TEACHER,
                       student: ModelConfig = DISTILL_STUDENT, t: float = DISTILL_T,
                       tcfg: TrainConfig = DESK_TRAIN, cache: dict | None = None) -> dict[str, list[float]]:
    """Student eval AUC per seed, distilled (lambda = t) against plain training."""
    from .scaling import train_and_eval
    vocab = vocab_for(data.train, student.table_size)
    held = encode_for(student, data.held, vocab)
    distilled, plain = [], []
    for s in seeds:
        dcfg = DistillConfig(teacher.replace(seed=s + 1000), student.replace(seed=s), t)
        _, st, _ = distill_train(SuanModel(dcfg.teacher), SuanModel(dcfg.student), data.train, dcfg,
                                 _seeded(tcfg, s), vocab=vocab)
        distilled.append(evaluate(st, held)[0])
        plain.append(train_and_eval(student.replace(seed=s), data, _seeded(tcfg, s), cache=cache))
    return {"distilled": distilled, "plain": plain}


def sparse_timing(lengths=(1024,), dilations=(1, 2, 4, 8), k: int = 2, trials: int = 7,
                  dim: int = 32, seed: int = 0) -> list[dict]:
    """Median wall time of the sparse kernel; ratios are relative to r=1 (full causal)."""
    rng = np.random.default_rng(seed)
    unit = ModelConfig(d=1, n1=1, l=1, n2=1)
    rows = []
    for L in lengths:
        q, key, v = (rng.normal(size=(L, dim)) for _ in range(3))
        base = None
        for r in dilations:
            SP.sparse_attention(q, key, v, k, r)     # builds and caches the gather plan
            times = []
            for _ in range(trials):
                t0 = time.perf_counter()
                SP.sparse_attention(q, key, v, k, r)
                times.append(time.perf_counter() - t0)
            med = float(np.median(times))
            base = med if r == 1 or base is None else base
            rows.append({"L": L, "k": k, "r": r, "median_s": med, "measured_ratio": med / base,
                         "predicted_ratio": SP.estimate_cost(unit, L, k, r, 1, 1).sparse_ratio})
    return rows


def fit_sweep(sweep: Sweep):
    return fit_power_law(sweep.points, {"length": "L", "model_size": "C", "data_size": "D"}[sweep.axis])


def _seeded(tcfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**tcfg.__dict__, "seed": seed})


def save_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_plain)


def _plain(o):
    if isinstance(o, ScalingPoint):
        return {"x": o.x, "auc": o.auc, "seed": o.seed, "config_hash": o.config_hash, "meta": o.meta}
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))
