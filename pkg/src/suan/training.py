"""Training loop, AUC/RelaImpr metrics, and online teacher/student distillation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .data import Batch, FeatureVocab, Impression, encode, vocab_for
from .model import ModelConfig, SuanModel, count_params


class TrainingDiverged(FloatingPointError):
    pass


# ------------------------------------------------------------------ metrics

def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def rela_impr(auc_model: float, auc_base: float) -> float:
    """Relative AUC improvement over a base model, in percent."""
    if auc_base <= 0.5:
        raise ValueError(f"base AUC must exceed 0.5, got {auc_base}")
    return ((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0


# ------------------------------------------------------------------- configs

@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    epochs: int = 1
    seed: int = 0
    eval_every: int = 0          # steps between eval AUCs; 0 evaluates once at the end
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.lr < 0 or self.eval_every < 0:
            raise ValueError("lr and eval_every must be nonnegative")


@dataclass
class DistillConfig:
    teacher: ModelConfig
    student: ModelConfig
    t: float = 2.0
    lam: float | None = None     # None means lambda = t

    @property
    def weight(self) -> float:
        return self.t if self.lam is None else self.lam

    def validate(self) -> None:
        if self.t <= 0:
            raise ValueError("temperature t must be positive")
        if self.weight < 0:
            raise ValueError("distillation weight must be nonnegative")
        s, te = self.student, self.teacher
        if (s.n1, s.n2, s.n3) != (te.n1, te.n2, te.n3):
            raise ValueError("teacher and student must read the same n1/n2/n3 feature fields")
        if te.L_max < s.L_max or (count_params(te)["total_non_embedding"]
                                  < count_params(s)["total_non_embedding"]):
            raise ValueError("teacher grade must not be below the student grade")


LOG_FIELDS = ("step", "loss1", "loss2", "loss3", "lr", "eval_auc", "wall_ms")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)
    t0: float = field(default_factory=time.perf_counter)

    def append(self, step: int, lr: float, loss1=math.nan, loss2=math.nan, loss3=math.nan,
               eval_auc=math.nan) -> dict:
        row = {"step": step, "loss1": float(loss1), "loss2": float(loss2), "loss3": float(loss3),
               "lr": lr, "eval_auc": float(eval_auc),
               "wall_ms": round((time.perf_counter() - self.t0) * 1000.0, 3)}
        self.rows.append(row)
        return row

    @property
    def final_auc(self) -> float:
        for row in reversed(self.rows):
            if not math.isnan(row["eval_auc"]):
                return row["eval_auc"]
        return math.nan

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=np.float64)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else repr(v))
                            for k, v in row.items()})


# ----------------------------------------------------------------- helpers

def encode_for(cfg: ModelConfig, impressions: Sequence[Impression], vocab: FeatureVocab) -> Batch:
    return encode(impressions, vocab, cfg.L_max, cfg.m2, cfg.n1, cfg.n2, cfg.n3)


def evaluate(model: SuanModel, data: Batch, batch_size: int = 512) -> tuple[float, np.ndarray]:
    """(AUC, scores) over every real candidate of an encoded dataset."""
    scores = np.concatenate([model.predict_batch(data.take(np.arange(i, min(i + batch_size, len(data)))))
                             for i in range(0, len(data), batch_size)])
    return auc(scores, data.real_labels()), scores


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _check_finite(step: int, **losses) -> None:
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        raise TrainingDiverged(f"non-finite loss at step {step}: {bad}")


def bce_loss(model: SuanModel, batch: Batch) -> tuple[nx.Tensor, nx.Tensor]:
    """(mean BCE, logits) with the forward pass recorded on the active tape."""
    out = model.forward(batch, train=True)
    return nx.bce(out.probs, batch.real_labels()).mean(), out.logits


# -------------------------------------------------------------------- train

def train(model: SuanModel, dataset: Sequence[Impression], cfg: TrainConfig,
          eval_set: Sequence[Impression] | None = None, vocab: FeatureVocab | None = None,
          log: MetricsLog | None = None) -> tuple[SuanModel, MetricsLog]:
    """Mini-batch BCE with Adam over ``cfg.epochs`` shuffled passes."""
    if not dataset:
        raise ValueError("empty training set")
    cfg.validate()
    vocab = vocab or vocab_for(dataset, model.cfg.table_size)
    data = encode_for(model.cfg, dataset, vocab)
    held = encode_for(model.cfg, eval_set, vocab) if eval_set else None
    log = log or MetricsLog()
    opt = nx.Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    step = 0
    for epoch in range(cfg.epochs):
        order = epoch_order(len(data), cfg.seed, epoch)
        for start in range(0, len(order), cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            with nx.Tape() as tape:
                loss, _ = bce_loss(model, batch)
            _check_finite(step, loss1=loss.item())
            nx.backward(tape, loss)
            opt.step()
            step += 1
            eval_auc = math.nan
            if held is not None and cfg.eval_every and step % cfg.eval_every == 0:
                eval_auc = evaluate(model, held)[0]
            log.append(step, cfg.lr, loss1=loss.item(), eval_auc=eval_auc)
    if held is not None and math.isnan(log.rows[-1]["eval_auc"]):
        log.rows[-1]["eval_auc"] = evaluate(model, held)[0]
    return model, log


# ----------------------------------------------------------------- distill

def distill_loss(z: nx.Tensor, z_teacher, t: float) -> nx.Tensor:
    """Mean BCE between softened student and teacher probabilities.

    The teacher side is a constant soft label, so no gradient reaches it.
    d loss / d z_i = (sigmoid(z_i/t) - sigmoid(z'_i/t)) / (t * n).
    """
    if t <= 0:
        raise ValueError("temperature must be positive")
    zt = z_teacher.data if isinstance(z_teacher, nx.Tensor) else np.asarray(z_teacher, dtype=np.float64)
    soft = nx.sigmoid_raw(nx.Tensor(zt / t)).data
    return nx.bce(nx.sigmoid(z / t), soft).mean()


def distill_train(teacher: SuanModel, student: SuanModel, dataset: Sequence[Impression],
                  dcfg: DistillConfig, tcfg: TrainConfig, eval_set: Sequence[Impression] | None = None,
                  vocab: FeatureVocab | None = None) -> tuple[SuanModel, SuanModel, MetricsLog]:
    """Co-train teacher (loss2) and student (loss1 + lambda * loss3) on one batch stream."""
    if not dataset:
        raise ValueError("empty training set")
    dcfg.validate()
    tcfg.validate()
    if teacher.cfg.to_dict() != dcfg.teacher.to_dict() or student.cfg.to_dict() != dcfg.student.to_dict():
        raise ValueError("models do not match the distillation configs")
    vocab = vocab or vocab_for(dataset, student.cfg.table_size)
    t_vocab = vocab if teacher.cfg.table_size == vocab.table_size else vocab_for(dataset, teacher.cfg.table_size)
    s_data = encode_for(student.cfg, dataset, vocab)
    t_data = encode_for(teacher.cfg, dataset, t_vocab)   # longer slice of the same history
    held = encode_for(student.cfg, eval_set, vocab) if eval_set else None
    t_opt = nx.Adam(teacher.parameters(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    s_opt = nx.Adam(student.parameters(), tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    lam, t = dcfg.weight, dcfg.t
    log = MetricsLog()
    step = 0
    for epoch in range(tcfg.epochs):
        order = epoch_order(len(s_data), tcfg.seed, epoch)
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            with nx.Tape() as t_tape:
                loss2, z_teacher = bce_loss(teacher, t_data.take(idx))
            with nx.Tape() as s_tape:
                loss1, z = bce_loss(student, s_data.take(idx))
                loss3 = distill_loss(z, z_teacher.data, t)
                total = loss1 + lam * loss3 if lam else loss1
            _check_finite(step, loss1=loss1.item(), loss2=loss2.item(), loss3=loss3.item())
            # fixed update order: teacher, then student
            nx.backward(t_tape, loss2)
            t_opt.step()
            nx.backward(s_tape, total)
            s_opt.step()
            step += 1
            eval_auc = math.nan
            if held is not None and tcfg.eval_every and step % tcfg.eval_every == 0:
                eval_auc = evaluate(student, held)[0]
            log.append(step, tcfg.lr, loss1.item(), loss2.item(), loss3.item(), eval_auc)
    if held is not None and math.isnan(log.rows[-1]["eval_auc"]):
        log.rows[-1]["eval_auc"] = evaluate(student, held)[0]
    return teacher, student, log
