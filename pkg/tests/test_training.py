import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from suan import numerics as nx
from suan.data import GenConfig, encode, generate_synthetic_logs, time_split, vocab_for
from suan.model import ModelConfig, SuanModel
from suan.training import (
    DistillConfig, MetricsLog, TrainConfig, TrainingDiverged, auc, distill_loss, distill_train, encode_for,
    evaluate, rela_impr, train,
)

import table2


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


# ---------------------------------------------------------------- auc

def test_auc_perfect_and_reversed():
    y = [0, 0, 1, 1]
    assert auc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], y) == 0.0
    assert auc([0.5] * 4, y) == 0.5


def test_auc_matches_pairwise_on_200_pairs():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 10, 40) / 10.0          # plenty of ties
    y = np.r_[np.ones(20), np.zeros(20)].astype(int)[rng.permutation(40)]
    assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_property_pairwise(rows):
    s = [a for a, _ in rows]
    y = [int(b) for _, b in rows]
    if len(set(y)) < 2:
        with pytest.raises(ValueError):
            auc(s, y)
        return
    assert auc(s, y) == pytest.approx(pairwise_auc(s, y), abs=1e-12)


def test_auc_monotone_invariance():
    rng = np.random.default_rng(1)
    s, y = rng.normal(size=300), rng.integers(0, 2, 300)
    assert auc(s, y) == auc(np.exp(3 * s) + 7, y)


def test_auc_errors():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 0, 1])


# ---------------------------------------------------------------- relaimpr

@pytest.mark.parametrize("dataset, name, a, base, printed",
                         [e for e in table2.entries() if e[:2] not in table2.MISPRINTED])
def test_rela_impr_reproduces_table(dataset, name, a, base, printed):
    assert abs(rela_impr(a, base) - printed) <= 0.01


@pytest.mark.xfail(strict=True, reason="printed 24.97% does not follow from AUC 0.6495 over 0.6198")
def test_rela_impr_misprinted_entry():
    (_, _, a, base, printed), = [e for e in table2.entries() if e[:2] in table2.MISPRINTED]
    assert abs(rela_impr(a, base) - printed) <= 0.01


def test_rela_impr_base_must_beat_chance():
    with pytest.raises(ValueError):
        rela_impr(0.7, 0.5)


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def logs():
    return generate_synthetic_logs(GenConfig(users=600, behaviors_per_user=8, categories=6, seed=1))


def tiny(**kw):
    return ModelConfig(**{**dict(d=4, l=1, h=1, L_max=8, table_size=1 << 10, mlp_dims=(8, 1)), **kw})


def test_zero_lr_leaves_model_unchanged(logs):
    imps = logs.impressions[:200]
    model = SuanModel(tiny(activation="relu"))
    before = model.state()
    vocab = vocab_for(imps, model.cfg.table_size)
    auc0 = evaluate(model, encode_for(model.cfg, imps, vocab))[0]
    train(model, imps, TrainConfig(lr=0.0, batch_size=32), vocab=vocab)
    after = model.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert evaluate(model, encode_for(model.cfg, imps, vocab))[0] == auc0


def test_overfits_small_set(logs):
    imps = logs.impressions[:100]
    model = SuanModel(tiny(d=8, mlp_dims=(16, 1)))
    vocab = vocab_for(imps, model.cfg.table_size)
    train(model, imps, TrainConfig(lr=1e-2, batch_size=20, epochs=50), vocab=vocab)
    assert evaluate(model, encode_for(model.cfg, imps, vocab))[0] > 0.95


def test_training_is_deterministic(logs):
    imps = logs.impressions[:150]
    runs = []
    for _ in range(2):
        model = SuanModel(tiny())
        _, log = train(model, imps, TrainConfig(lr=3e-3, batch_size=32, seed=4))
        runs.append((model.state(), log.column("loss1")))
    assert np.array_equal(runs[0][1], runs[1][1])
    assert all(np.array_equal(runs[0][0][k], runs[1][0][k]) for k in runs[0][0])


def test_eval_logged_on_schedule(logs):
    tr, ev = time_split(logs.impressions, logs.boundary_ts)
    _, log = train(SuanModel(tiny()), tr[:128], TrainConfig(batch_size=32, eval_every=2), eval_set=ev)
    aucs = log.column("eval_auc")
    assert np.isnan(aucs[0]) and not np.isnan(aucs[1]) and not np.isnan(aucs[3])
    assert log.final_auc == aucs[-1]


def test_nonfinite_loss_raises(logs):
    model = SuanModel(tiny())
    model.params["embedding"].data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train(model, logs.impressions[:64], TrainConfig(batch_size=32))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr=-1).validate()


# ---------------------------------------------------------------- distillation

def test_distill_loss_worked_example():
    z = nx.Param(np.array([2.0]))
    with nx.Tape() as tape:
        loss = distill_loss(z, np.array([4.0]), 2.0)
    nx.backward(tape, loss)
    assert loss.item() == pytest.approx(0.4324646, abs=1e-7)
    assert z.grad[0] == pytest.approx(-0.0748692, abs=1e-7)


@pytest.mark.parametrize("t", [1.0, 2.0, 4.0, 8.0])
def test_distill_gradient_law(t):
    rng = np.random.default_rng(int(t))
    zs, zt = rng.normal(0, 3, 16), rng.normal(0, 3, 16)
    z = nx.Param(zs.copy())
    with nx.Tape() as tape:
        loss = distill_loss(z, zt, t)
    nx.backward(tape, loss)
    law = (expit(zs / t) - expit(zt / t)) / t
    np.testing.assert_allclose(z.grad * len(zs), law, rtol=0, atol=1e-10)


def test_teacher_gets_no_gradient_from_distill_loss(logs):
    imps = logs.impressions[:32]
    teacher, student = SuanModel(tiny(L_max=8, seed=1)), SuanModel(tiny(L_max=4))
    vocab = vocab_for(imps, 1 << 10)
    with nx.Tape() as tape:
        zt = teacher.forward(encode_for(teacher.cfg, imps, vocab), train=True).logits
        z = student.forward(encode_for(student.cfg, imps, vocab), train=True).logits
        loss3 = distill_loss(z, zt, 2.0)
    nx.backward(tape, loss3)
    assert all(not p.grad.any() for p in teacher.parameters())
    assert any(p.grad.any() for p in student.parameters())


def test_distill_rejects_bad_configs():
    s = tiny(L_max=4)
    with pytest.raises(ValueError):
        DistillConfig(tiny(), s, t=0.0).validate()
    with pytest.raises(ValueError):
        DistillConfig(tiny(), s, lam=-1.0).validate()
    with pytest.raises(ValueError):
        DistillConfig(tiny(L_max=2), s).validate()
    with pytest.raises(ValueError):
        DistillConfig(tiny(n2=3), s).validate()
    assert DistillConfig(tiny(), s, t=3.0).weight == 3.0


def test_zero_lambda_student_matches_plain_training(logs):
    imps = logs.impressions[:160]
    tcfg = TrainConfig(lr=3e-3, batch_size=32, seed=2)
    dcfg = DistillConfig(tiny(L_max=8, d=8, seed=5), tiny(L_max=4), t=2.0, lam=0.0)
    vocab = vocab_for(imps, 1 << 10)
    _, student, log = distill_train(SuanModel(dcfg.teacher), SuanModel(dcfg.student), imps, dcfg, tcfg,
                                    vocab=vocab)
    plain, plain_log = train(SuanModel(dcfg.student), imps, tcfg, vocab=vocab)
    a, b = student.state(), plain.state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert np.array_equal(log.column("loss1"), plain_log.column("loss1"))
    assert np.isfinite(log.column("loss2")).all() and np.isfinite(log.column("loss3")).all()


def test_metrics_log_csv(tmp_path):
    log = MetricsLog()
    log.append(1, 0.1, loss1=0.5)
    log.append(2, 0.1, loss1=0.4, eval_auc=0.7)
    log.to_csv(tmp_path / "m.csv")
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert list(rows[0]) == ["step", "loss1", "loss2", "loss3", "lr", "eval_auc", "wall_ms"]
    assert rows[0]["eval_auc"] == "" and float(rows[1]["eval_auc"]) == 0.7
    assert math.isnan(MetricsLog().final_auc) and log.final_auc == 0.7
