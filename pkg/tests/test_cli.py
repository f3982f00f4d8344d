import csv
import hashlib
import json

import numpy as np
import pytest

from suan import cli
from suan.model import load_checkpoint
from suan.scaling import ScalingPoint, write_points_csv
from suan.sparse import sparse_causal_mask, structural_mask

SMALL = ["--override", "data.users=300", "--override", "data.behaviors_per_user=6",
         "--override", "model.d=4", "--override", "model.l=1", "--override", "model.h=1",
         "--override", "model.L_max=6", "--override", "model.table_size=1024",
         "--override", "model.mlp_dims=8,1", "--override", "train.batch_size=64"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert cli.main(["gen-data", "--out", str(out), "--seed", "3", *SMALL]) == 0
    return out / "data.jsonl"


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "gen-data", "--out", str(a), "--seed", "1", *SMALL)[0] == 0
    code, out, _ = run(capsys, "gen-data", "--out", str(b), "--seed", "1", *SMALL)
    assert code == 0 and "records 300" in out and "positive_rate" in out
    assert sha(a / "data.jsonl") == sha(b / "data.jsonl")
    assert "users = 300" in (a / "effective_config.ini").read_text()


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path), "--override", "data.wfar=1")
    assert code == 2 and "data.wfar" in err
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nwidth_mult = 3\n")
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path), "--config", str(ini))
    assert code == 2 and "model.width_mult" in err


def test_bad_value_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", str(tmp_path), "--override", "data.users=lots")
    assert code == 2 and "data.users" in err
    code, _, _ = run(capsys, "gen-data", "--out", str(tmp_path), "--override", "data.users=0")
    assert code == 2


def test_config_file_and_override_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[data]\nusers = 50\nw_far = 1.5\n[teacher]\nL_max = 64\n")
    cfg = cli.load_run_config(str(ini), ["data.users=70"], seed=9)
    assert (cfg.data.users, cfg.data.w_far, cfg.data.seed, cfg.model.seed) == (70, 1.5, 9, 9)
    assert cfg.teacher_config().L_max == 64 and cfg.model.L_max == 32


def test_train_then_eval_agree(dataset, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", str(dataset), "--out", str(tmp_path), "--seed", "0", *SMALL)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "metrics.csv")))
    logged = float(rows[-1]["eval_auc"])
    code, out, _ = run(capsys, "eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "model.ckpt"),
                       "--seed", "0", "--base-auc", "0.55", *SMALL)
    assert code == 0
    value = float(out.split()[1])
    assert value == pytest.approx(logged, abs=1e-6)
    assert out.strip().endswith("%")


def test_eval_mismatch_exits_2_with_diff(dataset, tmp_path, capsys):
    assert run(capsys, "train", "--data", str(dataset), "--out", str(tmp_path), *SMALL)[0] == 0
    code, _, err = run(capsys, "eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "model.ckpt"),
                       *SMALL, "--override", "model.d=8")
    assert code == 2 and '"d"' in err


def test_rela_impr_formatting():
    assert cli.format_rela_impr(0.7098, 0.7002) == "+4.80%"
    assert cli.format_rela_impr(0.6184, 0.6198) == "-1.17%"


def test_missing_data_file_exits_3(tmp_path, capsys):
    code, _, _ = run(capsys, "train", "--data", str(tmp_path / "none.jsonl"), "--out", str(tmp_path), *SMALL)
    assert code == 3


def test_zero_lambda_distill_student_byte_equal_to_train(dataset, tmp_path, capsys):
    d, t = tmp_path / "d", tmp_path / "t"
    assert run(capsys, "distill", "--data", str(dataset), "--out", str(d), "--seed", "2", *SMALL,
               "--override", "distill.lam=0", "--override", "teacher.d=8")[0] == 0
    assert run(capsys, "train", "--data", str(dataset), "--out", str(t), "--seed", "2", *SMALL)[0] == 0
    assert (d / "student.ckpt").read_bytes() == (t / "model.ckpt").read_bytes()
    assert load_checkpoint(d / "teacher.ckpt").cfg.d == 8
    header = open(d / "metrics.csv").readline().strip().split(",")
    assert header[:4] == ["step", "loss1", "loss2", "loss3"]


def test_scaling_injected_points(tmp_path, capsys):
    xs = [50, 100, 200, 500, 1000]
    pts = tmp_path / "pts.csv"
    write_points_csv(pts, [ScalingPoint(x, 0.72 - 0.3 / x ** 0.25) for x in xs])
    code, out, _ = run(capsys, "scaling", "--axis", "length", "--points", str(pts), "--out", str(tmp_path))
    assert code == 0
    fit = json.loads((tmp_path / "fit.json").read_text())
    assert fit["family"] == "L"
    for k, v in {"E": 0.72, "A": 0.3, "beta": 0.25}.items():
        assert fit["coefficients"][k] == pytest.approx(v, abs=1e-5)
    plot = list(csv.DictReader(open(tmp_path / "plot.csv")))
    assert {"x", "observed", "fitted"} == set(plot[0])


def test_scaling_single_point_fails(tmp_path, capsys):
    pts = tmp_path / "pts.csv"
    write_points_csv(pts, [ScalingPoint(10, 0.7)])
    code, _, err = run(capsys, "scaling", "--axis", "length", "--points", str(pts), "--out", str(tmp_path))
    assert code != 0 and "insufficient points" in err


def test_scaling_small_ladder_runs(tmp_path, capsys):
    code, out, _ = run(capsys, "scaling", "--axis", "length", "--out", str(tmp_path), *SMALL,
                       "--override", "scaling.lengths=1,2,4,6", "--override", "scaling.seeds=0")
    assert code == 0 and "L-form" in out
    assert len(list(csv.DictReader(open(tmp_path / "points.csv")))) == 4


def test_mask_dump_golden(capsys):
    code, out, _ = run(capsys, "mask-dump", "--L", "6", "--k", "2", "--r", "2", "--m2", "0")
    assert code == 0
    golden = "100000\n110000\n111000\n011100\n101110\n010111"
    assert out.strip() == golden
    brute = "\n".join("".join("1" if (j <= i and ((i - j) < 2 or (i - j) % 2 == 0)) else "0"
                              for j in range(6)) for i in range(6))
    assert golden == brute


def test_mask_dump_full_and_candidates(capsys):
    _, out, _ = run(capsys, "mask-dump", "--L", "5", "--k", "1", "--r", "1")
    assert out.strip() == "\n".join("1" * (i + 1) + "0" * (4 - i) for i in range(5))
    _, out, _ = run(capsys, "mask-dump", "--L", "5", "--k", "2", "--r", "2", "--m2", "3")
    rows = out.strip().split("\n")
    assert rows[5][:5] == rows[6][:5] == rows[7][:5]
    assert [r[5:] for r in rows[5:]] == ["100", "010", "001"]
    assert np.array_equal(structural_mask(5, 0, 2, 2), sparse_causal_mask(5, 2, 2))


def test_bench_sparse_baseline(tmp_path, capsys):
    code, out, _ = run(capsys, "bench-sparse", "--out", str(tmp_path), "--override", "bench.lengths=64",
                       "--override", "bench.trials=2")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "bench.csv")))
    assert [int(r["r"]) for r in rows] == [1, 2, 4, 8]
    assert float(rows[0]["measured_ratio"]) == 1.0
    assert float(rows[2]["predicted_ratio"]) == pytest.approx((2 + 64 / 4) / 64)
