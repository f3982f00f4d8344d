"""``suan`` command line: data generation, training, eval, distillation, scaling, sparse bench, masks."""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import scaling as S
from . import sparse as SP
from .experiments import sparse_timing as bench_sparse
from .model import CheckpointMismatch, ModelConfig, SuanModel, load_checkpoint, save_checkpoint
from .training import (
    DistillConfig, TrainConfig, TrainingDiverged, distill_train, encode_for, evaluate, rela_impr, train,
)

log = logging.getLogger("suan")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
EVAL_QUANTILE = 0.75


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config

@dataclasses.dataclass
class DistillSection:
    t: float = 2.0
    lam: float = -1.0           # negative means lambda = t


@dataclasses.dataclass
class ScalingSection:
    axis: str = "length"
    seeds: tuple = (0, 1, 2)
    sizes: tuple = ("4x1x1", "8x1x1", "8x2x2", "16x2x2", "16x4x4")
    lengths: tuple = (2, 4, 8, 16, 32)
    data_sizes: tuple = (10_000, 30_000, 100_000, 300_000)


@dataclasses.dataclass
class BenchSection:
    lengths: tuple = (256, 1024)
    dilations: tuple = (1, 2, 4, 8)
    window: int = 2
    trials: int = 5
    dim: int = 32


@dataclasses.dataclass
class RunConfig:
    """Every section of the keyed config file; [teacher] overrides [model] for the teacher."""

    data: D.GenConfig = dataclasses.field(default_factory=D.GenConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    teacher: dict = dataclasses.field(default_factory=dict)
    distill: DistillSection = dataclasses.field(default_factory=DistillSection)
    scaling: ScalingSection = dataclasses.field(default_factory=ScalingSection)
    bench: BenchSection = dataclasses.field(default_factory=BenchSection)

    SECTIONS = ("data", "model", "train", "teacher", "distill", "scaling", "bench")

    def teacher_config(self) -> ModelConfig:
        return self.model.replace(**self.teacher)

    def distill_config(self) -> DistillConfig:
        lam = None if self.distill.lam < 0 else self.distill.lam
        return DistillConfig(self.teacher_config(), self.model, self.distill.t, lam)

    def ladder(self) -> S.GradeLadder:
        sizes = [tuple(int(v) for v in s.split("x")) for s in self.scaling.sizes]
        return S.GradeLadder(sizes, list(self.scaling.lengths), list(self.scaling.data_sizes))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for name in self.SECTIONS:
            sec = getattr(self, name)
            items = sec.items() if isinstance(sec, dict) else dataclasses.asdict(sec).items()
            cp[name] = {k: _render(v) for k, v in items}
        out = []
        for name in self.SECTIONS:
            out.append(f"[{name}]")
            out += [f"{k} = {v}" for k, v in cp[name].items()]
            out.append("")
        return "\n".join(out)


def _render(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _coerce(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(current[0]) if current else int
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _apply(cfg: RunConfig, section: str, key: str, raw: str) -> None:
    name = f"{section}.{key}"
    if section not in RunConfig.SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (in key {name})")
    if section == "teacher":
        base = cfg.model
        if key not in {f.name for f in dataclasses.fields(ModelConfig)}:
            raise ConfigError(f"unknown config key {name}")
        cfg.teacher[key] = _coerce(raw, getattr(base, key), name)
        return
    target = getattr(cfg, section)
    if key not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"unknown config key {name}")
    setattr(target, key, _coerce(raw, getattr(target, key), name))


def load_run_config(path: str | None, overrides: list[str], seed: int | None) -> RunConfig:
    cfg = RunConfig()
    if path:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in cp.sections():
            for key, raw in cp[section].items():
                _apply(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(cfg, section, key, raw)
    if seed is not None:
        cfg.data.seed = cfg.model.seed = cfg.train.seed = seed
    cfg.model.mlp_dims = tuple(cfg.model.mlp_dims)
    try:
        cfg.data.validate()
        cfg.model.validate()
        cfg.train.validate()
        cfg.teacher_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def echo_config(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(cfg.to_ini())


# ------------------------------------------------------------------ helpers

def load_split(path) -> tuple[list, list]:
    rejected: list = []
    imps = list(D.load_jsonl(path, rejected))
    if rejected:
        print(f"rejected {len(rejected)} records (first at line {rejected[0][0]})")
    if not imps:
        raise D.DataError(f"{path}: no usable records")
    boundary = int(np.quantile([imp.exposure_ts for imp in imps], EVAL_QUANTILE))
    return D.time_split(imps, boundary)


def format_rela_impr(auc_model: float, auc_base: float) -> str:
    return f"{rela_impr(auc_model, auc_base):+.2f}%"


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    echo_config(cfg, out)
    logs = D.generate_synthetic_logs(cfg.data)
    n = D.write_jsonl(out / "data.jsonl", logs.impressions)
    rate = float(np.mean([imp.label for imp in logs.impressions]))
    print(f"records {n}  positive_rate {rate:.4f}  -> {out / 'data.jsonl'}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    echo_config(cfg, out)
    tr, ev = load_split(args.data)
    vocab = D.vocab_for(tr, cfg.model.table_size)
    model, mlog = train(SuanModel(cfg.model), tr, cfg.train, eval_set=ev or None, vocab=vocab)
    save_checkpoint(model, out / "model.ckpt")
    mlog.to_csv(out / "metrics.csv")
    print(f"train {len(tr)}  eval {len(ev)}  eval_auc {mlog.final_auc:.6f}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    model = load_checkpoint(args.checkpoint, expected=cfg.model)
    _, ev = load_split(args.data)
    value = evaluate(model, encode_for(model.cfg, ev, D.vocab_for(ev, model.cfg.table_size)))[0]
    line = f"eval_auc {value:.6f}"
    if args.base_auc is not None:
        line += f"  rela_impr {format_rela_impr(value, args.base_auc)}"
    print(line)
    return EXIT_OK


def cmd_distill(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    echo_config(cfg, out)
    dcfg = cfg.distill_config()
    try:
        dcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tr, ev = load_split(args.data)
    vocab = D.vocab_for(tr, cfg.model.table_size)
    teacher, student, mlog = distill_train(SuanModel(dcfg.teacher), SuanModel(dcfg.student), tr, dcfg,
                                           cfg.train, eval_set=ev or None, vocab=vocab)
    save_checkpoint(teacher, out / "teacher.ckpt")
    save_checkpoint(student, out / "student.ckpt")
    mlog.to_csv(out / "metrics.csv")
    print(f"student eval_auc {mlog.final_auc:.6f}  (t={dcfg.t}, lambda={dcfg.weight})")
    return EXIT_OK


def cmd_scaling(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    echo_config(cfg, out)
    axis = args.axis or cfg.scaling.axis
    if axis not in S.AXIS_FAMILY:
        raise ConfigError(f"unknown axis {axis!r}")
    if args.points:
        points = S.read_points_csv(args.points)
    else:
        ladder = cfg.ladder()
        try:
            ladder.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        failures, runs = [], []
        t0 = time.perf_counter()
        points = S.run_grade_ladder(S.LadderData.from_config(cfg.data), ladder, axis,
                                    list(cfg.scaling.seeds), cfg.model, cfg.train, failures, runs=runs)
        S.write_points_csv(out / "runs.csv", runs)
        for rung, why in failures:
            print(f"rung {rung} failed: {why}")
        print(f"sweep {axis}: {len(points)} points in {time.perf_counter() - t0:.1f}s")
    S.write_points_csv(out / "points.csv", points)
    fit = S.fit_power_law(points, S.AXIS_FAMILY[axis])
    S.write_fit_json(out / "fit.json", fit)
    S.write_plot_csv(out / "plot.csv", points, fit)
    coef = "  ".join(f"{k}={v:.6g}" for k, v in fit.form.coef.items())
    print(f"{fit.form.family}-form  {coef}  R2={fit.r2:.4f}  converged={fit.converged}")
    return EXIT_OK


def cmd_bench_sparse(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    echo_config(cfg, out)
    b = cfg.bench
    if 1 not in b.dilations:
        raise ConfigError("bench.dilations must include the r=1 baseline")
    rows = bench_sparse(b.lengths, sorted(b.dilations), b.window, b.trials, b.dim, cfg.model.seed)
    with open(out / "bench.csv", "w") as fh:
        fh.write("L,k,r,median_s,measured_ratio,predicted_ratio\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) for c in ("L", "k", "r", "median_s", "measured_ratio",
                                                    "predicted_ratio")) + "\n")
    print(f"{'L':>6} {'r':>3} {'median_ms':>10} {'measured':>9} {'predicted':>9}")
    for row in rows:
        print(f"{row['L']:>6} {row['r']:>3} {row['median_s'] * 1e3:>10.3f} "
              f"{row['measured_ratio']:>9.3f} {row['predicted_ratio']:>9.3f}")
    return EXIT_OK


def cmd_mask_dump(cfg: RunConfig, args) -> int:
    if min(args.L, args.k, args.r) < 1 or args.m2 < 0:
        raise ConfigError("L, k and r must be >= 1 and m2 >= 0")
    print(SP.render_mask(SP.structural_mask(args.L, args.m2, args.k, args.r)))
    return EXIT_OK


# ------------------------------------------------------------------ entry

COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "distill": cmd_distill,
    "scaling": cmd_scaling, "bench-sparse": cmd_bench_sparse, "mask-dump": cmd_mask_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="keyed INI config file")
    common.add_argument("--seed", type=int, help="seed for data, model init and shuffling")
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")

    parser = argparse.ArgumentParser(prog="suan")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic clickstream")
    for name in ("train", "distill"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--data", required=True)
    p = sub.add_parser("eval", parents=[common])
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base-auc", type=float)
    p = sub.add_parser("scaling", parents=[common])
    p.add_argument("--axis", choices=sorted(S.AXIS_FAMILY))
    p.add_argument("--points", help="fit an existing points CSV instead of running the ladder")
    sub.add_parser("bench-sparse", parents=[common])
    p = sub.add_parser("mask-dump", parents=[common])
    p.add_argument("--L", type=int, default=6)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--r", type=int, default=2)
    p.add_argument("--m2", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.override, args.seed)
        return COMMANDS[args.command](cfg, args)
    except CheckpointMismatch as exc:
        print(f"error: checkpoint does not match config: {json.dumps(exc.diff, default=str)}",
              file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
