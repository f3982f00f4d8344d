"""Grade-ladder sweeps and saturating power-law fits of AUC against C, L and D."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import GenConfig, SyntheticLogs, generate_synthetic_logs, time_split, vocab_for
from .model import ModelConfig, SuanModel, count_params
from .training import TrainConfig, TrainingDiverged, encode_for, evaluate, train

log = logging.getLogger(__name__)

# coefficient names per family; the last entry is the exponent
FAMILIES = {
    "C": ("E", "A", "B1", "alpha"),
    "L": ("E", "A", "beta"),
    "D": ("E", "A", "gamma"),
}
AXIS_FAMILY = {"model_size": "C", "length": "L", "data_size": "D"}
B1_CAP = 0.9
# an exponent this small means the curve has collapsed towards a logarithm
MIN_LOG_EXPONENT = math.log(1e-12)
DEGENERATE_EXPONENT = 1e-6


@dataclass
class ScalingPoint:
    x: float
    auc: float
    seed: int | None = None
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.x > 0:
            raise ValueError(f"scaling point x must be positive, got {self.x}")
        if not 0.0 < self.auc < 1.0:
            raise ValueError(f"scaling point auc must lie in (0, 1), got {self.auc}")


@dataclass
class PowerLawForm:
    family: str
    coef: dict[str, float]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {sorted(FAMILIES)}")
        missing = set(FAMILIES[self.family]) - set(self.coef)
        if missing:
            raise ValueError(f"missing coefficients {sorted(missing)}")
        if self.coef["A"] < 0 or not self.exponent > 0:
            raise ValueError("power law needs A >= 0 and a positive exponent")

    @property
    def exponent(self) -> float:
        return self.coef[FAMILIES[self.family][-1]]

    @property
    def shift(self) -> float:
        return self.coef.get("B1", 0.0)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.coef["A"] == 0.0:
            return np.full(x.shape, self.coef["E"])
        with np.errstate(over="ignore"):
            return self.coef["E"] - self.coef["A"] / (x - self.shift) ** self.exponent


@dataclass
class FitResult:
    form: PowerLawForm
    r2: float
    residuals: np.ndarray
    converged: bool
    restarts: int
    degenerate: bool = False
    cost: float = math.nan

    def to_dict(self) -> dict:
        return {"family": self.form.family, "coefficients": self.form.coef, "r2": self.r2,
                "converged": self.converged, "restarts": self.restarts,
                "degenerate": self.degenerate, "cost": self.cost,
                "residuals": [float(v) for v in self.residuals]}


def r_squared(points: Sequence[ScalingPoint], form: PowerLawForm) -> float:
    if len(points) < 2:
        raise ValueError("r_squared needs at least 2 points")
    x = np.array([p.x for p in points])
    y = np.array([p.auc for p in points])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("r_squared is undefined when every auc is equal")
    ss_res = float(((y - form.predict(x)) ** 2).sum())
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------- fitting
#
# Unconstrained coordinates u map to coefficients as
#   E = 0.5 + 0.5 * sigmoid(u0), A = exp(u1), exponent = exp(u_last), B1 = cap - exp(u2)
# which keeps E in (0.5, 1), A > 0, the exponent > 0 and B1 below 0.9 * min(x).

def _e_of(u0):
    return 0.5 + 0.5 / (1.0 + np.exp(-u0))

def _decode(u: np.ndarray, family: str, cap: float) -> dict[str, float]:
    names = FAMILIES[family]
    coef = {"E": _e_of(u[0]), "A": math.exp(min(u[1], 700.0)),
            names[-1]: math.exp(min(max(u[-1], MIN_LOG_EXPONENT), 700.0))}
    if family == "C":
        coef["B1"] = cap - math.exp(u[2])
    return {k: float(v) for k, v in coef.items()}


def _encode(coef: dict, family: str, cap: float) -> np.ndarray:
    names = FAMILIES[family]
    q = (coef["E"] - 0.5) / 0.5
    u = [math.log(q / (1.0 - q)), math.log(coef["A"])]
    if family == "C":
        u.append(math.log(cap - coef["B1"]))
    u.append(math.log(coef[names[-1]]))
    return np.array(u, dtype=np.float64)


def _residual_and_jacobian(u: np.ndarray, x: np.ndarray, y: np.ndarray, family: str, cap: float):
    A, p = np.exp(u[1]), np.exp(u[-1])
    if family == "C":
        gap = np.exp(u[2])
        base = x - cap + gap
    else:
        base = x
    powv = base ** (-p)
    E = _e_of(u[0])
    f = E - A * powv
    J = np.empty((len(x), len(u)))
    J[:, 0] = 2.0 * (E - 0.5) * (1.0 - E)
    J[:, 1] = -A * powv
    J[:, -1] = A * powv * np.log(base) * p
    if family == "C":
        # df/dB1 = -A p base^(-p-1); dB1/du2 = -gap
        J[:, 2] = A * p * powv / base * gap
    return f - y, J


def levenberg_marquardt(u0: np.ndarray, x: np.ndarray, y: np.ndarray, family: str, cap: float,
                        max_iter: int = 2000, tol: float = 1e-15) -> tuple[np.ndarray, float, bool]:
    """Damped Gauss-Newton; a step is kept only if it lowers the squared residual."""
    u = u0.copy()
    r, J = _residual_and_jacobian(u, x, y, family, cap)
    cost = float(r @ r)
    if not math.isfinite(cost):
        return u, math.inf, False
    lam = 1e-3
    for _ in range(max_iter):
        g = J.T @ r
        H = J.T @ J
        if np.abs(g).max() < 1e-30 or cost < 1e-32:
            return u, cost, True
        accepted = False
        while lam < 1e16:
            damp = lam * (np.diag(H) + 1e-12)
            try:
                step = np.linalg.solve(H + np.diag(damp), -g)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            cand = u + step
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                r_new, J_new = _residual_and_jacobian(cand, x, y, family, cap)
                new_cost = float(r_new @ r_new)
            if math.isfinite(new_cost) and new_cost < cost:
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            # no downhill step at any damping: a stationary point
            return u, cost, True
        small = cost - new_cost <= tol * max(cost, 1e-300) or np.abs(step).max() < 1e-14
        u, r, J, cost = cand, r_new, J_new, new_cost
        lam = max(lam / 9.0, 1e-12)
        if small:
            return u, cost, True
    return u, cost, False


def _starts(x: np.ndarray, y: np.ndarray, family: str, cap: float, n: int,
            rng: np.random.Generator) -> list[np.ndarray]:
    spread = max(float(y.max() - y.min()), 1e-4)
    out = []
    for i in range(n):
        E = float(np.clip(y.max() + spread * rng.uniform(0.05, 2.0), 0.501, 0.999))
        p = float(math.exp(rng.uniform(math.log(0.05), math.log(2.0))))
        if family == "C":
            B1 = cap - float(cap * 10 ** rng.uniform(-3, 1)) if cap > 0 else -float(rng.uniform(0, 1))
            base = x - B1
        else:
            B1, base = 0.0, x
        # least-squares amplitude for the sampled (E, exponent, B1)
        basis = base ** (-p)
        A = float(basis @ (E - y) / (basis @ basis))
        A = A if A > 0 else spread
        coef = {"E": E, "A": A, FAMILIES[family][-1]: p}
        if family == "C":
            coef["B1"] = B1
        out.append(_encode(coef, family, cap))
    return out


def fit_power_law(points: Sequence[ScalingPoint], family: str, n_starts: int = 24,
                  seed: int = 0) -> FitResult:
    """Multi-start least-squares fit of one saturating power-law family."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    k = len(FAMILIES[family])
    if len(points) < k + 1:
        raise ValueError(f"insufficient points: {family}-form needs at least {k + 1}, got {len(points)}")
    if n_starts < 16:
        raise ValueError("at least 16 starts are required")
    x = np.array([p.x for p in points], dtype=np.float64)
    y = np.array([p.auc for p in points], dtype=np.float64)
    if np.ptp(x) == 0:
        raise ValueError("degenerate data: every x is identical")
    if len(np.unique(x)) != len(x):
        raise ValueError("x values must be distinct")
    cap = B1_CAP * float(x.min())
    if np.ptp(y) == 0:
        form = _flat_form(family, float(y[0]))
        return FitResult(form, math.nan, form.predict(x) - y, True, 0, degenerate=True, cost=0.0)
    rng = np.random.default_rng(seed)
    best = None
    for u0 in _starts(x, y, family, cap, n_starts, rng):
        u, cost, ok = levenberg_marquardt(u0, x, y, family, cap)
        if best is None or cost < best[1]:
            best = (u, cost, ok)
    u, cost, ok = best
    form = PowerLawForm(family, _decode(u, family, cap))
    degenerate = form.exponent < DEGENERATE_EXPONENT
    cost = float(((form.predict(x) - y) ** 2).sum())
    # A = 0 sits on the boundary the exp() coordinates only approach
    flat = _flat_form(family, float(np.clip(y.mean(), 0.5 + 1e-12, 1 - 1e-12)))
    flat_cost = float(((flat.predict(x) - y) ** 2).sum())
    if flat_cost <= cost:
        form, cost, ok, degenerate = flat, flat_cost, True, True
    resid = y - form.predict(x)
    return FitResult(form, r_squared(points, form), resid, ok and math.isfinite(cost), n_starts,
                     degenerate=degenerate, cost=cost)


def _flat_form(family: str, E: float) -> PowerLawForm:
    coef = {"E": E, "A": 0.0, FAMILIES[family][-1]: 1.0}
    if family == "C":
        coef["B1"] = 0.0
    return PowerLawForm(family, coef)


# ------------------------------------------------------------- grade ladder

@dataclass
class GradeLadder:
    sizes: list[tuple[int, int, int]] = field(default_factory=lambda: [
        (4, 1, 1), (8, 1, 1), (8, 2, 2), (16, 2, 2), (16, 4, 4)])
    lengths: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    data_sizes: list[int] = field(default_factory=lambda: [10_000, 30_000, 100_000, 300_000])

    def validate(self) -> None:
        for name in ("sizes", "lengths", "data_sizes"):
            values = [tuple(v) if isinstance(v, (list, tuple)) else v for v in getattr(self, name)]
            if not values:
                raise ValueError(f"ladder axis {name} is empty")
            if values != sorted(values) or len(set(values)) != len(values):
                raise ValueError(f"ladder axis {name} must be strictly ascending")

    def rungs(self, axis: str) -> list:
        if axis == "model_size":
            return [tuple(s) for s in self.sizes]
        if axis == "length":
            return list(self.lengths)
        if axis == "data_size":
            return list(self.data_sizes)
        raise ValueError(f"unknown axis {axis!r}; expected one of {sorted(AXIS_FAMILY)}")


# paper-scale configurations, for cost estimates only
TABLE4_SIZES = [(8, 1, 1), (8, 2, 2), (16, 4, 4), (32, 8, 8), (144, 12, 12)]
TABLE4_LENGTHS = [50, 100, 200, 500, 1000]


def rung_config(base: ModelConfig, axis: str, rung) -> ModelConfig:
    if axis == "model_size":
        d, l, h = rung
        return base.replace(d=d, l=l, h=h)
    if axis == "length":
        return base.replace(L_max=int(rung))
    return base


def rung_x(cfg: ModelConfig, axis: str, rung) -> float:
    if axis == "model_size":
        return float(count_params(cfg)["total_non_embedding"])
    return float(rung)


@dataclass
class LadderData:
    """A generated dataset with its fixed time split."""

    train: list
    held: list

    @classmethod
    def from_config(cls, gen: GenConfig) -> "LadderData":
        logs: SyntheticLogs = generate_synthetic_logs(gen)
        train_set, held = time_split(logs.impressions, logs.boundary_ts)
        return cls(train_set, held)


def train_and_eval(cfg: ModelConfig, data: LadderData, tcfg: TrainConfig, n_train: int | None = None,
                   cache: dict | None = None) -> float:
    """Eval AUC of one freshly initialised model; memoised in ``cache`` when given."""
    key = (cfg.fingerprint(), tcfg.seed, tcfg.lr, tcfg.epochs, tcfg.batch_size, n_train,
           len(data.train), len(data.held))
    if cache is not None and key in cache:
        return cache[key]
    subset = data.train if n_train is None else data.train[:n_train]
    if n_train is not None and n_train > len(data.train):
        raise ValueError(f"data size {n_train} exceeds the {len(data.train)} training impressions")
    vocab = vocab_for(data.train, cfg.table_size)
    model = SuanModel(cfg)
    train(model, subset, tcfg, vocab=vocab)
    value = evaluate(model, encode_for(cfg, data.held, vocab))[0]
    if cache is not None:
        cache[key] = value
    return value


def run_grade_ladder(data: LadderData, ladder: GradeLadder, axis: str, seeds: Sequence[int],
                     base: ModelConfig | None = None, tcfg: TrainConfig | None = None,
                     failures: list | None = None, cache: dict | None = None,
                     runs: list | None = None) -> list[ScalingPoint]:
    """One model per (rung, seed); returns seed-averaged points in rung order.

    Rungs whose training diverges are dropped and reported through ``failures``.
    Per-seed results are appended to ``runs`` when given.
    """
    ladder.validate()
    if not seeds:
        raise ValueError("at least one seed is required")
    base = base or ModelConfig()
    tcfg = tcfg or TrainConfig()
    points = []
    for rung in ladder.rungs(axis):
        cfg = rung_config(base, axis, rung)
        n_train = int(rung) if axis == "data_size" else None
        aucs = []
        try:
            for s in seeds:
                value = train_and_eval(cfg.replace(seed=s), data, _with_seed(tcfg, s), n_train, cache)
                aucs.append(value)
                if runs is not None:
                    runs.append(ScalingPoint(rung_x(cfg, axis, rung), value, s, cfg.fingerprint(),
                                             {"rung": rung}))
        except TrainingDiverged as exc:
            log.warning("rung %s failed: %s", rung, exc)
            if failures is not None:
                failures.append((rung, str(exc)))
            continue
        points.append(ScalingPoint(rung_x(cfg, axis, rung), float(np.mean(aucs)), None,
                                   cfg.fingerprint(), {"rung": rung, "seed_aucs": aucs}))
    return points


def _with_seed(tcfg: TrainConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**asdict(tcfg), "seed": seed})


# ------------------------------------------------------------------- output

def write_points_csv(path, points: Sequence[ScalingPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "auc", "seed", "config_hash"])
        for p in points:
            w.writerow([repr(p.x), repr(p.auc), "mean" if p.seed is None else p.seed, p.config_hash])


def read_points_csv(path) -> list[ScalingPoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"x", "auc"} <= set(rows[0]):
        raise ValueError(f"{path}: points CSV needs x and auc columns")
    return [ScalingPoint(float(r["x"]), float(r["auc"]),
                         None if r.get("seed") in (None, "", "mean") else int(r["seed"]),
                         r.get("config_hash", "") or "") for r in rows]


def write_fit_json(path, fit: FitResult) -> None:
    with open(path, "w") as fh:
        json.dump(fit.to_dict(), fh, indent=2, sort_keys=True)


def write_plot_csv(path, points: Sequence[ScalingPoint], fit: FitResult, n_grid: int = 50) -> None:
    """Observed points plus the fitted curve on a log-spaced grid."""
    xs = np.array([p.x for p in points])
    grid = np.geomspace(xs.min(), xs.max(), n_grid)
    observed = {p.x: p.auc for p in points}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "observed", "fitted"])
        for x in sorted(set(grid) | set(observed)):
            w.writerow([repr(float(x)), repr(observed[x]) if x in observed else "",
                        repr(float(fit.form.predict(x)))])
