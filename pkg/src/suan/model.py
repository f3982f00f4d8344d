"""SUAN: shared embeddings, a stack of unified attention blocks, and an MLP head."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from . import sparse
from .data import Batch
from .numerics import Param, Tensor

YEAR = 365 * 86400


@dataclass
class ModelConfig:
    d: int = 8
    l: int = 2
    h: int = 2
    L_max: int = 32
    n1: int = 4
    n2: int = 4
    n3: int = 4
    mlp_dims: tuple = (64, 32, 1)
    activation: str = "dice"
    use_swiglu: bool = True
    use_afnet: bool = True
    use_dual_alignment: bool = True
    use_target_aware: bool = True
    use_attention_bias: bool = True
    norm: str = "rms"
    norm_placement: str = "pre"
    pooling: str = "causal"
    time_buckets: int = 32
    pos_buckets: int = 0          # 0 -> L_max + 1
    window: int = 1               # k of the sparse mask
    dilation: int = 1             # r; 1 means full causal attention
    m2: int = 1
    table_size: int = 1 << 14
    init_std: float = 0.02        # embedding table; also projections when proj_init == "fixed"
    proj_init: str = "fan_in"     # fan_in: std 1/sqrt(fan_in) per projection
    norm_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.mlp_dims = tuple(int(x) for x in self.mlp_dims)

    @property
    def width(self) -> int:
        return self.n1 * self.d

    @property
    def n_pos_buckets(self) -> int:
        return self.pos_buckets or self.L_max + 1

    @property
    def bottleneck(self) -> int:
        return max(1, self.width // 4)

    def validate(self) -> None:
        if self.width % self.h:
            raise ValueError(f"n1*d={self.width} is not divisible by h={self.h}")
        if not self.mlp_dims or self.mlp_dims[-1] != 1:
            raise ValueError("mlp_dims must end in 1")
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if min(self.d, self.h, self.n1, self.n2, self.L_max, self.m2, self.window, self.dilation) < 1:
            raise ValueError("d, h, n1, n2, L_max, m2, window and dilation must be >= 1")
        if self.n1 > 4:
            raise ValueError("at most 4 regular fields are available")
        if self.activation not in ("dice", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("rms", "layer") or self.norm_placement not in ("pre", "post"):
            raise ValueError("norm must be rms|layer and norm_placement pre|post")
        if self.pooling not in ("causal", "global"):
            raise ValueError("pooling must be causal|global")
        if self.proj_init not in ("fan_in", "fixed"):
            raise ValueError("proj_init must be fan_in|fixed")
        if self.time_buckets < 2:
            raise ValueError("time_buckets must be >= 2")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["mlp_dims"] = list(self.mlp_dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def fingerprint(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


VARIANTS = {
    "A": {"use_swiglu": False},
    "B": {"use_afnet": False},
    "C": {"use_dual_alignment": False},
    "D": {"use_target_aware": False},
    "E": {"use_attention_bias": False},
    "F": {"norm": "layer"},
    "G": {"norm_placement": "post"},
}


# ------------------------------------------------------------------- shapes

def _group(name: str) -> str:
    if name == "embedding":
        return "embedding"
    if name.startswith("mlp."):
        return "mlp"
    part = name.split(".")[1]
    return {"wq": "self_attn", "wk": "self_attn", "wv": "self_attn", "wo": "self_attn",
            "f1": "self_attn", "f2": "self_attn",
            "cq": "afnet", "ck": "afnet", "cv": "afnet", "co": "afnet",
            "g1": "afnet", "g2": "afnet", "g3": "afnet",
            "ffn1": "ffn", "ffn2": "ffn", "ffn3": "ffn",
            "norm_gain": "norm", "norm_shift": "norm"}[part]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter's shape, in allocation order."""
    w, d = cfg.width, cfg.d
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.table_size, d)}
    for b in range(cfg.l):
        p = f"block{b}."
        shapes[p + "norm_gain"] = (w,)
        if cfg.norm == "layer":
            shapes[p + "norm_shift"] = (w,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + name] = (w, w)
        if cfg.use_attention_bias:
            shapes[p + "f1"] = (cfg.time_buckets, cfg.h)
            shapes[p + "f2"] = (cfg.n_pos_buckets, cfg.h)
        if cfg.use_afnet:
            shapes[p + "cq"] = (w, w)
            shapes[p + "ck"] = (d, w)
            shapes[p + "cv"] = (d, w)
            shapes[p + "co"] = (w, w)
            if cfg.use_dual_alignment:
                shapes[p + "g1"] = (w, cfg.bottleneck)
                shapes[p + "g2"] = (cfg.bottleneck, w)
                shapes[p + "g3"] = (cfg.bottleneck, w)
        shapes[p + "ffn1"] = (w, 3 * w)
        if cfg.use_swiglu:
            shapes[p + "ffn2"] = (w, 3 * w)
        shapes[p + "ffn3"] = (3 * w, w)
    width_in = mlp_input_width(cfg)
    for i, out in enumerate(cfg.mlp_dims):
        shapes[f"mlp.w{i}"] = (width_in, out)
        shapes[f"mlp.b{i}"] = (out,)
        if i < len(cfg.mlp_dims) - 1 and cfg.activation == "dice":
            shapes[f"mlp.alpha{i}"] = (out,)
        width_in = out
    return shapes


def mlp_input_width(cfg: ModelConfig) -> int:
    cand = cfg.width if cfg.use_target_aware else 2 * cfg.width
    return cand + cfg.n2 * cfg.d + cfg.n3 * cfg.d


def count_params(cfg: ModelConfig) -> dict[str, int]:
    counts = dict.fromkeys(("embedding", "self_attn", "afnet", "ffn", "norm", "mlp"), 0)
    for name, shape in param_shapes(cfg).items():
        counts[_group(name)] += int(np.prod(shape))
    counts["total_non_embedding"] = sum(v for k, v in counts.items() if k != "embedding")
    counts["non_embedding_without_mlp"] = counts["total_non_embedding"] - counts["mlp"]
    return counts


# -------------------------------------------------------------------- buckets

def time_bucket(dt, n_buckets: int = 32) -> np.ndarray:
    """0 for dt < 1s, then log-spaced buckets reaching the last one at one year."""
    dt = np.asarray(dt, dtype=np.float64)
    pos = np.maximum(dt, 1.0)
    b = 1 + np.floor((n_buckets - 2) * np.log(pos) / math.log(YEAR))
    return np.where(dt < 1, 0, np.minimum(b, n_buckets - 1)).astype(np.int64)


def position_bucket(dp, n_buckets: int) -> np.ndarray:
    return np.clip(np.asarray(dp), 0, n_buckets - 1).astype(np.int64)


def attention_bias(dt: np.ndarray, dp: np.ndarray, f1: Tensor, f2: Tensor) -> Tensor:
    """(B, h, L, L) additive bias ``f1[bucket(dt)] + f2[bucket(dp)]``, one table column per head."""
    tb = time_bucket(dt, f1.shape[0])
    pb = position_bucket(dp, f2.shape[0])
    by_time = nx.embedding(f1, tb)            # (B, L, L, h)
    by_pos = nx.embedding(f2, pb)             # (L, L, h)
    return (by_time + by_pos).transpose(0, 3, 1, 2)


# ------------------------------------------------------------------ layers

def split_heads(x: Tensor, h: int) -> Tensor:
    B, L, w = x.shape
    return x.reshape(B, L, h, w // h).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, h, L, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def self_attention_layer(E_norm: Tensor, bias: Tensor | None, allow: np.ndarray,
                         wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, h: int) -> Tensor:
    scale = 1.0 / math.sqrt(E_norm.shape[-1])
    q = split_heads(E_norm @ wq, h)
    k = split_heads(E_norm @ wk, h)
    v = split_heads(E_norm @ wv, h)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        scores = scores + bias
    att = nx.masked_softmax(scores, allow[:, None])
    return merge_heads(att @ v) @ wo


def cross_attention_layer(E_self: Tensor, E_p: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                          wo: Tensor, h: int) -> Tensor:
    if E_p.shape[1] == 0:
        raise ValueError("cross attention needs at least one profile feature")
    scale = 1.0 / math.sqrt(E_self.shape[-1])
    q = split_heads(E_self @ wq, h)
    k = split_heads(E_p @ wk, h)
    v = split_heads(E_p @ wv, h)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    att = nx.masked_softmax(scores, np.ones(scores.shape, dtype=bool))
    return merge_heads(att @ v) @ wo


def dual_alignment(E_self: Tensor, E_cross: Tensor, pool: np.ndarray, g1: Tensor, g2: Tensor,
                   g3: Tensor) -> tuple[Tensor, Tensor]:
    """Gate the two streams per dimension; returns (E_AFN, w_self).

    ``pool`` is a (B, L, L) row-stochastic averaging matrix that defines which
    rows feed each row's mean statistics.
    """
    e_mean = Tensor(pool) @ (E_self + E_cross)
    hidden = nx.relu(e_mean @ g1)
    # two-way softmax over (e_self, e_cross) == sigmoid of their difference
    w_self = nx.sigmoid_raw(hidden @ g2 - hidden @ g3)
    return w_self * E_self + (1.0 - w_self) * E_cross, w_self


def swiglu_ffn(x: Tensor, w1: Tensor, w2: Tensor | None, w3: Tensor) -> Tensor:
    if w2 is None:
        return nx.relu(x @ w1) @ w3
    return (nx.swish(x @ w1) * (x @ w2)) @ w3


def pooling_matrix(valid: np.ndarray, L_max: int, m2: int, mode: str) -> np.ndarray:
    """Averaging weights for the dual-alignment statistics.

    ``causal``: each row averages the valid rows it may causally see (with
    candidates isolated from each other), so behavior rows never depend on
    candidates. ``global``: every row gets the mean over all valid rows.
    """
    B, L_tot = valid.shape
    if mode == "global":
        w = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
        return np.broadcast_to(w[:, None, :], (B, L_tot, L_tot)).copy()
    see = sparse.batch_mask(valid, L_max, m2, L_tot, 1)
    return see / see.sum(axis=2, keepdims=True)


# ------------------------------------------------------------------- model

DICE_STATE = ("mean", "var", "acc_mean", "acc_var", "updates")


@dataclass
class ForwardOutput:
    E_block: Tensor
    logits: Tensor
    probs: Tensor


class SuanModel:
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Param] = {}
        for name, shape in param_shapes(cfg).items():
            self.params[name] = Param(self._init(name, shape), name)
        self.dice_stats = [nx.DiceStats(n) for n in cfg.mlp_dims[:-1]] if cfg.activation == "dice" else []

    def _init(self, name: str, shape) -> np.ndarray:
        # per-parameter streams keep shared weights identical across ablation variants
        rng = np.random.default_rng([self.cfg.seed, zlib.crc32(name.encode())])
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "norm_gain":
            return np.ones(shape)
        if leaf in ("norm_shift", "f1", "f2") or leaf.startswith("b") and name.startswith("mlp."):
            return np.zeros(shape)
        if leaf.startswith("alpha"):
            return np.zeros(shape)
        if name == "embedding" or self.cfg.proj_init == "fixed":
            return nx.truncated_normal(rng, shape, self.cfg.init_std)
        return nx.truncated_normal(rng, shape, 1.0 / math.sqrt(shape[0]))

    def parameters(self) -> list[Param]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    # --- forward pieces ---------------------------------------------------

    def norm(self, x: Tensor, b: int) -> Tensor:
        gain = self.params[f"block{b}.norm_gain"]
        if self.cfg.norm == "layer":
            return nx.layer_norm(x, gain, self.params[f"block{b}.norm_shift"], self.cfg.norm_eps)
        return nx.rms_norm(x, gain, self.cfg.norm_eps)

    def block(self, b: int, E_in: Tensor, E_p: Tensor, allow: np.ndarray, pool: np.ndarray,
              dt: np.ndarray, dp: np.ndarray, trace: dict | None = None) -> Tensor:
        cfg, P = self.cfg, self.params
        p = f"block{b}."
        E_norm = self.norm(E_in, b) if cfg.norm_placement == "pre" else E_in
        bias = attention_bias(dt, dp, P[p + "f1"], P[p + "f2"]) if cfg.use_attention_bias else None
        E_self = self_attention_layer(E_norm, bias, allow, P[p + "wq"], P[p + "wk"], P[p + "wv"],
                                      P[p + "wo"], cfg.h)
        E_cross = None
        if cfg.use_afnet:
            E_cross = cross_attention_layer(E_self, E_p, P[p + "cq"], P[p + "ck"], P[p + "cv"],
                                            P[p + "co"], cfg.h)
            if cfg.use_dual_alignment:
                E_afn, _ = dual_alignment(E_self, E_cross, pool, P[p + "g1"], P[p + "g2"], P[p + "g3"])
            else:
                E_afn = E_self + E_cross
        else:
            E_afn = E_self
        E_ffn = swiglu_ffn(E_afn, P[p + "ffn1"], P.get(p + "ffn2"), P[p + "ffn3"])
        E_out = E_in + E_ffn
        if cfg.norm_placement == "post":
            E_out = self.norm(E_out, b)
        if trace is not None:
            for key, val in (("E_norm", E_norm), ("bias", bias), ("E_self", E_self), ("E_cross", E_cross),
                             ("E_AFN", E_afn), ("E_FFN", E_ffn), ("E_out", E_out)):
                if val is not None:
                    trace[p + key] = val.data
        return E_out

    def encoder_inputs(self, batch: Batch):
        """Masks, pooling weights and relative time/position for the encoded rows."""
        cfg = self.cfg
        k, r = cfg.window, cfg.dilation
        if cfg.use_target_aware:
            valid, m2, ts, pos = batch.valid, batch.m2, batch.row_ts, batch.positions
        else:
            L = batch.L_max
            valid, m2, ts, pos = batch.valid[:, :L], 0, batch.row_ts[:, :L], batch.positions[:L]
        allow = sparse.batch_mask(valid, batch.L_max, m2, k, r)
        pool = pooling_matrix(valid, batch.L_max, m2, cfg.pooling)
        dt = np.maximum(ts[:, :, None] - ts[:, None, :], 0)
        dp = pos[:, None] - pos[None, :]
        return allow, pool, dt, dp

    def check_batch(self, batch: Batch) -> None:
        cfg = self.cfg
        if batch.L_max != cfg.L_max:
            raise ValueError(f"batch layout (L_max={batch.L_max}, m2={batch.m2}) does not match the model")
        if batch.tokens.shape[2] != cfg.n1 or batch.profile.shape[1] != cfg.n2 or batch.detail.shape[2] != cfg.n3:
            raise ValueError("batch feature counts do not match n1/n2/n3")
        if cfg.pooling == "global" and batch.m2 > 1:
            raise ValueError("global pooling couples packed candidates; use causal pooling")
        if not batch.cand_valid.any():
            raise ValueError("no valid candidate row")

    def forward(self, batch: Batch, train: bool = False, trace: dict | None = None) -> ForwardOutput:
        self.check_batch(batch)
        cfg, P = self.cfg, self.params
        B, L = len(batch), batch.L_max
        table = P["embedding"]
        E_p = nx.embedding(table, batch.profile)                       # (B, n2, d)
        if cfg.use_target_aware:
            tokens = batch.tokens
        else:
            tokens = batch.tokens[:, :L]
        E = nx.embedding(table, tokens).reshape(B, tokens.shape[1], cfg.width)
        allow, pool, dt, dp = self.encoder_inputs(batch)
        for b in range(cfg.l):
            E = self.block(b, E, E_p, allow, pool, dt, dp, trace)

        m2 = batch.m2
        if cfg.use_target_aware:
            parts = [E[:, L:, :]]
        else:
            last = E[:, L - 1:L, :]
            cand_raw = nx.embedding(table, batch.tokens[:, L:]).reshape(B, m2, cfg.width)
            parts = [nx.broadcast_to(last, (B, m2, cfg.width)), cand_raw]
        e_p = nx.broadcast_to(E_p.reshape(B, 1, cfg.n2 * cfg.d), (B, m2, cfg.n2 * cfg.d))
        e_other = nx.embedding(table, batch.detail).reshape(B, m2, cfg.n3 * cfg.d)
        x = nx.concat(parts + [e_p, e_other], axis=-1).reshape(B * m2, mlp_input_width(cfg))
        x = x[np.flatnonzero(batch.cand_valid.ravel())]
        z = self.mlp(x, train)
        return ForwardOutput(E, z, nx.sigmoid(z))

    def mlp(self, x: Tensor, train: bool) -> Tensor:
        cfg, P = self.cfg, self.params
        last = len(cfg.mlp_dims) - 1
        for i in range(len(cfg.mlp_dims)):
            x = x @ P[f"mlp.w{i}"] + P[f"mlp.b{i}"]
            if i < last:
                if cfg.activation == "dice":
                    x = nx.dice(x, P[f"mlp.alpha{i}"], self.dice_stats[i], train)
                else:
                    x = nx.relu(x)
        return x.reshape(x.shape[0])

    def predict_batch(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, train=False).probs.data

    def logits_batch(self, batch: Batch) -> np.ndarray:
        return self.forward(batch, train=False).logits.data

    # --- state --------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for i, s in enumerate(self.dice_stats):
            for key in DICE_STATE:
                out[f"dice{i}.{key}"] = np.asarray(getattr(s, key), dtype=np.float64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data[...] = state[name]
        for i, s in enumerate(self.dice_stats):
            for key in DICE_STATE:
                setattr(s, key, np.array(state[f"dice{i}.{key}"], dtype=np.float64))
            s.updates = int(s.updates)

    def copy(self) -> "SuanModel":
        twin = SuanModel(self.cfg.replace())
        twin.load_state({k: v.copy() for k, v in self.state().items()})
        return twin


def predict(model: SuanModel, batch: Batch) -> ForwardOutput:
    return model.forward(batch, train=False)


# --------------------------------------------------------------- checkpoint

MAGIC = b"SUANCKPT1\n"


class CheckpointMismatch(ValueError):
    def __init__(self, diff: dict):
        self.diff = diff
        lines = [f"  {k}: checkpoint={a!r} expected={b!r}" for k, (a, b) in sorted(diff.items())]
        super().__init__("checkpoint config does not match:\n" + "\n".join(lines))


def save_checkpoint(model: SuanModel, path) -> None:
    """Magic line, 8-byte header length, JSON header, then raw little-endian float64 tensors."""
    state = model.state()
    entries, offset = [], 0
    for name, arr in state.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": model.cfg.to_dict(), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in state.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def config_diff(a: ModelConfig, b: ModelConfig) -> dict:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


def load_checkpoint(path, expected: ModelConfig | None = None) -> SuanModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path} is not a SUAN checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    header = json.loads(raw[pos + 8:pos + 8 + n])
    cfg = ModelConfig.from_dict(header["config"])
    if expected is not None:
        diff = config_diff(cfg, expected)
        if diff:
            raise CheckpointMismatch(diff)
    body = raw[pos + 8 + n:]
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        state[e["name"]] = np.frombuffer(body, dtype="<f8", count=count,
                                         offset=e["offset"]).reshape(e["shape"]).copy()
    model = SuanModel(cfg)
    model.load_state(state)
    return model
