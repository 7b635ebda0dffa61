"""Two-stream multi-head classifier, trained from scratch in numpy.

Each branch is a small stack of [3x3 conv -> ReLU -> 2x2 average pool]
blocks with filter count doubling per block, followed by global average
pooling and a linear map to a fixed-dimension embedding. The two branch
embeddings are concatenated into a joint embedding, and three sigmoid
heads (branch A, branch B, joint) each apply one fully connected layer.

Everything runs in float64 so gradient checks can be tight. All
randomness is seeded and parameter draws follow a fixed name order, so
identical configs produce bit-identical parameter sets.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadCheckpointFormat,
    CheckpointShapeMismatch,
    CheckpointVersionMismatch,
    TruncatedCheckpoint,
)
from .losses import LossParams, LossValue, combined_loss

_SIGMOID_CLIP = 1e-12


@dataclass(frozen=True)
class NetworkConfig:
    input_height: int = 32
    input_width: int = 32
    channels_a: int = 3
    channels_b: int = 1
    blocks_per_branch: int = 3
    base_filters: int = 16
    embedding_dim: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.blocks_per_branch < 1 or self.embedding_dim < 1:
            raise ValueError("incompatible geometry: blocks and embedding must be >= 1")
        div = 2**self.blocks_per_branch
        if self.input_height % div or self.input_width % div:
            raise ValueError(
                "incompatible geometry: input dims must be divisible by "
                f"2^blocks_per_branch = {div}"
            )


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must be in [0, 1)")


@dataclass
class ParameterSet:
    """Named weight arrays plus Adam state, owned by one trainer at a time."""

    config: NetworkConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            step=self.step,
        )


@dataclass(frozen=True)
class ForwardOutput:
    e_p: np.ndarray  # (N, D) branch-A embeddings
    e_q: np.ndarray  # (N, D) branch-B embeddings
    e_r: np.ndarray  # (N, 2D) concat(e_p, e_q)
    p: np.ndarray  # (N,) branch-A head probability
    q: np.ndarray  # (N,)
    r: np.ndarray  # (N,)


def _branch_channels(config: NetworkConfig, in_channels: int) -> list[tuple[int, int]]:
    chans = []
    c_in = in_channels
    for i in range(config.blocks_per_branch):
        c_out = config.base_filters * 2**i
        chans.append((c_in, c_out))
        c_in = c_out
    return chans


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    d = config.embedding_dim
    for branch, c0 in (("a", config.channels_a), ("b", config.channels_b)):
        for i, (c_in, c_out) in enumerate(_branch_channels(config, c0)):
            shapes[f"branch_{branch}/conv{i}/W"] = (c_out, c_in, 3, 3)
            shapes[f"branch_{branch}/conv{i}/b"] = (c_out,)
        c_last = config.base_filters * 2 ** (config.blocks_per_branch - 1)
        shapes[f"branch_{branch}/embed/W"] = (d, c_last)
        shapes[f"branch_{branch}/embed/b"] = (d,)
    shapes["head_a/W"] = (d,)
    shapes["head_a/b"] = ()
    shapes["head_b/W"] = (d,)
    shapes["head_b/b"] = ()
    shapes["head_joint/W"] = (2 * d,)
    shapes["head_joint/b"] = ()
    return shapes


def init_network(config: NetworkConfig) -> ParameterSet:
    """Deterministic fan-in-scaled initialization; biases start at zero.

    Conv weights use sqrt(2/fan_in) (they feed a rectifier), linear maps
    use sqrt(1/fan_in). Draws happen in sorted name order from one
    seeded generator, so equal configs give bit-identical parameters.
    """
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(parameter_shapes(config).items()):
        if name.endswith("/b"):
            params[name] = np.zeros(shape, dtype=np.float64)
            continue
        if "/conv" in name:
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(2.0 / fan_in)
        else:
            fan_in = shape[-1]
            std = np.sqrt(1.0 / fan_in)
        params[name] = rng.normal(0.0, std, size=shape)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return ParameterSet(
        config=config,
        params=params,
        adam_m={k: v.copy() for k, v in zeros.items()},
        adam_v=zeros,
        step=0,
    )


# ---------------------------------------------------------------------------
# primitives


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep strictly inside (0, 1) even for saturating logits
    return np.clip(out, _SIGMOID_CLIP, 1.0 - _SIGMOID_CLIP)


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padding stride-1 3x3 convolution; returns (out, im2col cache)."""
    n, c, h, wd = x.shape
    f = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, wd), dtype=x.dtype)
    for idx in range(9):
        dy, dx = divmod(idx, 3)
        cols[:, :, idx] = xp[:, :, dy : dy + h, dx : dx + wd]
    cols2 = cols.reshape(n, c * 9, h * wd)
    wr = w.reshape(f, c * 9)
    out = np.matmul(wr, cols2).reshape(n, f, h, wd) + b[None, :, None, None]
    return out, cols2


def _conv2d_backward(dout: np.ndarray, cols2: np.ndarray, w: np.ndarray,
                     x_shape: tuple[int, ...]):
    n, c, h, wd = x_shape
    f = w.shape[0]
    dout2 = dout.reshape(n, f, h * wd)
    dw = np.matmul(dout2, cols2.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols2 = np.matmul(w.reshape(f, c * 9).T, dout2)  # (n, c*9, h*w)
    dcols = dcols2.reshape(n, c, 9, h, wd)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dout.dtype)
    for idx in range(9):
        dy, dx = divmod(idx, 3)
        dxp[:, :, dy : dy + h, dx : dx + wd] += dcols[:, :, idx]
    return dxp[:, :, 1 : h + 1, 1 : wd + 1], dw, db


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


class _BranchCache:
    __slots__ = ("x", "conv_cols", "pre_relu", "conv_in_shapes", "gap_in", "gap")

    def __init__(self):
        self.conv_cols: list[np.ndarray] = []
        self.pre_relu: list[np.ndarray] = []
        self.conv_in_shapes: list[tuple[int, ...]] = []


def _branch_forward(params: ParameterSet, branch: str, x: np.ndarray):
    cfg = params.config
    cache = _BranchCache()
    cache.x = x
    cur = x - 0.5  # rasters arrive in [0, 1]; center for better conditioning
    for i in range(cfg.blocks_per_branch):
        w = params.params[f"branch_{branch}/conv{i}/W"]
        b = params.params[f"branch_{branch}/conv{i}/b"]
        cache.conv_in_shapes.append(cur.shape)
        out, cols2 = _conv2d_forward(cur, w, b)
        cache.conv_cols.append(cols2)
        cache.pre_relu.append(out)
        cur = _avgpool2(np.maximum(out, 0.0))
    cache.gap_in = cur
    g = cur.mean(axis=(2, 3))  # (N, C_last)
    cache.gap = g
    we = params.params[f"branch_{branch}/embed/W"]
    be = params.params[f"branch_{branch}/embed/b"]
    emb = g @ we.T + be
    return emb, cache


def _branch_backward(params: ParameterSet, branch: str, cache: _BranchCache,
                     demb: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    cfg = params.config
    we = params.params[f"branch_{branch}/embed/W"]
    grads[f"branch_{branch}/embed/W"] += demb.T @ cache.gap
    grads[f"branch_{branch}/embed/b"] += demb.sum(axis=0)
    dg = demb @ we  # (N, C_last)
    n, c, h, w = cache.gap_in.shape
    dcur = np.broadcast_to(dg[:, :, None, None] / (h * w), cache.gap_in.shape).copy()
    for i in reversed(range(cfg.blocks_per_branch)):
        dpre_pool = _avgpool2_backward(dcur)
        dpre_relu = dpre_pool * (cache.pre_relu[i] > 0)
        wname = f"branch_{branch}/conv{i}/W"
        dcur, dw, db = _conv2d_backward(
            dpre_relu, cache.conv_cols[i], params.params[wname], cache.conv_in_shapes[i]
        )
        grads[wname] += dw
        grads[f"branch_{branch}/conv{i}/b"] += db


def _head_forward(params: ParameterSet, head: str, emb: np.ndarray):
    w = params.params[f"head_{head}/W"]
    b = params.params[f"head_{head}/b"]
    logit = emb @ w + b
    return _sigmoid(logit)


def _as_batch(x: np.ndarray, channels: int, cfg: NetworkConfig, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (channels, cfg.input_height, cfg.input_width):
        raise ValueError(
            f"{what} shape {arr.shape} incompatible with config "
            f"(batch, {channels}, {cfg.input_height}, {cfg.input_width})"
        )
    return arr


def forward(params: ParameterSet, x_a: np.ndarray, x_b: np.ndarray) -> ForwardOutput:
    out, _ = forward_cached(params, x_a, x_b)
    return out


def forward_cached(params: ParameterSet, x_a: np.ndarray, x_b: np.ndarray):
    cfg = params.config
    xa = _as_batch(x_a, cfg.channels_a, cfg, "channel-A input")
    xb = _as_batch(x_b, cfg.channels_b, cfg, "channel-B input")
    if xa.shape[0] != xb.shape[0]:
        raise ValueError("channel batches disagree in length")
    e_p, cache_a = _branch_forward(params, "a", xa)
    e_q, cache_b = _branch_forward(params, "b", xb)
    e_r = np.concatenate([e_p, e_q], axis=1)
    out = ForwardOutput(
        e_p=e_p,
        e_q=e_q,
        e_r=e_r,
        p=_head_forward(params, "a", e_p),
        q=_head_forward(params, "b", e_q),
        r=_head_forward(params, "joint", e_r),
    )
    return out, (cache_a, cache_b)


def backward_from_head_grads(
    params: ParameterSet,
    output: ForwardOutput,
    caches,
    d_p: np.ndarray,
    d_q: np.ndarray,
    d_r: np.ndarray,
) -> dict[str, np.ndarray]:
    """Parameter gradients of the batch-mean loss, given per-sample partials
    w.r.t. the three head probabilities."""
    cache_a, cache_b = caches
    n = output.p.shape[0]
    d = params.config.embedding_dim
    grads = {k: np.zeros_like(v) for k, v in params.params.items()}

    def head_back(head: str, emb: np.ndarray, prob: np.ndarray, dprob: np.ndarray):
        dlogit = dprob * prob * (1.0 - prob) / n  # (N,)
        grads[f"head_{head}/W"] += dlogit @ emb
        grads[f"head_{head}/b"] += dlogit.sum()
        return dlogit[:, None] * params.params[f"head_{head}/W"][None, :]

    demb_a = head_back("a", output.e_p, output.p, np.asarray(d_p, dtype=np.float64))
    demb_b = head_back("b", output.e_q, output.q, np.asarray(d_q, dtype=np.float64))
    demb_r = head_back("joint", output.e_r, output.r, np.asarray(d_r, dtype=np.float64))
    demb_a = demb_a + demb_r[:, :d]
    demb_b = demb_b + demb_r[:, d:]
    _branch_backward(params, "a", cache_a, demb_a, grads)
    _branch_backward(params, "b", cache_b, demb_b, grads)
    return grads


def backward(
    params: ParameterSet,
    x_a: np.ndarray,
    x_b: np.ndarray,
    labels: Sequence[int],
    loss_params: LossParams,
):
    """Gradients of the batch-mean combined loss for every parameter.

    Returns (grads, batch LossValue, ForwardOutput). Joint-head gradients
    reach both branches through the concatenated embedding; each
    cross-modal term also routes gradient into the other branch through
    the damping weight unless loss_params.detach_weight is set.
    """
    output, caches = forward_cached(params, x_a, x_b)
    ys = np.asarray(labels, dtype=np.int64)
    if output.p.shape[0] != ys.shape[0]:
        raise ValueError("labels disagree with batch length")
    if ys.shape[0] == 0:
        raise ValueError("empty batch")
    n = ys.shape[0]
    d_p = np.empty(n)
    d_q = np.empty(n)
    d_r = np.empty(n)
    total = 0.0
    for i in range(n):
        lv = combined_loss(
            float(output.p[i]), float(output.q[i]), float(output.r[i]),
            int(ys[i]), loss_params,
        )
        total += lv.value
        d_p[i], d_q[i], d_r[i] = lv.d_p, lv.d_q, lv.d_r
    grads = backward_from_head_grads(params, output, caches, d_p, d_q, d_r)
    batch = LossValue(
        value=total / n, d_p=d_p.mean(), d_q=d_q.mean(), d_r=d_r.mean()
    )
    return grads, batch, output


def adam_step(
    params: ParameterSet, grads: dict[str, np.ndarray], opt: OptimizerConfig
) -> ParameterSet:
    """One Adam update with bias correction and decoupled weight decay
    (a multiplicative shrink applied before the moment update). Pure:
    returns a new ParameterSet, leaving the input untouched."""
    out = params.copy()
    out.step = params.step + 1
    t = out.step
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name in sorted(out.params):
        g = grads[name]
        theta = out.params[name] * (1.0 - opt.learning_rate * opt.weight_decay)
        m = opt.beta1 * out.adam_m[name] + (1.0 - opt.beta1) * g
        v = opt.beta2 * out.adam_v[name] + (1.0 - opt.beta2) * g * g
        out.adam_m[name] = m
        out.adam_v[name] = v
        out.params[name] = theta - opt.learning_rate * (m / bc1) / (
            np.sqrt(v / bc2) + opt.eps
        )
    return out


def predict_score(
    params: ParameterSet,
    x_a: np.ndarray | None = None,
    x_b: np.ndarray | None = None,
    head: str = "joint",
) -> np.ndarray | float:
    """Score from one head; higher means more bonafide.

    head='a' touches only channel A and branch-A/head-A parameters, so
    it works with channel B absent (and vice versa); 'joint' needs both.
    """
    cfg = params.config
    if head not in ("a", "b", "joint"):
        raise ValueError(f"unknown head {head!r}")
    needs = {"a": ("a",), "b": ("b",), "joint": ("a", "b")}[head]
    if "a" in needs and x_a is None:
        raise ValueError("channel unavailable for head: need channel A")
    if "b" in needs and x_b is None:
        raise ValueError("channel unavailable for head: need channel B")

    single = False
    emb = {}
    if "a" in needs:
        xa = _as_batch(x_a, cfg.channels_a, cfg, "channel-A input")
        single = single or np.asarray(x_a).ndim == 3
        emb["a"], _ = _branch_forward(params, "a", xa)
    if "b" in needs:
        xb = _as_batch(x_b, cfg.channels_b, cfg, "channel-B input")
        single = single or np.asarray(x_b).ndim == 3
        emb["b"], _ = _branch_forward(params, "b", xb)

    if head == "joint":
        scores = _head_forward(params, "joint", np.concatenate([emb["a"], emb["b"]], axis=1))
    else:
        scores = _head_forward(params, head, emb[head])
    return float(scores[0]) if single and scores.shape[0] == 1 else scores


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"CMPADCKP"
_VERSION = 1
_DTYPE_CODES = {"<f8": 1, "<f4": 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _read_exact(buf: io.BufferedReader, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedCheckpoint(f"expected {n} bytes, got {len(data)}")
    return data


def _write_array(out: io.BufferedWriter, name: str, arr: np.ndarray) -> None:
    enc = name.encode("utf-8")
    out.write(struct.pack("<H", len(enc)))
    out.write(enc)
    code = _DTYPE_CODES[arr.dtype.newbyteorder("<").str]
    out.write(struct.pack("<B", code))
    out.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        out.write(struct.pack("<I", dim))
    out.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_array(buf: io.BufferedReader) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode("utf-8")
    (code,) = struct.unpack("<B", _read_exact(buf, 1))
    if code not in _CODE_DTYPES:
        raise BadCheckpointFormat(f"unknown dtype code {code}")
    dtype = np.dtype(_CODE_DTYPES[code])
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1))
    shape = tuple(
        struct.unpack("<I", _read_exact(buf, 4))[0] for _ in range(ndim)
    )
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = _read_exact(buf, count * dtype.itemsize)
    return name, np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def save_checkpoint(
    params: ParameterSet, path: str | Path, precision: str = "f8"
) -> None:
    """Versioned binary container; the default f8 precision round-trips
    weights and optimizer state bit-exactly. precision='f4' stores a
    lossy compact copy."""
    if precision not in ("f8", "f4"):
        raise ValueError("precision must be 'f8' or 'f4'")
    dtype = np.dtype("<f8" if precision == "f8" else "<f4")
    path = Path(path)
    with io.BytesIO() as out:
        out.write(_MAGIC)
        out.write(struct.pack("<I", _VERSION))
        cfg = json.dumps(asdict(params.config), sort_keys=True).encode("utf-8")
        out.write(struct.pack("<I", len(cfg)))
        out.write(cfg)
        out.write(struct.pack("<Q", params.step))
        names = sorted(params.params)
        out.write(struct.pack("<I", 3 * len(names)))
        for prefix, group in (
            ("p/", params.params),
            ("m/", params.adam_m),
            ("v/", params.adam_v),
        ):
            for name in names:
                _write_array(out, prefix + name, group[name].astype(dtype, copy=False))
        path.write_bytes(out.getvalue())


def load_checkpoint(path: str | Path) -> ParameterSet:
    path = Path(path)
    with io.BytesIO(path.read_bytes()) as buf:
        magic = _read_exact(buf, 8)
        if magic != _MAGIC:
            raise BadCheckpointFormat("bad checkpoint format")
        (version,) = struct.unpack("<I", _read_exact(buf, 4))
        if version != _VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint version {version}, expected {_VERSION}"
            )
        (cfg_len,) = struct.unpack("<I", _read_exact(buf, 4))
        cfg_json = json.loads(_read_exact(buf, cfg_len).decode("utf-8"))
        config = NetworkConfig(**cfg_json)
        (step,) = struct.unpack("<Q", _read_exact(buf, 8))
        (n_records,) = struct.unpack("<I", _read_exact(buf, 4))
        groups: dict[str, dict[str, np.ndarray]] = {"p": {}, "m": {}, "v": {}}
        for _ in range(n_records):
            name, arr = _read_array(buf)
            prefix, _, bare = name.partition("/")
            if prefix not in groups:
                raise BadCheckpointFormat(f"unknown record group {prefix!r}")
            groups[prefix][bare] = arr

    expected = parameter_shapes(config)
    for group_name, group in groups.items():
        if set(group) != set(expected):
            missing = sorted(set(expected) ^ set(group))
            raise CheckpointShapeMismatch(
                f"parameter names disagree with config in group {group_name}: {missing}"
            )
        for name, arr in group.items():
            if arr.shape != expected[name]:
                raise CheckpointShapeMismatch(
                    f"{name}: shape {arr.shape} != {expected[name]}"
                )
    return ParameterSet(
        config=config,
        params=groups["p"],
        adam_m=groups["m"],
        adam_v=groups["v"],
        step=step,
    )
