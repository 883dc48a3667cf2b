"""Attention-pooling vision-language connector.

Per crop, with ``H`` the N x 2d_v concatenated features:

    Q      = mean of each 2x2 patch neighbourhood of H          (M x 2d_v)
    S      = (Q W_Q)(H W_K)^T / sqrt(d_k)                        (M x N)
    P      = softmax(S), keys masked to the query's group in local mode
    pooled = (P (H W_V)) W_O                                     (M x d_v)
    out    = (swish(pooled W_1) * (pooled W_2)) W_3              (M x d_l)

No biases. ``connector_backward`` is the exact reverse-mode derivative of
``sum(upstream * out)``; ``grad_check`` compares it to central differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from tilepool.features import FeatureStack, concat_layers
from tilepool.numerics import (
    ShapeError,
    finite_diff_grad,
    matmul,
    max_relative_error,
    sigmoid,
    softmax_rows,
    swish,
    swish_grad,
)

MODES = ("local", "global")
PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_1", "w_2", "w_3")
GRAD_TOLERANCE = 1e-4


@dataclass(frozen=True, eq=False)
class ConnectorParams:
    w_q: np.ndarray  # 2d_v x d_k
    w_k: np.ndarray  # 2d_v x d_k
    w_v: np.ndarray  # 2d_v x 2d_v
    w_o: np.ndarray  # 2d_v x d_v
    w_1: np.ndarray  # d_v x 3d_l
    w_2: np.ndarray  # d_v x 3d_l
    w_3: np.ndarray  # 3d_l x d_l

    def __post_init__(self):
        for name in PARAM_NAMES:
            m = np.array(getattr(self, name), dtype=np.float64)
            if m.ndim != 2:
                raise ShapeError(f"{name} must be 2-D")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        d_v = self.w_o.shape[1]
        d_l = self.w_3.shape[1]
        expected = self.shapes(d_v, d_l)
        for name in PARAM_NAMES:
            if getattr(self, name).shape != expected[name]:
                raise ShapeError(
                    f"{name} has shape {getattr(self, name).shape}, expected {expected[name]}"
                )

    @staticmethod
    def shapes(d_v: int, d_l: int) -> dict[str, tuple[int, int]]:
        d_k = d_v
        return {
            "w_q": (2 * d_v, d_k),
            "w_k": (2 * d_v, d_k),
            "w_v": (2 * d_v, 2 * d_v),
            "w_o": (2 * d_v, d_v),
            "w_1": (d_v, 3 * d_l),
            "w_2": (d_v, 3 * d_l),
            "w_3": (3 * d_l, d_l),
        }

    @property
    def d_v(self) -> int:
        return self.w_o.shape[1]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_l(self) -> int:
        return self.w_3.shape[1]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, **updates) -> "ConnectorParams":
        return ConnectorParams(**{**self.as_dict(), **updates})

    def __eq__(self, other):
        if not isinstance(other, ConnectorParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)


def init_params(d_v: int, d_l: int, seed: int = 0) -> ConnectorParams:
    """Seeded uniform init in +-1/sqrt(fan_in)."""
    rng = np.random.default_rng(seed % 2**63)
    mats = {}
    for name, (rows, cols) in ConnectorParams.shapes(d_v, d_l).items():
        bound = 1.0 / math.sqrt(rows)
        mats[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return ConnectorParams(**mats)


# Parameter container: same header discipline as JVF1, one section per matrix.
#   "JVP1", u32 n_sections, u32 d_v, u32 d_k, u32 d_l, u32 reserved=0
#   per section: 4-byte tag, u32 rows, u32 cols, f64 values row-major
PARAM_MAGIC = b"JVP1"
_PARAM_HEADER = struct.Struct("<4s5I")
_SECTION = struct.Struct("<4s2I")
_TAGS = {"w_q": b"WQ\0\0", "w_k": b"WK\0\0", "w_v": b"WV\0\0", "w_o": b"WO\0\0",
         "w_1": b"W1\0\0", "w_2": b"W2\0\0", "w_3": b"W3\0\0"}


def save_params(params: ConnectorParams) -> bytes:
    out = [_PARAM_HEADER.pack(PARAM_MAGIC, len(PARAM_NAMES), params.d_v, params.d_k, params.d_l, 0)]
    for name in PARAM_NAMES:
        m = getattr(params, name)
        out.append(_SECTION.pack(_TAGS[name], *m.shape))
        out.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    return b"".join(out)


def load_params(buf: bytes) -> ConnectorParams:
    from tilepool.features import FormatError

    buf = bytes(buf)
    if len(buf) < _PARAM_HEADER.size:
        raise FormatError("truncated parameter header", len(buf))
    magic, n, d_v, d_k, d_l, reserved = _PARAM_HEADER.unpack_from(buf, 0)
    if magic != PARAM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PARAM_MAGIC.decode()!r}", 0)
    if n != len(PARAM_NAMES) or reserved != 0 or d_k != d_v:
        raise FormatError("unexpected parameter header fields", 4)
    pos = _PARAM_HEADER.size
    mats = {}
    for name in PARAM_NAMES:
        if len(buf) < pos + _SECTION.size:
            raise FormatError(f"truncated before section {name}", len(buf))
        tag, rows, cols = _SECTION.unpack_from(buf, pos)
        if tag != _TAGS[name]:
            raise FormatError(f"expected section {_TAGS[name]!r}, got {tag!r}", pos)
        pos += _SECTION.size
        nbytes = 8 * rows * cols
        if len(buf) < pos + nbytes:
            raise FormatError(f"truncated section {name}", len(buf))
        mats[name] = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols)
        pos += nbytes
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    params = ConnectorParams(**mats)
    if (params.d_v, params.d_l) != (d_v, d_l):
        raise FormatError("section shapes disagree with header dimensions", 8)
    return params


@dataclass(frozen=True)
class NeighborhoodMap:
    grid_h: int
    grid_w: int
    pooled_rows: int
    pooled_cols: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w

    def mask(self) -> np.ndarray:
        """M x N boolean matrix, True where the patch belongs to the query's group."""
        m = np.zeros((self.n_groups, self.n_patches), dtype=bool)
        for g, members in enumerate(self.groups):
            m[g, list(members)] = True
        return m

    def membership(self) -> np.ndarray:
        """Group index of every patch."""
        owner = np.empty(self.n_patches, dtype=np.intp)
        for g, members in enumerate(self.groups):
            owner[list(members)] = g
        return owner


def _axis_spans(n: int, merge_tail: bool) -> list[range]:
    # pairs of indices; an odd leftover is merged into the last pair or kept alone
    if n == 1:
        return [range(0, 1)]
    spans = [range(i, min(i + 2, n)) for i in range(0, n, 2)]
    if merge_tail and n % 2:
        last = spans.pop()
        spans[-1] = range(spans[-1].start, last.stop)
    return spans


def partition_neighborhoods(grid_h: int, grid_w: int) -> NeighborhoodMap:
    """Group a patch grid into 2x2 neighbourhoods.

    Odd widths get a final one-column group; an odd height folds its last patch
    row into the last group row. A 27x27 grid gives 13 x 14 = 182 groups.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid_h}x{grid_w}")
    row_spans = _axis_spans(grid_h, merge_tail=True)
    col_spans = _axis_spans(grid_w, merge_tail=False)
    groups = tuple(
        tuple(y * grid_w + x for y in rs for x in cs)
        for rs in row_spans
        for cs in col_spans
    )
    return NeighborhoodMap(grid_h, grid_w, len(row_spans), len(col_spans), groups)


def pool_queries(h_concat: np.ndarray, nmap: NeighborhoodMap) -> np.ndarray:
    if h_concat.shape[0] != nmap.n_patches:
        raise ShapeError(f"{h_concat.shape[0]} feature rows for a {nmap.grid_h}x{nmap.grid_w} grid")
    return np.stack([h_concat[list(g)].mean(axis=0) for g in nmap.groups])


def _check_mode(mode: str):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _check_features(h_concat: np.ndarray, params: ConnectorParams):
    if h_concat.ndim != 2 or h_concat.shape[1] != 2 * params.d_v:
        raise ShapeError(f"features {h_concat.shape} do not match 2*d_v={2 * params.d_v}")


def attention_weights(h_concat, q, params: ConnectorParams, nmap: NeighborhoodMap, mode: str = "local"):
    _check_mode(mode)
    _check_features(h_concat, params)
    if q.shape != (nmap.n_groups, 2 * params.d_v):
        raise ShapeError(f"queries {q.shape} expected {(nmap.n_groups, 2 * params.d_v)}")
    scores = matmul(matmul(q, params.w_q), matmul(h_concat, params.w_k).T) / math.sqrt(params.d_k)
    return softmax_rows(scores, nmap.mask() if mode == "local" else None)


def attention_pool(h_concat, q, params: ConnectorParams, nmap: NeighborhoodMap, mode: str = "local"):
    weights = attention_weights(h_concat, q, params, nmap, mode)
    return matmul(matmul(weights, matmul(h_concat, params.w_v)), params.w_o)


def swiglu_project(h_pooled: np.ndarray, params: ConnectorParams) -> np.ndarray:
    if h_pooled.ndim != 2 or h_pooled.shape[1] != params.d_v:
        raise ShapeError(f"pooled features {h_pooled.shape} do not match d_v={params.d_v}")
    return matmul(swish(matmul(h_pooled, params.w_1)) * matmul(h_pooled, params.w_2), params.w_3)


def _forward_cached(h, params: ConnectorParams, nmap: NeighborhoodMap, mode: str):
    q = pool_queries(h, nmap)
    a = matmul(q, params.w_q)
    k = matmul(h, params.w_k)
    p = softmax_rows(matmul(a, k.T) / math.sqrt(params.d_k), nmap.mask() if mode == "local" else None)
    v = matmul(h, params.w_v)
    c = matmul(p, v)
    pooled = matmul(c, params.w_o)
    u1 = matmul(pooled, params.w_1)
    u2 = matmul(pooled, params.w_2)
    gated = swish(u1) * u2
    out = matmul(gated, params.w_3)
    cache = dict(q=q, a=a, k=k, p=p, v=v, c=c, pooled=pooled, u1=u1, u2=u2, gated=gated)
    return out, cache


def forward_concat(hs: Sequence[np.ndarray], params: ConnectorParams, nmap: NeighborhoodMap,
                   mode: str = "local") -> list[np.ndarray]:
    """Connector forward over already-concatenated per-crop features."""
    _check_mode(mode)
    outs = []
    for h in hs:
        _check_features(h, params)
        outs.append(_forward_cached(h, params, nmap, mode)[0])
    return outs


@dataclass
class ConnectorGrads:
    weights: dict[str, np.ndarray]
    inputs: list[np.ndarray] = field(default_factory=list)


def backward_concat(hs: Sequence[np.ndarray], params: ConnectorParams, nmap: NeighborhoodMap,
                    mode: str, upstream: Sequence[np.ndarray]) -> ConnectorGrads:
    """Gradients of sum_c sum(upstream[c] * out[c]) w.r.t. weights and each crop's features."""
    _check_mode(mode)
    if len(upstream) != len(hs):
        raise ShapeError(f"{len(upstream)} upstream matrices for {len(hs)} crops")
    grads = {name: np.zeros(getattr(params, name).shape) for name in PARAM_NAMES}
    d_inputs = []
    scale = 1.0 / math.sqrt(params.d_k)
    owner = nmap.membership()
    sizes = np.array([len(g) for g in nmap.groups], dtype=np.float64)
    for h, dy in zip(hs, upstream):
        _check_features(h, params)
        out, cc = _forward_cached(h, params, nmap, mode)
        if dy.shape != out.shape:
            raise ShapeError(f"upstream {dy.shape} does not match output {out.shape}")

        grads["w_3"] += matmul(cc["gated"].T, dy)
        d_gated = matmul(dy, params.w_3.T)
        d_u1 = d_gated * cc["u2"] * swish_grad(cc["u1"])
        d_u2 = d_gated * swish(cc["u1"])
        grads["w_1"] += matmul(cc["pooled"].T, d_u1)
        grads["w_2"] += matmul(cc["pooled"].T, d_u2)
        d_pooled = matmul(d_u1, params.w_1.T) + matmul(d_u2, params.w_2.T)

        grads["w_o"] += matmul(cc["c"].T, d_pooled)
        d_c = matmul(d_pooled, params.w_o.T)
        p = cc["p"]
        d_p = matmul(d_c, cc["v"].T)
        d_v = matmul(p.T, d_c)
        grads["w_v"] += matmul(h.T, d_v)
        d_h = matmul(d_v, params.w_v.T)

        # softmax Jacobian; masked entries have p == 0 and drop out
        d_s = p * (d_p - np.sum(d_p * p, axis=1, keepdims=True)) * scale
        d_a = matmul(d_s, cc["k"])
        d_k = matmul(d_s.T, cc["a"])
        grads["w_q"] += matmul(cc["q"].T, d_a)
        grads["w_k"] += matmul(h.T, d_k)
        d_h += matmul(d_k, params.w_k.T)

        d_q = matmul(d_a, params.w_q.T)
        d_h += d_q[owner] / sizes[owner][:, None]
        d_inputs.append(d_h)
    return ConnectorGrads(weights=grads, inputs=d_inputs)


def _stack_inputs(stack: FeatureStack, params: ConnectorParams):
    if stack.d_v != params.d_v:
        raise ShapeError(f"stack d_v={stack.d_v} but params d_v={params.d_v}")
    hs = [concat_layers(stack, c) for c in range(stack.crops)]
    return hs, partition_neighborhoods(*stack.grid)


def connector_forward(stack: FeatureStack, params: ConnectorParams, mode: str = "local") -> list[np.ndarray]:
    """Per-crop M x d_l visual tokens, in crop order."""
    hs, nmap = _stack_inputs(stack, params)
    return forward_concat(hs, params, nmap, mode)


def connector_backward(stack: FeatureStack, params: ConnectorParams, mode: str,
                       upstream: Sequence[np.ndarray]) -> ConnectorGrads:
    hs, nmap = _stack_inputs(stack, params)
    return backward_concat(hs, params, nmap, mode, upstream)


@dataclass(frozen=True)
class GradCheckDims:
    d_v: int = 4
    d_l: int = 6
    grid_h: int = 5
    grid_w: int = 5
    crops: int = 2


@dataclass
class GradCheckReport:
    seed: int
    mode: str
    errors: dict[str, float]
    tolerance: float = GRAD_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [f"{name} {err:.3e} {'ok' if err < self.tolerance else 'FAIL'}"
               for name, err in self.errors.items()]
        out.append(f"gradcheck seed={self.seed} mode={self.mode} {'PASS' if self.passed else 'FAIL'}")
        return out


def grad_check(seed: int = 0, dims: GradCheckDims = GradCheckDims(), mode: str = "local",
               eps: float = 1e-5, backward: Callable = backward_concat) -> GradCheckReport:
    """Compare analytic gradients with central differences on a random toy problem.

    ``backward`` is injectable so a deliberately broken implementation can be
    shown to fail.
    """
    rng = np.random.default_rng(seed % 2**63)
    params = init_params(dims.d_v, dims.d_l, seed)
    nmap = partition_neighborhoods(dims.grid_h, dims.grid_w)
    n = dims.grid_h * dims.grid_w
    hs = [rng.standard_normal((n, 2 * dims.d_v)) for _ in range(dims.crops)]
    upstream = [rng.standard_normal((nmap.n_groups, dims.d_l)) for _ in range(dims.crops)]

    def loss(p: ConnectorParams, inputs) -> float:
        outs = forward_concat(inputs, p, nmap, mode)
        return float(sum(np.sum(u * o) for u, o in zip(upstream, outs)))

    grads = backward(hs, params, nmap, mode, upstream)
    errors = {}
    for name in PARAM_NAMES:
        numeric = finite_diff_grad(lambda w: loss(params.replace(**{name: w}), hs),
                                   getattr(params, name), eps)
        errors[name.upper()] = max_relative_error(grads.weights[name], numeric)
    worst = 0.0
    for c in range(dims.crops):
        def loss_h(hc, c=c):
            return loss(params, [hc if i == c else h for i, h in enumerate(hs)])
        worst = max(worst, max_relative_error(grads.inputs[c], finite_diff_grad(loss_h, hs[c], eps)))
    errors["H_CONCAT"] = worst
    return GradCheckReport(seed=seed, mode=mode, errors=errors)


__all__ = [
    "ConnectorGrads",
    "ConnectorParams",
    "GradCheckDims",
    "GradCheckReport",
    "NeighborhoodMap",
    "attention_pool",
    "attention_weights",
    "backward_concat",
    "connector_backward",
    "connector_forward",
    "forward_concat",
    "grad_check",
    "init_params",
    "load_params",
    "partition_neighborhoods",
    "pool_queries",
    "save_params",
    "swiglu_project",
]
