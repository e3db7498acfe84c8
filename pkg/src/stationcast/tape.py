"""Dense reverse-mode differentiation on an explicit tape.

Every tensor is a float64 numpy array.  Operations append a node holding a
backward closure to the tape they found on their inputs; plain numpy arrays
passed into an operation are treated as constants and receive no gradient.
Calling :func:`backward` on a scalar output walks the tape in reverse append
order and accumulates gradients into a store keyed by parameter id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

ArrayLike = Union[np.ndarray, float, int, "TapeTensor"]

# relu/abs take the zero subgradient at their kink
_POWER_TOL = 1e-8
_POWER_MAXITER = 1000
_LAMBDA_FALLBACK = 2.0


@dataclass
class _Node:
    op: str
    input_ids: tuple
    backward: Optional[Callable]
    is_param: bool = False
    shape: tuple = ()


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def param(self, values: ArrayLike, name: str = "") -> "TapeTensor":
        """Register a differentiable leaf and return its tensor."""
        arr = _as_array(values)
        nid = len(self.nodes)
        self.nodes.append(_Node(op=f"param:{name}", input_ids=(), backward=None,
                                is_param=True, shape=arr.shape))
        return TapeTensor(arr, self, nid)

    def _record(self, op: str, input_ids: tuple, backward: Callable,
                values: np.ndarray) -> "TapeTensor":
        nid = len(self.nodes)
        self.nodes.append(_Node(op=op, input_ids=input_ids, backward=backward))
        return TapeTensor(values, self, nid)


class TapeTensor:
    """A value plus its position on a tape (constants sit on no tape)."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values: np.ndarray, tape: Optional[Tape] = None,
                 node_id: Optional[int] = None):
        self.values = _as_array(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"TapeTensor(shape={self.values.shape}, {tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(float(other), self)
        return hadamard(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(float(other), self)
        return hadamard(other, self)


def _as_array(x) -> np.ndarray:
    if isinstance(x, TapeTensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _tape_of(*tensors) -> Optional[Tape]:
    tape = None
    for t in tensors:
        if isinstance(t, TapeTensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ShapeError("operands come from two different tapes")
    return tape


def _nid(t) -> Optional[int]:
    if isinstance(t, TapeTensor):
        return t.node_id
    return None


def _emit(op: str, inputs: Sequence, values: np.ndarray,
          backward: Callable) -> TapeTensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return TapeTensor(values)
    return tape._record(op, tuple(_nid(t) for t in inputs), backward, values)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: ArrayLike, b: ArrayLike) -> TapeTensor:
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: shapes {av.shape} and {bv.shape} differ")
    return _emit("add", (a, b), av + bv, lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> TapeTensor:
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shapes {av.shape} and {bv.shape} differ")
    return _emit("sub", (a, b), av - bv, lambda g: (g, -g))


def hadamard(a: ArrayLike, b: ArrayLike) -> TapeTensor:
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ShapeError(f"hadamard: shapes {av.shape} and {bv.shape} differ")
    return _emit("hadamard", (a, b), av * bv,
                 lambda g: (g * bv, g * av))


def scalar_mul(c: float, a: ArrayLike) -> TapeTensor:
    """Multiply a tensor by a python scalar (the scalar is not a parameter)."""
    c = float(c)
    av = _as_array(a)
    return _emit("scalar_mul", (a,), c * av, lambda g: (c * g,))


def matmul(a: ArrayLike, b: ArrayLike) -> TapeTensor:
    av, bv = _as_array(a), _as_array(b)
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        back = lambda g: (g @ bv.T, av.T @ g)
    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        back = lambda g: (g @ bv.transpose(0, 2, 1), av.transpose(0, 2, 1) @ g)
    elif av.ndim == 3 and bv.ndim == 2:
        if av.shape[2] != bv.shape[0]:
            raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
        out = av @ bv
        back = lambda g: (g @ bv.T,
                          np.tensordot(av, g, axes=([0, 1], [0, 1])))
    else:
        raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")
    return _emit("matmul", (a, b), out, back)


def tanh(a: ArrayLike) -> TapeTensor:
    av = _as_array(a)
    out = np.tanh(av)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: ArrayLike) -> TapeTensor:
    av = _as_array(a)
    mask = av > 0.0
    return _emit("relu", (a,), np.where(mask, av, 0.0),
                 lambda g: (g * mask,))


def absolute(a: ArrayLike) -> TapeTensor:
    av = _as_array(a)
    s = np.sign(av)
    return _emit("abs", (a,), np.abs(av), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# structural primitives


def concat(tensors: Sequence[ArrayLike], axis: int) -> TapeTensor:
    arrs = [_as_array(t) for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(arrs)))

    return _emit("concat", tuple(tensors), out, back)


def slice_axis(a: ArrayLike, axis: int, start: int, stop: int) -> TapeTensor:
    av = _as_array(a)
    idx = [slice(None)] * av.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = av[idx].copy()

    def back(g):
        ga = np.zeros_like(av)
        ga[idx] = g
        return (ga,)

    return _emit("slice", (a,), out, back)


def reshape(a: ArrayLike, shape) -> TapeTensor:
    av = _as_array(a)
    out = av.reshape(shape)
    return _emit("reshape", (a,), out, lambda g: (g.reshape(av.shape),))


def transpose(a: ArrayLike, axes: Sequence[int]) -> TapeTensor:
    av = _as_array(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(av, axes).copy(),
                 lambda g: (np.transpose(g, inv),))


def tile_leading(a: ArrayLike, reps: int) -> TapeTensor:
    """Stack `reps` copies of `a` along a new leading axis."""
    av = _as_array(a)
    out = np.broadcast_to(av, (reps,) + av.shape).copy()
    return _emit("tile_leading", (a,), out, lambda g: (g.sum(axis=0),))


def add_bias(x: ArrayLike, b: ArrayLike) -> TapeTensor:
    """Add a vector bias along the last axis."""
    xv, bv = _as_array(x), _as_array(b)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeError(f"add_bias: {xv.shape} + {bv.shape}")
    axes = tuple(range(xv.ndim - 1))
    return _emit("add_bias", (x, b), xv + bv,
                 lambda g: (g, g.sum(axis=axes)))


def reduce_sum(a: ArrayLike) -> TapeTensor:
    av = _as_array(a)
    return _emit("reduce_sum", (a,), np.asarray(av.sum()),
                 lambda g: (np.full_like(av, float(g)),))


def reduce_mean(a: ArrayLike) -> TapeTensor:
    av = _as_array(a)
    n = av.size
    return _emit("reduce_mean", (a,), np.asarray(av.mean()),
                 lambda g: (np.full_like(av, float(g) / n),))


def conv1d(x: ArrayLike, w: ArrayLike, dilation: int = 1) -> TapeTensor:
    """Valid 1-D convolution over the middle axis.

    x: [M, T, C_in], w: [k, C_in, C_out] -> [M, T - (k-1)*dilation, C_out].
    """
    xv, wv = _as_array(x), _as_array(w)
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[2] != wv.shape[1]:
        raise ShapeError(f"conv1d: {xv.shape} * {wv.shape}")
    k = wv.shape[0]
    t_out = xv.shape[1] - (k - 1) * dilation
    if t_out <= 0:
        raise ShapeError(
            f"conv1d: kernel {k} with dilation {dilation} exceeds length "
            f"{xv.shape[1]}")
    out = np.zeros((xv.shape[0], t_out, wv.shape[2]))
    for j in range(k):
        out += xv[:, j * dilation:j * dilation + t_out, :] @ wv[j]

    def back(g):
        gx = np.zeros_like(xv)
        gw = np.zeros_like(wv)
        for j in range(k):
            sl = slice(j * dilation, j * dilation + t_out)
            gx[:, sl, :] += g @ wv[j].T
            gw[j] = np.tensordot(xv[:, sl, :], g, axes=([0, 1], [0, 1]))
        return (gx, gw)

    return _emit("conv1d", (x, w), out, back)


# ---------------------------------------------------------------------------
# spectral compound


def _power_lambda_max_batch(mats: np.ndarray):
    """Largest eigenpairs of a stack of symmetric PSD matrices.

    Power iteration from a fixed seeded start (an all-ones start can sit in
    the kernel of a regular graph's Laplacian), vectorized over the stack;
    each matrix is frozen at its own convergence, then one extra step
    sharpens the pair before a Rayleigh quotient.  Matrices whose iteration
    does not converge fall back to lambda 2.0 with the eigenvector flagged
    invalid; the constant keeps the result independent of node ordering in
    hard cases.  Returns (lam [B], vec [B, N], valid [B]).
    """
    b, n = mats.shape[0], mats.shape[1]
    rng = np.random.default_rng(12345)
    v0 = rng.standard_normal(n)
    v0 /= np.linalg.norm(v0)
    v = np.tile(v0, (b, 1))
    active = np.ones(b, dtype=bool)
    converged = np.zeros(b, dtype=bool)
    for _ in range(_POWER_MAXITER):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        w = (mats[idx] @ v[idx][..., None])[..., 0]
        nw = np.sqrt(np.einsum("bi,bi->b", w, w))
        alive = nw >= 1e-300
        active[idx[~alive]] = False  # vanished iterate: fallback
        idx = idx[alive]
        if idx.size == 0:
            continue
        v_new = w[alive] / nw[alive][:, None]
        diff = v_new - v[idx]
        done = np.sqrt(np.einsum("bi,bi->b", diff, diff)) < _POWER_TOL
        v[idx] = v_new
        converged[idx[done]] = True
        active[idx[done]] = False
    lam = np.full(b, _LAMBDA_FALLBACK)
    valid = np.zeros(b, dtype=bool)
    idx = np.where(converged)[0]
    if idx.size:
        w = (mats[idx] @ v[idx][..., None])[..., 0]
        nw = np.sqrt(np.einsum("bi,bi->b", w, w))
        safe = np.where(nw < 1e-300, 1.0, nw)
        v[idx] = np.where((nw >= 1e-300)[:, None], w / safe[:, None], v[idx])
        li = np.einsum("bi,bi->b", v[idx],
                       (mats[idx] @ v[idx][..., None])[..., 0])
        good = li > 1e-12
        lam[idx[good]] = li[good]
        valid[idx[good]] = True
    return lam, v, valid


def _power_lambda_max(mat: np.ndarray) -> tuple[float, Optional[np.ndarray]]:
    """Single-matrix view of _power_lambda_max_batch: (lam, vec or None)."""
    lam, vec, valid = _power_lambda_max_batch(mat[None])
    if not valid[0]:
        return _LAMBDA_FALLBACK, None
    return float(lam[0]), vec[0]


def _laplacian_forward_batch(a: np.ndarray):
    """Scaled Laplacians of a [B, N, N] stack of symmetric adjacencies.

    Returns (l_tilde, saved) where saved carries what backward needs.
    """
    n = a.shape[1]
    deg = a.sum(axis=2)
    isolated = deg <= 0.0
    a_eff = a
    if isolated.any():
        a_eff = a.copy()
        di = np.arange(n)
        diag = a_eff[:, di, di]
        # self-loop keeps the normalization finite
        a_eff[:, di, di] = np.where(isolated, 1.0, diag)
        deg = a_eff.sum(axis=2)
    s = 1.0 / np.sqrt(deg)
    eye = np.eye(n)
    lap = eye - (s[:, :, None] * a_eff) * s[:, None, :]
    lam, vec, valid = _power_lambda_max_batch(lap)
    l_tilde = (2.0 / lam)[:, None, None] * lap - eye
    return l_tilde, (a_eff, s, lap, lam, vec, valid, isolated)


def _laplacian_backward_batch(g: np.ndarray, saved) -> np.ndarray:
    a_eff, s, lap, lam, vec, valid, isolated = saved
    # dL~/dL has two parts: the 2/lam scaling and lam's own dependence on L;
    # the second vanishes when lam came from the constant fallback
    g_lap = (2.0 / lam)[:, None, None] * g
    g_lam = (-2.0 / lam ** 2) * np.einsum("bij,bij->b", g, lap)
    coef = np.where(valid, g_lam, 0.0)
    g_lap = g_lap + coef[:, None, None] * (vec[:, :, None] * vec[:, None, :])
    h = -g_lap  # gradient w.r.t. the normalized adjacency s_i A_ij s_j
    grad_a = h * (s[:, :, None] * s[:, None, :])
    # through the degree vector: ds_i/dd_i = -1/2 d^{-3/2}
    gs = (h * a_eff * s[:, None, :]).sum(axis=2) \
        + (h * a_eff * s[:, :, None]).sum(axis=1)
    c = gs * (-0.5) * s ** 3
    c = np.where(isolated, 0.0, c)  # clamped rows have frozen degree
    grad_a = grad_a + c[:, :, None]
    if isolated.any():
        di = np.arange(grad_a.shape[1])
        diag = grad_a[:, di, di]
        # injected self-loops are constants
        grad_a[:, di, di] = np.where(isolated, 0.0, diag)
    return grad_a


def _laplacian_forward(a: np.ndarray):
    """Scaled Laplacian of one symmetric nonnegative adjacency matrix.

    Returns (l_tilde, saved) where saved carries what backward needs.
    """
    l_tilde, saved = _laplacian_forward_batch(a[None])
    a_eff, s, lap, lam, vec, valid, isolated = saved
    single = (a_eff[0], s[0], lap[0], float(lam[0]),
              vec[0] if valid[0] else None, isolated[0])
    return l_tilde[0], single


def _laplacian_backward(g: np.ndarray, saved) -> np.ndarray:
    a_eff, s, lap, lam, vec, isolated = saved
    # dL~/dL has two parts: the 2/lam scaling and lam's own dependence on L;
    # the second vanishes when lam came from the constant fallback
    g_lap = (2.0 / lam) * g
    if vec is not None:
        g_lam = (-2.0 / lam ** 2) * float((g * lap).sum())
        g_lap = g_lap + g_lam * np.outer(vec, vec)
    h = -g_lap  # gradient w.r.t. the normalized adjacency s_i A_ij s_j
    grad_a = h * np.outer(s, s)
    # through the degree vector: ds_i/dd_i = -1/2 d^{-3/2}
    gs = (h * a_eff * s[None, :]).sum(axis=1) + (h * a_eff * s[:, None]).sum(axis=0)
    c = gs * (-0.5) * s ** 3
    c = np.where(isolated, 0.0, c)  # clamped rows have frozen degree
    grad_a = grad_a + c[:, None]
    if isolated.any():
        idx = np.where(isolated)[0]
        grad_a[idx, idx] = 0.0  # injected self-loops are constants
    return grad_a


def scaled_laplacian_op(a: ArrayLike) -> TapeTensor:
    """Differentiable rescaled graph Laplacian, 2 L / lambda_max - I.

    Accepts one [N, N] matrix or a stack [B, N, N]; each matrix must be
    symmetric with nonnegative entries.
    """
    av = _as_array(a)
    if av.ndim == 2:
        out, saved = _laplacian_forward(av)
        return _emit("scaled_laplacian", (a,), out,
                     lambda g: (_laplacian_backward(g, saved),))
    if av.ndim == 3:
        out, saved = _laplacian_forward_batch(av)
        return _emit("scaled_laplacian", (a,), out,
                     lambda g: (_laplacian_backward_batch(g, saved),))
    raise ShapeError(f"scaled_laplacian: rank {av.ndim} input")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: TapeTensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter on its tape.

    Returns a dict keyed by parameter node id; parameters the loss never
    touched get zeros.
    """
    if loss.tape is None:
        raise ShapeError("backward: loss is a constant, nothing to differentiate")
    if loss.values.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got {loss.values.shape}")
    tape = loss.tape
    grads: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.asarray(1.0)
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward is None:
            continue
        for in_id, gin in zip(node.input_ids, node.backward(g)):
            if in_id is None or gin is None:
                continue
            if grads[in_id] is None:
                grads[in_id] = np.array(gin, dtype=np.float64)
            else:
                grads[in_id] = grads[in_id] + gin
    store: dict[int, np.ndarray] = {}
    for nid, node in enumerate(tape.nodes):
        if node.is_param:
            g = grads[nid]
            store[nid] = np.zeros(node.shape) if g is None else np.asarray(g)
    return store


def grad_of(store: dict[int, np.ndarray], tensor: TapeTensor) -> np.ndarray:
    """Gradient for one parameter tensor out of a backward() store."""
    return store[tensor.node_id]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators for a named parameter set."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; mutates state, returns new params."""
    state.t += 1
    t = state.t
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(build_loss: Callable[[dict], TapeTensor],
                      params: dict[str, np.ndarray],
                      h: float = 1e-5,
                      max_coords: int = 8,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build_loss`` maps a dict of named tensors to a scalar; it is called
    once on tape parameters for the analytic pass and repeatedly on plain
    arrays for the numeric probes.  Up to ``max_coords`` coordinates per
    parameter are probed.  Disagreements below the rounding noise of the
    probe itself (roughly eps*|loss|/h) count as exact, so coordinates
    whose true gradient cancels to zero do not report spurious error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tape = Tape()
    tparams = {k: tape.param(v, name=k) for k, v in params.items()}
    loss = build_loss(tparams)
    store = backward(loss)
    analytic = {k: grad_of(store, t) for k, t in tparams.items()}

    def eval_loss(pdict):
        out = build_loss({k: TapeTensor(v) for k, v in pdict.items()})
        return float(out.values)

    noise_floor = 64.0 * np.finfo(np.float64).eps \
        * max(1.0, abs(float(loss.values))) / h
    worst = 0.0
    for name, p in params.items():
        flat_n = p.size
        if flat_n == 0:
            continue
        count = min(max_coords, flat_n)
        coords = rng.choice(flat_n, size=count, replace=False)
        for c in coords:
            idx = np.unravel_index(int(c), p.shape)
            pp = {k: v.copy() for k, v in params.items()}
            pp[name][idx] += h
            up = eval_loss(pp)
            pp[name][idx] -= 2.0 * h
            dn = eval_loss(pp)
            numeric = (up - dn) / (2.0 * h)
            a = float(analytic[name][idx])
            if abs(a - numeric) <= noise_floor:
                continue
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            worst = max(worst, err)
    return worst
