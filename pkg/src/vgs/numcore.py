"""
Dense numerical primitives with hand-derived backward passes.

Arrays are plain ``numpy.float64`` ndarrays. Every layer comes as a
``*_forward`` / ``*_backward`` pair: the forward returns ``(out, cache)`` and
the backward consumes the upstream gradient and the cache. Sequence layers
work on padded batches of shape (B, T, D); validity of timesteps is tracked
by the caller through lengths/masks.

Randomness comes from numpy's PCG64 bit generator. Subsystem streams are
derived from a top-level seed by hashing the seed together with a name, see
``derive_seed``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class InputTooShortError(ValueError):
    """Sequence shorter than the convolution kernel."""

    def __init__(self, T: int, k: int, what: str = "input"):
        self.T = T
        self.k = k
        super().__init__(f"{what} has {T} frames, fewer than kernel width {k}")


class DegenerateVectorError(ValueError):
    """Vector norm too close to zero to normalize."""


class EvaluationError(ArithmeticError):
    """Objective evaluated to a non-finite value."""


# ---------------------------------------------------------------------------
# Parameters and randomness
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name}")

    @property
    def shape(self) -> tuple:
        return self.value.shape


class ParamSet:
    """Ordered collection of uniquely named parameters."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> Parameter:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0.0

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for p in self:
            g = grads.get(p.name)
            if g is None:
                p.grad[...] = 0.0
            else:
                if g.shape != p.shape:
                    raise DimensionError(f"grad for {p.name} has shape {g.shape}, expected {p.shape}")
                p.grad[...] = g

    def copy(self) -> "ParamSet":
        return ParamSet(Parameter(p.name, p.value.copy(), p.grad.copy()) for p in self)

    def num_values(self) -> int:
        return sum(p.value.size for p in self)


def merge_grads(parts: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Sum per-worker gradient dicts in list order (deterministic reduction)."""
    out: dict[str, np.ndarray] = {}
    for part in parts:
        for k, g in part.items():
            if k in out:
                out[k] = out[k] + g
            else:
                out[k] = g.copy()
    return out


def derive_seed(seed: int, *names) -> int:
    """64-bit seed for a named subsystem: sha256 over ``seed`` and ``names``."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def make_rng(seed: int, *names) -> np.random.Generator:
    """PCG64 generator; with ``names`` the seed is first passed through ``derive_seed``."""
    if names:
        seed = derive_seed(seed, *names)
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(DTYPE)


# ---------------------------------------------------------------------------
# Elementwise helpers
# ---------------------------------------------------------------------------

def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Affine
# ---------------------------------------------------------------------------

def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"affine: x {x.shape} incompatible with W {W.shape}, b {b.shape}")
    out = x @ W + b
    return out, (x, W)


def affine_backward(dout: np.ndarray, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = dout @ W.T
    dW = x2.T @ d2
    db = d2.sum(axis=0)
    return dx, dW, db


def affine(x, W, b) -> np.ndarray:
    """out[i, j] = sum_k x[i, k] W[k, j] + b[j]. Accepts arrays or Parameters."""
    W = W.value if isinstance(W, Parameter) else np.asarray(W, dtype=DTYPE)
    b = b.value if isinstance(b, Parameter) else np.asarray(b, dtype=DTYPE)
    return affine_forward(np.asarray(x, dtype=DTYPE), W, b)[0]


# ---------------------------------------------------------------------------
# 1-D valid convolution over time
# ---------------------------------------------------------------------------

def conv_out_len(T: int, k: int, stride: int) -> int:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if T < k:
        raise InputTooShortError(T, k)
    return (T - k) // stride + 1


def conv1d_forward(x: np.ndarray, K: np.ndarray, b: np.ndarray, stride: int):
    """
    Valid convolution of a padded batch.

    x: (B, T, d_in); K: (k, d_in, d_out); b: (d_out,).
    Returns out (B, T', d_out) with T' = floor((T - k) / stride) + 1.
    """
    B, T, d_in = x.shape
    k, kd, d_out = K.shape
    if kd != d_in or b.shape != (d_out,):
        raise DimensionError(f"conv1d: x {x.shape} incompatible with K {K.shape}, b {b.shape}")
    Tp = conv_out_len(T, k, stride)
    idx = np.arange(Tp)[:, None] * stride + np.arange(k)[None, :]      # (T', k)
    cols = x[:, idx, :].reshape(B, Tp, k * d_in)
    out = cols @ K.reshape(k * d_in, d_out) + b
    return out, (x.shape, idx, cols, K)


def conv1d_backward(dout: np.ndarray, cache):
    xshape, idx, cols, K = cache
    B, T, d_in = xshape
    k, _, d_out = K.shape
    Tp = idx.shape[0]
    d2 = dout.reshape(-1, d_out)
    dK = (cols.reshape(-1, k * d_in).T @ d2).reshape(K.shape)
    db = d2.sum(axis=0)
    dcols = (dout @ K.reshape(k * d_in, d_out).T).reshape(B, Tp, k, d_in)
    dx = np.zeros(xshape, dtype=DTYPE)
    # np.add.at handles overlapping windows
    np.add.at(dx, (slice(None), idx), dcols)
    return dx, dK, db


def conv1d(x, K, b, stride: int) -> np.ndarray:
    """Single sequence (T, d_in) -> (T', d_out)."""
    K = K.value if isinstance(K, Parameter) else np.asarray(K, dtype=DTYPE)
    b = b.value if isinstance(b, Parameter) else np.asarray(b, dtype=DTYPE)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise DimensionError(f"conv1d expects (T, d_in), got {x.shape}")
    return conv1d_forward(x[None], K, b, stride)[0][0]


# ---------------------------------------------------------------------------
# GRU
#
# Gate layout in the stacked weights is [update z | reset r | candidate n]:
#   W: (d_in, 3H), U: (H, 3H), b: (3H,)
# ---------------------------------------------------------------------------

def _check_gru(d_in: int, W, U, b):
    H = U.shape[0]
    if W.shape != (d_in, 3 * H) or U.shape != (H, 3 * H) or b.shape != (3 * H,):
        raise DimensionError(
            f"gru: input dim {d_in} incompatible with W {W.shape}, U {U.shape}, b {b.shape}")
    return H


def gru_cell(x_t, h_prev, W, U, b) -> np.ndarray:
    """
    One GRU update for a single vector or a batch of rows.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    n = tanh(x Wn + (r * h) Un + bn), h' = (1 - z) * h + z * n.
    """
    x_t = np.asarray(x_t, dtype=DTYPE)
    h_prev = np.asarray(h_prev, dtype=DTYPE)
    H = _check_gru(x_t.shape[-1], W, U, b)
    if h_prev.shape[-1] != H:
        raise DimensionError(f"gru: h_prev {h_prev.shape} does not match hidden size {H}")
    a = x_t @ W + b
    zr = sigmoid(a[..., :2 * H] + h_prev @ U[:, :2 * H])
    z, r = zr[..., :H], zr[..., H:]
    n = np.tanh(a[..., 2 * H:] + (r * h_prev) @ U[:, 2 * H:])
    return (1.0 - z) * h_prev + z * n


def gru_layer_forward(x: np.ndarray, W, U, b, h0=None):
    """
    Left-to-right scan over a padded batch.

    x: (B, T, d_in); returns all hidden states (B, T, H) and a cache.
    """
    B, T, d_in = x.shape
    H = _check_gru(d_in, W, U, b)
    h = np.zeros((B, H), dtype=DTYPE) if h0 is None else np.broadcast_to(h0, (B, H)).astype(DTYPE)
    A = x @ W + b                                            # (B, T, 3H)
    Uzr, Un = U[:, :2 * H], U[:, 2 * H:]
    hs = np.empty((B, T, H), dtype=DTYPE)
    zs = np.empty((B, T, H), dtype=DTYPE)
    rs = np.empty((B, T, H), dtype=DTYPE)
    ns = np.empty((B, T, H), dtype=DTYPE)
    hprev = np.empty((B, T, H), dtype=DTYPE)
    for t in range(T):
        hprev[:, t] = h
        zr = sigmoid(A[:, t, :2 * H] + h @ Uzr)
        z, r = zr[:, :H], zr[:, H:]
        n = np.tanh(A[:, t, 2 * H:] + (r * h) @ Un)
        h = (1.0 - z) * h + z * n
        zs[:, t], rs[:, t], ns[:, t], hs[:, t] = z, r, n, h
    return hs, (x, W, U, hprev, zs, rs, ns)


def gru_layer_backward(dhs: np.ndarray, cache):
    """Returns dx, dW, dU, db, dh0."""
    x, W, U, hprev, zs, rs, ns = cache
    B, T, H = zs.shape
    Uzr, Un = U[:, :2 * H], U[:, 2 * H:]
    dA = np.empty((B, T, 3 * H), dtype=DTYPE)
    dUzr = np.zeros_like(Uzr)
    dUn = np.zeros_like(Un)
    dh = np.zeros((B, H), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        dh = dh + dhs[:, t]
        h, z, r, n = hprev[:, t], zs[:, t], rs[:, t], ns[:, t]
        dn_pre = dh * z * (1.0 - n * n)
        dz_pre = dh * (n - h) * z * (1.0 - z)
        rh = r * h
        dUn += rh.T @ dn_pre
        drh = dn_pre @ Un.T
        dr_pre = drh * h * r * (1.0 - r)
        dzr = np.concatenate([dz_pre, dr_pre], axis=1)
        dUzr += h.T @ dzr
        dh = dh * (1.0 - z) + drh * r + dzr @ Uzr.T
        dA[:, t, :2 * H] = dzr
        dA[:, t, 2 * H:] = dn_pre
    d2 = dA.reshape(-1, 3 * H)
    dW = x.reshape(-1, x.shape[-1]).T @ d2
    db = d2.sum(axis=0)
    dx = dA @ W.T
    dU = np.concatenate([dUzr, dUn], axis=1)
    return dx, dW, dU, db, dh


def gru_layer(x, W, U, b, h0=None) -> np.ndarray:
    """Single sequence (T, d_in) -> hidden states (T, H); h0 defaults to zeros."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2:
        raise DimensionError(f"gru_layer expects (T, d_in), got {x.shape}")
    return gru_layer_forward(x[None], W, U, b, h0)[0][0]


# ---------------------------------------------------------------------------
# Softmax and L2 normalization
# ---------------------------------------------------------------------------

def softmax(s: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis; masked-out entries get weight 0."""
    s = np.asarray(s, dtype=DTYPE)
    if mask is not None:
        s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    return w * (dout - np.sum(w * dout, axis=-1, keepdims=True))


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    """Row-wise v / ||v||; raises DegenerateVectorError if any norm <= eps."""
    return l2_normalize_forward(np.asarray(v, dtype=DTYPE), eps)[0]


def l2_normalize_forward(v: np.ndarray, eps: float = NORM_EPS):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n <= eps):
        raise DegenerateVectorError(f"cannot normalize vector with norm <= {eps}")
    y = v / n
    return y, (y, n)


def l2_normalize_backward(dy: np.ndarray, cache) -> np.ndarray:
    y, n = cache
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    tol: float
    passed: bool

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = f"; worst {self.worst_param}{list(self.worst_index)}" if self.worst_param is not None else ""
        return (f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
                f"(tol {self.tol:g}) over {self.n_checked} components{worst}")


def _eval(f, params) -> float:
    val = float(f(params))
    if not np.isfinite(val):
        raise EvaluationError(f"objective evaluated to {val}")
    return val


def grad_check(f: Callable[[ParamSet], float], params: ParamSet, h: float = 1e-5,
               tol: float = 1e-4, abs_floor: float = 1e-8,
               names: Iterable[str] | None = None) -> GradCheckReport:
    """
    Compare analytic gradients against central differences.

    ``f(params)`` must return the scalar objective and leave the analytic
    gradient in each ``Parameter.grad``. A component whose absolute
    discrepancy is within ``abs_floor`` counts as exact; otherwise its error is
    ``|a - n| / max(|a|, |n|)``.
    """
    _eval(f, params)
    analytic = {p.name: p.grad.copy() for p in params}
    selected = set(names) if names is not None else None
    worst, worst_name, worst_idx, count = 0.0, None, None, 0
    for p in params:
        if selected is not None and p.name not in selected:
            continue
        flat = p.value.reshape(-1)
        agrad = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval(f, params)
            flat[i] = orig - h
            fm = _eval(f, params)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            diff = abs(agrad[i] - num)
            count += 1
            if diff <= abs_floor:
                continue
            rel = diff / max(abs(agrad[i]), abs(num))
            if rel > worst:
                worst, worst_name = rel, p.name
                worst_idx = np.unravel_index(i, p.value.shape)
    # restore analytic grads clobbered by the perturbed evaluations
    for p in params:
        p.grad[...] = analytic[p.name]
    return GradCheckReport(worst, worst_name, tuple(int(j) for j in worst_idx) if worst_idx else None,
                           count, tol, worst <= tol)
