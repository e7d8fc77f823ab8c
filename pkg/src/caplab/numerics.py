"""Dense float64 math with hand-written backward passes, plus the two optimizers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; batched inputs
are stacked as rows.  Every forward function has a ``*_backward`` partner that
takes the upstream gradient and returns the gradients of the inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from caplab.errors import ConfigurationError, TrainingError

SOFTPLUS_GUARD = 30.0
GRAD_FLOOR = 1e-6  # denominator floor for relative gradient errors


def as_matrix(data, rows=None, cols=None) -> np.ndarray:
    """Validate and return ``data`` as a finite 2-D float64 array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1 and rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ConfigurationError(f"{m.size} values cannot fill a {rows}x{cols} matrix")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ConfigurationError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ConfigurationError("matrix entries must be finite")
    return m


# -- affine -----------------------------------------------------------------

def affine(x, W, b):
    """``W @ x + b`` for a vector, or row-wise for a stack of vectors."""
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ConfigurationError(
            f"affine: input {x.shape}, weight {W.shape}, bias {b.shape} are incompatible"
        )
    return x @ W.T + b


def affine_backward(d_out, x, W):
    """Return ``(d_x, d_W, d_b)`` for :func:`affine`."""
    d_out = np.asarray(d_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d_x = d_out @ W
    if x.ndim == 1:
        return d_x, np.outer(d_out, x), d_out.copy()
    return d_x, d_out.T @ x, d_out.sum(axis=0)


# -- elementwise activations ---------------------------------------------------

def tanh(v):
    return np.tanh(v)


def tanh_backward(d_out, out):
    return d_out * (1.0 - out * out)


def softplus(v):
    """``ln(1 + e^v)`` without overflow.

    For ``v > 30`` uses ``v + softplus(-v)``; for ``v < -30`` the result
    equals ``e^v`` to double precision.
    """
    v = np.asarray(v, dtype=np.float64)
    out = np.empty_like(v)
    hi = v > SOFTPLUS_GUARD
    lo = v < -SOFTPLUS_GUARD
    mid = ~(hi | lo)
    out[hi] = v[hi] + np.log1p(np.exp(-v[hi]))
    out[lo] = np.exp(v[lo])
    out[mid] = np.log1p(np.exp(v[mid]))
    return out if out.ndim else float(out)


def softplus_backward(d_out, v):
    return d_out * sigmoid(v)


def sigmoid(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid_backward(d_out, out):
    return d_out * out * (1.0 - out)


def exp(v):
    return np.exp(v)


def exp_backward(d_out, out):
    return d_out * out


# -- parameters and optimizers ------------------------------------------------

@dataclass
class ParamStore:
    """Named parameter tensors with gradient accumulators and Adam state."""

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value):
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def grad_norm(self):
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values()))

    def scale_grads(self, factor):
        for g in self.grads.values():
            g *= factor

    def copy(self):
        out = ParamStore(step=self.step)
        for name in self.params:
            out.params[name] = self.params[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        return out

    def num_values(self):
        return sum(p.size for p in self.params.values())


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place, then clear the gradients.

    Entries whose gradient is exactly zero keep their value (their moments
    still decay), so parameters that did not take part in a step never move.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= np.where(g != 0.0, update, 0.0)
    store.zero_grad()
    return store


def sgd_momentum_step(value, grad, buffer, lr, momentum):
    """One momentum step in the ascent direction.

    Returns ``(new_value, new_buffer)`` with ``buffer <- momentum*buffer + grad``
    and ``value <- value + lr*buffer``.
    """
    buffer = momentum * buffer + grad
    return value + lr * buffer, buffer


# -- gradient checking ----------------------------------------------------------

@dataclass
class GradCheck:
    max_rel_error: float
    worst: str
    checked: int

    def __float__(self):
        return self.max_rel_error


def _split(result):
    if isinstance(result, tuple):
        return float(result[0]), result[1]
    return float(result), None


def finite_diff_check(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    analytic: dict,
    rel_step=1e-4,
    names=None,
    max_entries=None,
    rng=None,
) -> GradCheck:
    """Compare ``analytic`` gradients with central differences of ``f``.

    ``f`` may return a float or ``(float, signature)``.  The signature marks
    which smooth piece of a piecewise function is active (for example the
    signs of L1 residuals); a difference whose probes land on a different
    piece is retried with a smaller step, then taken one-sided.  Central
    differences are Richardson-extrapolated from steps ``h`` and ``h/2`` with
    ``h = rel_step * max(1, |p|)``.

    The error per entry is ``|a - n| / max(1e-6, |a| + |n|)``; the maximum
    The floor keeps roundoff in a numerically zero derivative (about
    ``1e-11`` here) from registering as a relative error.
    over all checked entries is returned along with the entry name.  A
    non-finite ``f`` reports an infinite error.
    """
    base, sig0 = _split(f(store))
    if not math.isfinite(base):
        return GradCheck(math.inf, "f(params) is not finite", 0)
    worst, worst_name, checked = 0.0, "", 0
    for name in names or store.names():
        p = store.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for i in idx:
            orig = flat[i]

            def probe(delta):
                flat[i] = orig + delta
                try:
                    return _split(f(store))
                finally:
                    flat[i] = orig

            h = rel_step * max(1.0, abs(orig))
            numeric = None
            for _ in range(4):
                vals = [probe(d) for d in (h, -h, h / 2, -h / 2)]
                if any(not math.isfinite(v) for v, _ in vals):
                    return GradCheck(math.inf, f"{name}[{i}]: f not finite", checked)
                if all(s == sig0 for _, s in vals):
                    d1 = (vals[0][0] - vals[1][0]) / (2 * h)
                    d2 = (vals[2][0] - vals[3][0]) / h
                    numeric = (4 * d2 - d1) / 3
                    break
                h /= 100.0
            if numeric is None:
                fp, sp = probe(h)
                if sp == sig0:
                    numeric = (fp - base) / h
                else:
                    fm, _ = probe(-h)
                    numeric = (base - fm) / h
            a = a_flat[i]
            err = abs(a - numeric) / max(GRAD_FLOOR, abs(a) + abs(numeric))
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}] analytic={a:.6g} numeric={numeric:.6g}"
    return GradCheck(worst, worst_name, checked)
