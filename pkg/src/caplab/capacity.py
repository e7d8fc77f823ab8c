"""Rate and mutual-information estimates for trained posteriors.

The data distribution is the uniform distribution over the given utterances,
so the aggregated posterior ``q(z) = (1/N) sum_n q(z|x_n)`` is an exact finite
mixture.  Two estimators are provided:

* quadrature on a regular grid (latent dimension at most 2), with an error
  bound from comparing against half resolution plus a tail-mass term;
* Monte Carlo with the same mixture evaluated exactly at each sample.

Reports serialize as ``key=value`` lines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.special import logsumexp, ndtr

from caplab.distributions import LOG_2PI, DiagGaussian, kl_standard
from caplab.errors import ConfigurationError, FormatError

BOX_SIGMAS = 6.0
DEFAULT_RESOLUTION = 512
DEFAULT_TOLERANCE = 1e-4
MIN_TOLERANCE = 1e-6
MAX_QUADRATURE_POINTS = 4096
HIGH_MARGINAL_SAMPLES = 256
_CHUNK = 1 << 14


@dataclass
class CapacityReport:
    r_avg: float
    i_q: float
    aggregate_kl: float
    method: str
    mc_std_err: float = float("nan")
    grid_spec: str = ""
    error_bound: float = float("nan")
    reliable: bool = True
    num_examples: int = 0

    @property
    def identity_residual(self):
        """``R_avg - I_q - aggregate KL``; zero in exact arithmetic."""
        return self.r_avg - self.i_q - self.aggregate_kl

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
        lines.append(f"identity_residual={self.identity_residual!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"line {n} is not key=value")
            key = key.strip()
            if key == "identity_residual":
                continue
            if key not in kinds:
                raise FormatError(f"unknown report key {key!r} on line {n}")
            kind = kinds[key]
            if kind in ("float", float):
                kw[key] = float(value)
            elif kind in ("int", int):
                kw[key] = int(value)
            elif kind in ("bool", bool):
                kw[key] = value.strip() == "True"
            else:
                kw[key] = value.strip()
        return cls(**kw)


@dataclass
class BoundCheck:
    name: str
    lhs: float
    rhs: float
    tolerance: float
    kind: str = "<="  # or "=="

    @property
    def delta(self):
        """How far the relation is violated (positive means violated before tolerance)."""
        if self.kind == "==":
            return abs(self.lhs - self.rhs)
        return self.lhs - self.rhs

    @property
    def passed(self):
        return self.delta <= self.tolerance

    def describe(self):
        status = "ok" if self.passed else "VIOLATED"
        return (f"{self.name}: {self.lhs!r} {self.kind} {self.rhs!r} "
                f"(delta={self.delta!r}, tol={self.tolerance!r}) {status}")


@dataclass
class BoundVerification:
    checks: list
    quantities: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_text(self):
        lines = [f"{k}={v!r}" for k, v in self.quantities.items()]
        for i, c in enumerate(self.checks):
            lines.append(f"check{i}={c.describe()}")
        lines.append(f"passed={self.passed}")
        return "\n".join(lines) + "\n"


# -- Gaussian helpers ------------------------------------------------------------------

def _as_stack(means, log_vars):
    d = DiagGaussian(np.atleast_2d(means), np.atleast_2d(log_vars))
    if d.mean.ndim != 2:
        raise ConfigurationError("posteriors must be stacked as (N, dim)")
    return d.mean, d.log_var


def _log_normal(z, mean, log_var):
    """log N(z_g | mean_n, diag exp(log_var_n)) for every pair: (N, G)."""
    out = np.zeros((mean.shape[0], z.shape[0]))
    for k in range(mean.shape[1]):
        diff = z[None, :, k] - mean[:, k, None]
        out -= 0.5 * (LOG_2PI + log_var[:, k, None] + diff * diff * np.exp(-log_var[:, k, None]))
    return out


def _log_std_normal(z):
    return -0.5 * np.sum(LOG_2PI + z * z, axis=1)


# -- quadrature --------------------------------------------------------------------------

def _axes(mean, log_var, resolution):
    std = np.exp(0.5 * log_var)
    lo = (mean - BOX_SIGMAS * std).min(axis=0)
    hi = (mean + BOX_SIGMAS * std).max(axis=0)
    return [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]


def _trapezoid_weights(axis):
    h = axis[1] - axis[0]
    w = np.full(axis.shape, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _grid_integrals(mean, log_var, axes):
    """Quadrature values of ``(I_q, aggregate KL, R_avg)`` on the product grid."""
    N = mean.shape[0]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*[_trapezoid_weights(a) for a in axes], indexing="ij")
    weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
    log_n = math.log(N)
    i_q = agg = rate = 0.0
    step = max(1, _CHUNK // max(N, 1) * 16)
    for s in range(0, len(points), step):
        z, w = points[s:s + step], weights[s:s + step]
        lc = _log_normal(z, mean, log_var)
        lq = logsumexp(lc, axis=0) - log_n
        lp = _log_std_normal(z)
        qn = np.exp(lc)
        i_q += np.sum(qn * (lc - lq) @ w) / N
        rate += np.sum(qn * (lc - lp) @ w) / N
        agg += np.sum(np.exp(lq) * (lq - lp) * w)
    return i_q, agg, rate


def _tail_bound(mean, log_var):
    """Bound on the integrand mass outside the grid box.

    Per component and axis, ``|log q_n(z) - log p(z)|`` is at most
    ``a + b|t| + c t^2`` in the standardized coordinate ``t``; the tail
    integrals of ``phi(t)``, ``|t| phi(t)`` and ``t^2 phi(t)`` are closed-form.
    ``log N`` covers the swap from the component to the mixture density.
    """
    N, dim = mean.shape
    k = BOX_SIGMAS
    std = np.exp(0.5 * log_var)
    a = np.abs(-0.5 * log_var + 0.5 * mean**2)
    b = np.abs(mean * std)
    c = 0.5 * np.abs(std**2 - 1.0)
    tail0 = 2.0 * ndtr(-k)  # P(|t| > k)
    dens = math.exp(-0.5 * k * k) / math.sqrt(2.0 * math.pi)
    tail1 = 2.0 * dens  # E[|t|; |t| > k]
    tail2 = 2.0 * (k * dens + ndtr(-k))  # E[t^2; |t| > k]
    other = (a + b * math.sqrt(2.0 / math.pi) + c).sum(axis=1, keepdims=True)
    inside = other - (a + b * math.sqrt(2.0 / math.pi) + c)
    per_axis = (inside + math.log(N) + a) * tail0 + b * tail1 + c * tail2
    return float(per_axis.sum(axis=1).max())


def quadrature_report(means, log_vars, resolution=DEFAULT_RESOLUTION,
                      tolerance=DEFAULT_TOLERANCE) -> CapacityReport:
    """Quadrature estimates for a finite mixture of diagonal Gaussian posteriors.

    The error bound is the largest change in any of the three integrals when
    the grid is halved, plus a tail-mass term; the report is flagged
    unreliable when the bound exceeds ``tolerance``.
    """
    mean, log_var = _as_stack(means, log_vars)
    N, dim = mean.shape
    if dim > 2:
        raise ConfigurationError("quadrature supports latent dimension 1 or 2 only")
    if N > MAX_QUADRATURE_POINTS:
        raise ConfigurationError(f"quadrature supports at most {MAX_QUADRATURE_POINTS} examples")
    if resolution < 8:
        raise ConfigurationError("grid resolution must be at least 8")
    axes = _axes(mean, log_var, resolution)
    i_q, agg, rate_q = _grid_integrals(mean, log_var, axes)
    half = _grid_integrals(mean, log_var, _axes(mean, log_var, resolution // 2))
    err = max(abs(a - b) for a, b in zip((i_q, agg, rate_q), half))
    err += _tail_bound(mean, log_var) + 1e-12 * (1.0 + abs(rate_q))
    r_avg = float(np.mean(kl_standard(mean, log_var)))
    spec = ";".join(f"{float(a[0])!r}:{float(a[-1])!r}:{len(a)}" for a in axes)
    return CapacityReport(r_avg, float(i_q), float(agg), "quadrature", grid_spec=spec,
                          error_bound=float(err), reliable=bool(err <= tolerance),
                          num_examples=N)


def monte_carlo_report(means, log_vars, samples_per_x=64, rng=None) -> CapacityReport:
    """Sample-based estimates; the standard error treats each example as a stratum."""
    mean, log_var = _as_stack(means, log_vars)
    if samples_per_x < 2:
        raise ConfigurationError("need at least two samples per example for an error bar")
    rng = rng if rng is not None else np.random.default_rng(0)
    N, dim = mean.shape
    std = np.exp(0.5 * log_var)
    log_n = math.log(N)
    scores = np.empty((N, samples_per_x))
    slack = np.empty((N, samples_per_x))
    for n in range(N):
        z = mean[n] + std[n] * rng.standard_normal((samples_per_x, dim))
        lc = _log_normal(z, mean, log_var)
        lq = logsumexp(lc, axis=0) - log_n
        scores[n] = lc[n] - lq
        slack[n] = lq - _log_std_normal(z)
    i_q = float(scores.mean())
    stderr = float(np.sqrt(np.sum(scores.var(axis=1, ddof=1) / samples_per_x)) / N)
    return CapacityReport(float(np.mean(kl_standard(mean, log_var))), i_q, float(slack.mean()),
                          "monte_carlo", mc_std_err=stderr, num_examples=N)


# -- model-level entry points --------------------------------------------------------------

def _flat_posteriors(model, dataset):
    if not model.config.variational:
        raise ConfigurationError("capacity estimates need a variational model")
    if model.config.hierarchical:
        raise ConfigurationError("use verify_hier_bounds for hierarchical models")
    if not dataset:
        raise ConfigurationError("dataset is empty")
    return model.posteriors(dataset)


def r_avg(model, dataset):
    q = _flat_posteriors(model, dataset)
    return float(np.mean(kl_standard(q.mean, q.log_var)))


def mi_quadrature(model, dataset, resolution=DEFAULT_RESOLUTION, tolerance=DEFAULT_TOLERANCE):
    q = _flat_posteriors(model, dataset)
    return quadrature_report(q.mean, q.log_var, resolution, tolerance)


def mi_monte_carlo(model, dataset, samples_per_x=64, seed=0):
    q = _flat_posteriors(model, dataset)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    return monte_carlo_report(q.mean, q.log_var, samples_per_x, rng)


def check_flat_report(report: CapacityReport):
    tol = max(MIN_TOLERANCE, report.error_bound if math.isfinite(report.error_bound) else 0.0)
    if report.method == "monte_carlo":
        tol = max(tol, 3.0 * report.mc_std_err)
    checks = [
        BoundCheck("I_q <= R_avg", report.i_q, report.r_avg, tol),
        BoundCheck("R_avg == I_q + aggregate_kl", report.r_avg,
                   report.i_q + report.aggregate_kl, tol, "=="),
        BoundCheck("aggregate_kl >= 0", -report.aggregate_kl, 0.0, tol),
    ]
    return BoundVerification(checks, {"r_avg": report.r_avg, "i_q": report.i_q,
                                      "aggregate_kl": report.aggregate_kl, "tolerance": tol})


def verify_flat_bounds(model, dataset, resolution=DEFAULT_RESOLUTION):
    q = _flat_posteriors(model, dataset)
    if q.dim > 2:
        return check_flat_report(mi_monte_carlo(model, dataset))
    return check_flat_report(quadrature_report(q.mean, q.log_var, resolution))


# -- hierarchical ------------------------------------------------------------------------------

def _mixture_mi_1d(means, log_vars, owner, n_owners, resolution):
    """Quadrature MI between the owner index and z for per-owner Gaussian mixtures.

    Component ``k`` belongs to example ``owner[k]``; each example's density is
    the equal-weight mixture of its components.  Returns ``(I, error_bound)``.
    """
    counts = np.bincount(owner, minlength=n_owners)

    def integrate(res):
        axes = _axes(means, log_vars, res)
        mesh = np.meshgrid(*axes, indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=1)
        wmesh = np.meshgrid(*[_trapezoid_weights(a) for a in axes], indexing="ij")
        weights = np.prod(np.stack([w.ravel() for w in wmesh], axis=1), axis=1)
        total = 0.0
        step = max(1, (1 << 22) // len(means))
        for s in range(0, len(points), step):
            z, w = points[s:s + step], weights[s:s + step]
            lc = _log_normal(z, means, log_vars)
            m = lc.max(axis=0)
            per_x = np.zeros((n_owners, len(z)))
            np.add.at(per_x, owner, np.exp(lc - m))
            with np.errstate(divide="ignore"):
                lx = np.log(per_x / counts[:, None]) + m
            lq = logsumexp(lx, axis=0) - math.log(n_owners)
            qx = np.exp(lx)
            total += np.sum(np.where(qx > 0, qx * (lx - lq), 0.0) @ w) / n_owners
        return total

    full = integrate(resolution)
    half = integrate(resolution // 2)
    return full, abs(full - half) + _tail_bound(means, log_vars)


def _joint_mi_grid(model, mean_l, lv_l, resolution):
    """I_q(X; [Z_H, Z_L]) by 2-D quadrature, for latent_dim == 1."""
    N = mean_l.shape[0]

    def integrate(res):
        zl = _axes(mean_l, lv_l, res)[0]
        wl = _trapezoid_weights(zl)
        qh = model.high_posterior(zl[:, None])
        zh = _axes(qh.mean, qh.log_var, res)[0]
        wh = _trapezoid_weights(zh)
        log_h = _log_normal(zh[:, None], qh.mean, qh.log_var)  # (G_L, G_H)
        log_l = _log_normal(zl[:, None], mean_l, lv_l)  # (N, G_L)
        total = 0.0
        for i in range(len(zl)):
            lj = log_l[:, i, None] + log_h[i][None, :]  # (N, G_H)
            lq = logsumexp(lj, axis=0) - math.log(N)
            total += wl[i] * np.sum(np.exp(lj) * (lj - lq) @ wh) / N
        return total, (qh.mean, qh.log_var)

    full, (mh, lvh) = integrate(resolution)
    half, _ = integrate(resolution // 2)
    tails = _tail_bound(mean_l, lv_l) + _tail_bound(mh, lvh)
    return full, abs(full - half) + tails


def _joint_mi_mc(model, mean_l, lv_l, rng, samples):
    N, Z = mean_l.shape
    std_l = np.exp(0.5 * lv_l)
    scores = np.empty((N, samples))
    for n in range(N):
        zl = mean_l[n] + std_l[n] * rng.standard_normal((samples, Z))
        qh = model.high_posterior(zl)
        zh = qh.mean + qh.std * rng.standard_normal(zl.shape)
        ll = _log_normal(zl, mean_l, lv_l)
        lh = _log_normal(zh, qh.mean, qh.log_var).diagonal()
        lj = ll + lh[None, :]
        scores[n] = lj[n] - (logsumexp(lj, axis=0) - math.log(N))
    err = float(np.sqrt(np.sum(scores.var(axis=1, ddof=1) / samples)) / N)
    return float(scores.mean()), 3.0 * err


def verify_hier_bounds(model, dataset, mc_samples=HIGH_MARGINAL_SAMPLES, seed=0,
                       resolution=DEFAULT_RESOLUTION):
    """Estimate the hierarchical rates and informations and check their relations.

    ``q(z_H|x)`` is the mixture of ``q_H(.|z_L)`` over ``mc_samples`` draws of
    ``z_L ~ q(z_L|x)``; the same draws give ``R_avg_H``, so the first bound is
    checked on matched samples.
    """
    c = model.config
    if not c.hierarchical:
        raise ConfigurationError("verify_hier_bounds needs a hierarchical model")
    if c.latent_dim > 2:
        raise ConfigurationError("hierarchical verification uses quadrature; latent_dim must be <= 2")
    if not dataset:
        raise ConfigurationError("dataset is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 19]))
    q_low = model.posteriors(dataset)
    N, Z = q_low.mean.shape
    eps = rng.standard_normal((N, mc_samples, Z))
    z_low = (q_low.mean[:, None] + q_low.std[:, None] * eps).reshape(-1, Z)
    q_high = model.high_posterior(z_low)
    kl_high = kl_standard(q_high.mean, q_high.log_var).reshape(N, mc_samples)
    r_avg_high = float(kl_high.mean())
    r_high_err = float(kl_high.std(ddof=1) / math.sqrt(kl_high.size))

    z_high = q_high.mean + q_high.std * rng.standard_normal(z_low.shape)
    p_low = model.conditional_prior(z_high)
    lq = -0.5 * np.sum(LOG_2PI + np.repeat(q_low.log_var, mc_samples, 0) + eps.reshape(-1, Z) ** 2, 1)
    lp = -0.5 * np.sum(LOG_2PI + p_low.log_var + (z_low - p_low.mean) ** 2 / p_low.var, 1)
    r_low = (lq - lp).reshape(N, mc_samples)
    r_avg_low = float(r_low.mean())
    r_low_err = float(r_low.std(ddof=1) / math.sqrt(r_low.size))

    owner = np.repeat(np.arange(N), mc_samples)
    i_high, err_high = _mixture_mi_1d(q_high.mean, q_high.log_var, owner, N, resolution) \
        if Z == 1 else _mixture_mi_2d(q_high, owner, N, resolution)
    low = quadrature_report(q_low.mean, q_low.log_var, resolution)
    i_low, err_low = low.i_q, low.error_bound
    if Z == 1:
        i_joint, err_joint = _joint_mi_grid(model, q_low.mean, q_low.log_var, resolution)
    else:
        i_joint, err_joint = _joint_mi_mc(model, q_low.mean, q_low.log_var, rng, 64)

    base = MIN_TOLERANCE
    mc = 3.0 * math.hypot(r_high_err, r_low_err)
    checks = [
        BoundCheck("I_q(X;[Z_H,Z_L]) <= R_avg", i_joint, r_avg_high + r_avg_low,
                   max(base, err_joint + mc)),
        BoundCheck("I_q(X;Z_H) <= R_avg_H", i_high, r_avg_high, max(base, err_high)),
        BoundCheck("I_q(X;Z_L) <= R_avg_H + R_avg_L", i_low, r_avg_high + r_avg_low,
                   max(base, err_low + mc)),
        BoundCheck("I_q(X;[Z_H,Z_L]) == I_q(X;Z_L)", i_joint, i_low,
                   max(base, err_joint + err_low), "=="),
        BoundCheck("I_q(X;Z_H) <= I_q(X;Z_L)", i_high, i_low,
                   max(base, err_high + err_low + 3.0 * r_high_err)),
    ]
    quantities = {
        "r_avg_high": r_avg_high, "r_avg_low": r_avg_low,
        "r_avg": r_avg_high + r_avg_low, "i_q_high": i_high, "i_q_low": i_low,
        "i_q_joint": i_joint, "mc_std_err": math.hypot(r_high_err, r_low_err),
    }
    return BoundVerification(checks, quantities)


def _mixture_mi_2d(q_high, owner, n_owners, resolution):
    # 2-D mixtures with N*K components over a 512^2 grid are too costly to
    # integrate exactly; a coarser grid keeps the same estimator.
    return _mixture_mi_1d(q_high.mean, q_high.log_var, owner, n_owners, min(resolution, 128))
