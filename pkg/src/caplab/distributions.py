"""Diagonal Gaussians parameterized by mean and log-variance.

All densities and divergences are in nats.  Arrays may carry leading batch
axes; reductions run over the last axis only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from caplab.errors import ConfigurationError

LOG_VAR_MIN = -12.0
LOG_VAR_MAX = 12.0
LOG_2PI = math.log(2.0 * math.pi)


def clamp_log_var(log_var):
    """Hard-saturate to [-12, 12]; returns ``(clamped, passthrough_mask)``.

    The mask is the derivative of the clamp (zero where it saturates).
    """
    log_var = np.asarray(log_var, dtype=np.float64)
    inside = (log_var >= LOG_VAR_MIN) & (log_var <= LOG_VAR_MAX)
    return np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX), inside.astype(np.float64)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        log_var, _ = clamp_log_var(self.log_var)
        if mean.shape != log_var.shape:
            raise ConfigurationError(
                f"mean {mean.shape} and log_var {log_var.shape} differ in shape"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", log_var)

    @property
    def dim(self):
        return self.mean.shape[-1]

    @property
    def var(self):
        return np.exp(self.log_var)

    @property
    def std(self):
        return np.exp(0.5 * self.log_var)

    def __getitem__(self, idx):
        return DiagGaussian(self.mean[idx], self.log_var[idx])


def standard_prior(dim):
    if dim < 1:
        raise ConfigurationError("prior dimension must be at least 1")
    return DiagGaussian(np.zeros(dim), np.zeros(dim))


def sample_reparam(d: DiagGaussian, eps):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != d.dim:
        raise ConfigurationError(f"eps has {eps.shape[-1]} entries, distribution has {d.dim}")
    return d.mean + d.std * eps


def sample_reparam_backward(d_z, d: DiagGaussian, eps):
    """Return ``(d_mean, d_log_var)`` for :func:`sample_reparam`."""
    return d_z, d_z * 0.5 * d.std * eps


def log_prob(d: DiagGaussian, z):
    z = np.asarray(z, dtype=np.float64)
    return np.sum(
        -0.5 * LOG_2PI - 0.5 * d.log_var - (z - d.mean) ** 2 / (2.0 * d.var), axis=-1
    )


def entropy(d: DiagGaussian):
    return np.sum(0.5 * (LOG_2PI + 1.0) + 0.5 * d.log_var, axis=-1)


def kl_divergence(q: DiagGaussian, p: DiagGaussian):
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ConfigurationError("KL between distributions of different dimension")
    var_q, var_p = q.var, p.var
    return np.sum(
        0.5 * (p.log_var - q.log_var) + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p) - 0.5,
        axis=-1,
    )


def kl_backward(q: DiagGaussian, p: DiagGaussian, d_out=1.0):
    """Gradients of :func:`kl_divergence` w.r.t. ``(q.mean, q.log_var, p.mean, p.log_var)``.

    ``d_out`` broadcasts against the batch axes.
    """
    d_out = np.asarray(d_out, dtype=np.float64)[..., None]
    var_q, var_p = q.var, p.var
    diff = q.mean - p.mean
    d_mq = d_out * diff / var_p
    d_lvq = d_out * 0.5 * (var_q / var_p - 1.0)
    d_mp = -d_mq
    d_lvp = d_out * 0.5 * (1.0 - (var_q + diff**2) / var_p)
    return d_mq, d_lvq, d_mp, d_lvp


def kl_standard(mean, log_var):
    """KL of ``N(mean, e^log_var)`` from ``N(0, I)`` on raw arrays."""
    return np.sum(0.5 * (np.exp(log_var) + mean**2 - 1.0 - log_var), axis=-1)
