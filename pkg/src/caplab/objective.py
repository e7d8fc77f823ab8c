"""Negative ELBO terms and the capacity-constrained Lagrangian training loop.

The model parameters minimize ``recon + beta * (R - C)`` with Adam while each
multiplier ``beta = softplus(lambda_raw)`` is pushed up by momentum-SGD
ascent on ``sigmoid(lambda_raw) * (R - C)``.  Both updates use the same
batch statistics and run every step.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from caplab.errors import ConfigurationError, TrainingError
from caplab.model import Batch, Model, save_checkpoint
from caplab.numerics import adam_step, sgd_momentum_step, sigmoid, softplus
from caplab.toydata import pad_frames

LAMBDA_INIT = math.log(math.e - 1.0)  # softplus(LAMBDA_INIT) == 1
LR_FACTORS = (1.0, 0.5, 0.3, 0.1, 0.05)
LR_BOUNDARIES = (1 / 6, 2 / 6, 3 / 6, 4 / 6)
METRIC_FIELDS = ("step", "recon_nll", "R", "R_H", "R_L", "beta", "beta_H", "beta_L", "lr")


@dataclass
class LagrangeState:
    lambda_raw: float = LAMBDA_INIT
    momentum_buffer: float = 0.0
    lr: float = 1e-5
    momentum: float = 0.9

    @property
    def beta(self):
        return softplus(self.lambda_raw)

    def ascend(self, grad):
        self.lambda_raw, self.momentum_buffer = sgd_momentum_step(
            self.lambda_raw, grad, self.momentum_buffer, self.lr, self.momentum
        )


@dataclass(frozen=True)
class CapacityTarget:
    """Either a flat limit ``C`` or a hierarchical pair ``(C_H, C_L)``, in nats."""

    capacity: float = None
    capacity_high: float = None
    capacity_low: float = None

    def __post_init__(self):
        if self.hierarchical:
            if self.capacity is not None:
                raise ConfigurationError("give either C or (C_H, C_L), not both")
            if self.capacity_high is None or self.capacity_low is None:
                raise ConfigurationError("hierarchical target needs both C_H and C_L")
            values = (self.capacity_high, self.capacity_low)
        else:
            if self.capacity is None:
                raise ConfigurationError("flat target needs C")
            values = (self.capacity,)
        if any(not v >= 0 for v in values):
            raise ConfigurationError("capacity limits must be non-negative numbers")

    @classmethod
    def flat(cls, c):
        return cls(capacity=float(c))

    @classmethod
    def hier(cls, c_high, c_low):
        return cls(capacity_high=float(c_high), capacity_low=float(c_low))

    @property
    def hierarchical(self):
        return self.capacity_high is not None or self.capacity_low is not None

    @property
    def limits(self):
        if self.hierarchical:
            return (self.capacity_high, self.capacity_low)
        return (self.capacity,)


@dataclass
class StepMetrics:
    step: int
    recon_nll: float
    R: float
    R_H: float = float("nan")
    R_L: float = float("nan")
    beta: float = float("nan")
    beta_H: float = float("nan")
    beta_L: float = float("nan")
    lr: float = float("nan")

    def row(self):
        return [self.step] + [repr(float(getattr(self, k))) for k in METRIC_FIELDS[1:]]


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-3
    dual_lr: float = 1e-5
    dual_lr_scale: float = 300.0
    dual_momentum: float = 0.9
    clip_norm: float = 5.0
    fixed_beta: float = None
    checkpoint_every: int = 1000


@dataclass
class TrainResult:
    model: Model
    metrics: list
    duals: list = field(default_factory=list)

    def trailing(self, key, window):
        vals = [getattr(m, key) for m in self.metrics[-window:]]
        return float(np.mean(vals))


def lr_at(step, total_steps, base_lr=1e-3):
    """Piecewise-constant decay: base, 0.5x, 0.3x, 0.1x, 0.05x at 1/6..4/6 of the run."""
    frac = step / max(total_steps, 1)
    k = sum(frac >= b for b in LR_BOUNDARIES)
    return base_lr * LR_FACTORS[k]


# -- per-utterance terms ------------------------------------------------------------

def _single(model, utterance, rng):
    batch = Batch.from_utterances([utterance])
    eps = rng.standard_normal(model.eps_shape(1))
    return model.forward_backward(batch, eps, (0.0,) * (2 if model.config.hierarchical else 1),
                                  backward=False)


def elbo_terms(model: Model, utterance, rng=None):
    """Single-sample ``(recon_nll, R)`` for a flat variational model."""
    if not model.config.variational or model.config.hierarchical:
        raise ConfigurationError("elbo_terms needs a flat variational model")
    t = _single(model, utterance, rng or np.random.default_rng())
    return float(t.recon[0]), float(t.rate[0])


def hier_elbo_terms(model: Model, utterance, rng=None):
    """Single-sample ``(recon_nll, R_H, R_L)`` for a hierarchical model."""
    if not model.config.hierarchical:
        raise ConfigurationError("hier_elbo_terms needs a hierarchical model")
    t = _single(model, utterance, rng or np.random.default_rng())
    return float(t.recon[0]), float(t.rate_high[0]), float(t.rate_low[0])


def lagrangian(recon_nll, rate, beta, capacity):
    if beta < 0:
        raise ConfigurationError("beta must be non-negative")
    return recon_nll + beta * (rate - capacity)


def dual_grad(rate, capacity, lambda_raw):
    """Derivative of the Lagrangian w.r.t. the raw multiplier (rate held fixed)."""
    return sigmoid(lambda_raw) * (rate - capacity)


def hier_lagrangian(recon_nll, r_high, r_low, beta_high, beta_low, c_high, c_low):
    if beta_high < 0 or beta_low < 0:
        raise ConfigurationError("multipliers must be non-negative")
    return recon_nll + beta_high * (r_high - c_high) + beta_low * (r_low - c_low)


def hier_dual_grads(r_high, r_low, c_high, c_low, lambda_high, lambda_low):
    return dual_grad(r_high, c_high, lambda_high), dual_grad(r_low, c_low, lambda_low)


# -- training ------------------------------------------------------------------------

def _clip(store, max_norm):
    norm = store.grad_norm()
    if not math.isfinite(norm):
        bad = [k for k, g in store.grads.items() if not np.all(np.isfinite(g))]
        raise TrainingError(f"non-finite gradient for parameters {bad}")
    if max_norm and norm > max_norm:
        store.scale_grads(max_norm / norm)
    return norm


def train(model: Model, dataset, target: CapacityTarget, config: TrainConfig = None, seed=0,
          checkpoint_path=None, metrics_path=None, callback=None) -> TrainResult:
    """Optimize ``model`` in place on ``dataset`` under ``target``.

    Deterministic given ``seed``.  On a non-finite loss a :class:`TrainingError`
    is raised; if ``checkpoint_path`` is set it then holds the parameters from
    the last periodic snapshot.
    """
    config = config or TrainConfig()
    if not dataset:
        raise ConfigurationError("dataset is empty")
    c = model.config
    if c.variational and target.hierarchical != c.hierarchical:
        raise ConfigurationError("capacity target does not match the model's latent structure")
    batch_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    eps_rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    frames_all, lengths_all = pad_frames(dataset)
    y_text = np.array([u.y_text for u in dataset], dtype=np.int64)
    y_spk = np.array([u.y_speaker for u in dataset], dtype=np.int64)
    n = len(dataset)
    bsz = min(config.batch_size, n)
    duals = [
        LagrangeState(lr=config.dual_lr * config.dual_lr_scale, momentum=config.dual_momentum)
        for _ in target.limits
    ]
    limits = target.limits
    metrics = []
    last_good = model.params.copy()
    # divergence is detected from the loss value, so numpy's warnings are redundant
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(config.steps):
            idx = batch_rng.choice(n, size=bsz, replace=False)
            lens = lengths_all[idx]
            batch = Batch(frames_all[idx, :lens.max()], lens, y_text[idx], y_spk[idx])
            eps = eps_rng.standard_normal(model.eps_shape(bsz))
            if config.fixed_beta is not None:
                betas = tuple(float(config.fixed_beta) for _ in limits)
            else:
                betas = tuple(d.beta for d in duals)
            if not c.variational:
                betas = ()
            model.params.zero_grad()
            terms = model.forward_backward(batch, eps, betas)
            recon = float(terms.recon.mean())
            rates = (float(terms.rate_high.mean()), float(terms.rate_low.mean())) \
                if c.hierarchical else (float(terms.rate.mean()),)
            loss = recon + sum(b * (r - cap) for b, r, cap in zip(betas, rates, limits))
            if not math.isfinite(loss):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, Model(c, last_good))
                raise TrainingError(f"non-finite loss at step {step}")
            _clip(model.params, config.clip_norm)
            lr = lr_at(step, config.steps, config.lr)
            adam_step(model.params, lr)
            if c.variational and config.fixed_beta is None:
                for d, r, cap in zip(duals, rates, limits):
                    d.ascend(dual_grad(r, cap, d.lambda_raw))
            m = StepMetrics(step, recon, float(terms.rate.mean()), lr=lr)
            if c.hierarchical:
                m.R_H, m.R_L = rates
                m.beta_H, m.beta_L = betas
            elif c.variational:
                m.beta = betas[0]
            metrics.append(m)
            if callback is not None:
                callback(m)
            if (step + 1) % config.checkpoint_every == 0:
                last_good = model.params.copy()
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    return TrainResult(model, metrics, duals)


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for m in metrics:
        w.writerow(m.row())
    return buf.getvalue()


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(metrics))


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        StepMetrics(int(r["step"]), *(float(r[k]) for k in METRIC_FIELDS[1:]))
        for r in rows
    ]


def evaluate(model: Model, dataset, seed=0, samples=1):
    """Mean held-out ``(recon_nll, R)`` with ``samples`` latent draws per example."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    batch = Batch.from_utterances(dataset)
    zeros = (0.0,) * (2 if model.config.hierarchical else 1)
    recon, rate = [], []
    for _ in range(samples):
        eps = rng.standard_normal(model.eps_shape(batch.size))
        t = model.forward_backward(batch, eps, zeros, backward=False)
        recon.append(t.recon)
        rate.append(t.rate)
    return float(np.mean(recon)), float(np.mean(rate))
