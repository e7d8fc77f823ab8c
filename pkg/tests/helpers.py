"""Shared builders for the test suite."""
import numpy as np

from caplab.model import Batch, Model, ModelConfig
from caplab.numerics import finite_diff_check
from caplab.toydata import ToySpec, generate_dataset


def tiny_spec(seed=0):
    return ToySpec(channels=3, num_text_classes=3, num_speakers=2, base_lengths=[12, 16, 20],
                   seed=seed)


def short_utterance(seed, channels=3, length=3):
    """A random utterance trimmed to ``length`` frames."""
    spec = ToySpec(channels=channels, num_text_classes=3, num_speakers=2,
                   base_lengths=[12, 16, 20], seed=seed)
    u = generate_dataset(spec, 1)[0]
    u.frames = u.frames[:length].copy()
    return u


def tiny_model(seed=0, **overrides):
    cfg = dict(latent_dim=2, hidden_dim=5, channels=3, num_text_classes=3, num_speakers=2)
    cfg.update(overrides)
    model = Model.init(ModelConfig(**cfg), seed)
    # perturb biases away from zero so every code path is exercised
    rng = np.random.default_rng(seed + 1000)
    for name in model.params.names():
        p = model.params[name]
        p += 0.05 * rng.standard_normal(p.shape)
    return model


def loss_gradcheck(model, utterances, kl_weights, seed=0, max_entries=None):
    """Finite-difference check of the weighted loss returned by ``forward_backward``."""
    batch = Batch.from_utterances(utterances)
    eps = np.random.default_rng(seed).standard_normal(model.eps_shape(batch.size))
    weights = np.full(batch.size, 1.0 / batch.size)

    def loss(_store):
        t = model.forward_backward(batch, eps, kl_weights, backward=False)
        total = t.recon.copy()
        if model.config.hierarchical:
            total += kl_weights[0] * t.rate_high + kl_weights[1] * t.rate_low
        elif model.config.variational:
            total += kl_weights[0] * t.rate
        return float(weights @ total), t.signature

    model.params.zero_grad()
    model.forward_backward(batch, eps, kl_weights)
    analytic = {k: v.copy() for k, v in model.params.grads.items()}
    return finite_diff_check(loss, model.params, analytic, max_entries=max_entries,
                             rng=np.random.default_rng(seed))
