"""Transfer and sampling tasks scored with MCD-DTW.

Tasks:

* ``same_text``: re-synthesize a reference with its own labels;
* ``inter_text``: keep the reference speaker, switch the text class;
* ``inter_speaker``: keep the text class, switch the speaker.

Latent levels: ``flat`` takes the posterior mean of the reference (or a draw
when ``use_mean`` is off); ``via_z_L`` draws fresh ``z_L ~ q(z_L|x)`` per
sample; ``via_z_H`` infers one ``z_H`` and draws ``z_L ~ p(z_L|z_H)`` per
sample.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from caplab.errors import ConfigurationError
from caplab.mcd import mcd_dtw
from caplab.toydata import TEMPO_RANGE

LEVELS = ("flat", "via_z_H", "via_z_L")
TASKS = ("same_text", "inter_text", "inter_speaker")
DEFAULT_SAMPLES = 5
CSV_FIELDS = ("task", "capacity", "ref_dist", "xsamp_dist", "n")


@dataclass
class TransferJob:
    reference: object  # Utterance
    target_y_text: int
    target_y_speaker: int
    latent_level: str = "flat"
    num_samples: int = 1
    use_mean: bool = True

    def __post_init__(self):
        if self.num_samples < 1:
            raise ConfigurationError("num_samples must be at least 1")
        if self.latent_level not in LEVELS:
            raise ConfigurationError(f"latent_level must be one of {LEVELS}")


@dataclass
class TransferSummary:
    task: str
    level: str
    capacity: str
    ref_dist: float
    xsamp_dist: float
    n: int
    per_reference: np.ndarray  # (n,) mean distance to the reference
    per_reference_xsamp: np.ndarray  # (n,) mean first-vs-rest distance

    def row(self):
        return [self.task, self.capacity, repr(self.ref_dist), repr(self.xsamp_dist), self.n]


def default_max_len(training_data):
    """Free-running cap: twice the longest training utterance."""
    return 2 * max(u.length for u in training_data)


def _check_level(model, level):
    c = model.config
    if level not in LEVELS:
        raise ConfigurationError(f"latent_level must be one of {LEVELS}")
    if level != "flat" and not c.hierarchical:
        raise ConfigurationError(f"{level} transfer needs a hierarchical model")


def _latents(model, references, level, num_samples, use_mean, rng):
    """Latents fed to the decoder, shaped (n_refs, num_samples, dim)."""
    c = model.config
    n = len(references)
    if not c.variational:
        emb = np.stack([model.heuristic_bottleneck(model.encode_reference(u.frames))
                        for u in references])
        return np.repeat(emb[:, None], num_samples, axis=1)
    q = model.posteriors(references)
    Z = q.dim
    if level == "flat":
        if use_mean:
            return np.repeat(q.mean[:, None], num_samples, axis=1)
        eps = rng.standard_normal((n, 1, Z))
        return np.repeat(q.mean[:, None] + q.std[:, None] * eps, num_samples, axis=1)
    if level == "via_z_L":
        return q.mean[:, None] + q.std[:, None] * rng.standard_normal((n, num_samples, Z))
    z_low = q.mean + q.std * rng.standard_normal((n, Z))
    q_high = model.high_posterior(z_low)
    z_high = q_high.mean + q_high.std * rng.standard_normal((n, Z))
    p_low = model.conditional_prior(z_high)
    eps = rng.standard_normal((n, num_samples, Z))
    return p_low.mean[:, None] + p_low.std[:, None] * eps


def generate(model, references, target_text, target_speaker, level="flat", num_samples=1,
             seed=0, max_len=100, use_mean=True):
    """Decode ``num_samples`` outputs per reference; returns a list of lists of arrays."""
    _check_level(model, level)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 23]))
    z = _latents(model, references, level, num_samples, use_mean, rng)
    n, S, Z = z.shape
    y_t = np.repeat(np.asarray(target_text, dtype=np.int64), S)
    y_s = np.repeat(np.asarray(target_speaker, dtype=np.int64), S)
    flat = model.decode_free_running_batch(z.reshape(n * S, Z), y_t, y_s, max_len)
    return [flat[i * S:(i + 1) * S] for i in range(n)]


def transfer(model, job: TransferJob, seed=0, max_len=100):
    """Generated frame sequences for one reference."""
    return generate(model, [job.reference], [job.target_y_text], [job.target_y_speaker],
                    job.latent_level, job.num_samples, seed, max_len, job.use_mean)[0]


def prior_sample(model, y_text, y_speaker, n, seed=0, max_len=100):
    """Decode ``n`` latents drawn from the prior (through ``p(z_L|z_H)`` when hierarchical)."""
    if n == 0:
        return []
    if not model.config.variational:
        raise ConfigurationError("prior sampling needs a variational model")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))
    Z = model.config.latent_dim
    z = rng.standard_normal((n, Z))
    if model.config.hierarchical:
        p_low = model.conditional_prior(z)
        z = p_low.mean + p_low.std * rng.standard_normal((n, Z))
    y_t = np.broadcast_to(np.asarray(y_text, dtype=np.int64), (n,))
    y_s = np.broadcast_to(np.asarray(y_speaker, dtype=np.int64), (n,))
    return model.decode_free_running_batch(z, y_t, y_s, max_len)


def length_range(base_length):
    lo, hi = TEMPO_RANGE
    return int(round(base_length * lo)), int(round(base_length * hi))


def length_consistency(sequences, y_text, base_lengths):
    """Fraction of sequences whose length is reachable for their text class."""
    y_text = np.broadcast_to(np.asarray(y_text), (len(sequences),))
    hits = 0
    for seq, y in zip(sequences, y_text):
        lo, hi = length_range(base_lengths[int(y)])
        hits += lo <= len(seq) <= hi
    return hits / max(len(sequences), 1)


def task_targets(task, references, num_text_classes, num_speakers, seed=0):
    """Target labels for each reference under ``task``; switched labels always differ."""
    if task not in TASKS:
        raise ConfigurationError(f"task must be one of {TASKS}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    y_t = np.array([u.y_text for u in references], dtype=np.int64)
    y_s = np.array([u.y_speaker for u in references], dtype=np.int64)
    if task == "inter_text":
        y_t = (y_t + rng.integers(1, num_text_classes, size=len(y_t))) % num_text_classes
    elif task == "inter_speaker":
        y_s = (y_s + rng.integers(1, num_speakers, size=len(y_s))) % num_speakers
    return y_t, y_s


def evaluate_transfer(model, references, task="same_text", level="flat",
                      num_samples=DEFAULT_SAMPLES, seed=0, max_len=100, capacity="",
                      generator=None):
    """Mean MCD-DTW to the reference and between the first and later samples.

    ``generator(references, y_text, y_speaker)`` may replace the model decode;
    it must return ``num_samples`` sequences per reference.
    """
    c = model.config if model is not None else None
    y_t, y_s = task_targets(task, references,
                            c.num_text_classes if c else 2, c.num_speakers if c else 2, seed)
    if generator is None:
        outputs = generate(model, references, y_t, y_s, level, num_samples, seed, max_len)
    else:
        outputs = generator(references, y_t, y_s)
    ref_d = np.empty(len(references))
    xs_d = np.zeros(len(references))
    for i, (ref, outs) in enumerate(zip(references, outputs)):
        ref_d[i] = np.mean([mcd_dtw(o, ref.frames) for o in outs])
        if len(outs) > 1:
            xs_d[i] = np.mean([mcd_dtw(outs[0], o) for o in outs[1:]])
    return TransferSummary(task, level, capacity, float(ref_d.mean()), float(xs_d.mean()),
                           len(references), ref_d, xs_d)


def summary_csv(summaries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for s in summaries:
        w.writerow(s.row())
    return buf.getvalue()
