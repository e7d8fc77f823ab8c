"""Conditional sequence model with flat or hierarchical variational latents.

Components:

* reference encoder: a tanh recurrent cell over the frames, final state kept;
* condition summary: learned text and speaker embedding rows;
* posterior: one-hidden-layer tanh MLP producing a diagonal Gaussian;
* decoder: a tanh recurrent cell fed the previous frame and a constant context
  ``[z, text_emb, speaker_emb]``, with a linear frame head and a stop logit.

Everything runs on zero-padded batches.  Gradients are hand-derived; the
``*_backward`` methods accumulate into ``self.params.grads``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from caplab import kernels
from caplab.distributions import DiagGaussian, clamp_log_var, kl_backward, kl_divergence
from caplab.errors import ConfigurationError, FormatError, InputError
from caplab.numerics import ParamStore, sigmoid, softplus
from caplab.toydata import pad_frames

EMBED_DIM = 8
BOTTLENECKS = ("variational", "tanh_heuristic")
R_LOW_ESTIMATORS = ("joint", "conditional_kl")


@dataclass
class ModelConfig:
    latent_dim: int = 2
    hidden_dim: int = 32
    hierarchical: bool = False
    condition_on_text: bool = True
    condition_on_speaker: bool = True
    bottleneck: str = "variational"
    channels: int = 8
    num_text_classes: int = 10
    num_speakers: int = 4
    r_low_estimator: str = "joint"

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ConfigurationError("latent_dim and hidden_dim must be at least 1")
        if self.bottleneck not in BOTTLENECKS:
            raise ConfigurationError(f"bottleneck must be one of {BOTTLENECKS}")
        if self.hierarchical and self.bottleneck != "variational":
            raise ConfigurationError("a hierarchical model must use the variational bottleneck")
        if self.r_low_estimator not in R_LOW_ESTIMATORS:
            raise ConfigurationError(f"r_low_estimator must be one of {R_LOW_ESTIMATORS}")

    @property
    def variational(self):
        return self.bottleneck == "variational"

    @property
    def cond_dim(self):
        return EMBED_DIM * (int(self.condition_on_text) + int(self.condition_on_speaker))

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ConfigurationError(f"unknown model setting {key!r}")
            kind = types[key]
            if kind in ("bool", bool):
                kwargs[key] = value.lower() in ("1", "true", "yes", "on")
            elif kind in ("int", int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class Batch:
    frames: np.ndarray  # (B, L, D), zero beyond each length
    lengths: np.ndarray  # (B,)
    y_text: np.ndarray
    y_speaker: np.ndarray

    @classmethod
    def from_utterances(cls, utterances):
        frames, lengths = pad_frames(utterances)
        return cls(
            frames,
            lengths,
            np.array([u.y_text for u in utterances], dtype=np.int64),
            np.array([u.y_speaker for u in utterances], dtype=np.int64),
        )

    @property
    def size(self):
        return self.frames.shape[0]

    @property
    def mask(self):
        return np.arange(self.frames.shape[1])[None, :] < self.lengths[:, None]


@dataclass
class EncodedReference:
    summary: np.ndarray


@dataclass
class HierLatents:
    z_high: np.ndarray
    z_low: np.ndarray
    q_low: DiagGaussian
    q_high: DiagGaussian
    p_low_given_high: DiagGaussian


@dataclass
class DecodeResult:
    predicted: np.ndarray
    recon_nll: float
    l1: float
    stop_ce: float

    @property
    def per_frame(self):
        return self.recon_nll / self.predicted.shape[0]


@dataclass
class BatchTerms:
    """Per-example loss terms of one forward pass (arrays of shape (B,))."""

    recon: np.ndarray
    rate: np.ndarray
    rate_high: np.ndarray = None
    rate_low: np.ndarray = None
    signature: bytes = b""


def _stream(seed, name):
    """Independent generator per parameter, so shapes elsewhere never shift the draws."""
    return np.random.default_rng(np.random.SeedSequence([seed, 7, zlib.crc32(name.encode())]))


def _glorot(seed, name, rows, cols, scale=1.0):
    return _stream(seed, name).normal(0.0, scale / np.sqrt(cols), size=(rows, cols))


class Model:
    def __init__(self, config: ModelConfig, params: ParamStore):
        self.config = config
        self.params = params

    # -- construction -----------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed=0):
        c = config
        H, D, Z, E = c.hidden_dim, c.channels, c.latent_dim, EMBED_DIM
        ps = ParamStore()
        ps.add("enc.w_x", _glorot(seed, "enc.w_x", H, D))
        ps.add("enc.w_h", _glorot(seed, "enc.w_h", H, H, 0.5))
        ps.add("enc.b", np.zeros(H))
        ps.add("emb.text", _stream(seed, "emb.text").normal(size=(c.num_text_classes, E)))
        ps.add("emb.speaker", _stream(seed, "emb.speaker").normal(size=(c.num_speakers, E)))
        if c.variational:
            cls._add_mlp(ps, seed, "post", H + c.cond_dim, H, Z)
        else:
            ps.add("bneck.w", _glorot(seed, "bneck.w", Z, H))
            ps.add("bneck.b", np.zeros(Z))
        if c.hierarchical:
            cls._add_mlp(ps, seed, "qh", Z, H, Z)
            cls._add_mlp(ps, seed, "pl", Z, H, Z)
        ps.add("dec.w_x", _glorot(seed, "dec.w_x", H, D))
        # latent and label columns come from separate streams
        fan_in = np.sqrt(Z + 2 * E)
        w_z = _stream(seed, "dec.w_c.z").normal(size=(Z, H)).T
        w_y = _stream(seed, "dec.w_c.y").normal(size=(H, 2 * E))
        ps.add("dec.w_c", np.concatenate([w_z, w_y], axis=1) / fan_in)
        ps.add("dec.w_h", _glorot(seed, "dec.w_h", H, H, 0.5))
        ps.add("dec.b", np.zeros(H))
        ps.add("out.w", _glorot(seed, "out.w", D, H))
        ps.add("out.b", np.zeros(D))
        ps.add("stop.w", _glorot(seed, "stop.w", 1, H)[0])
        ps.add("stop.b", np.array([-3.0]))
        return cls(config, ps)

    @staticmethod
    def _add_mlp(ps, seed, prefix, n_in, n_hidden, n_out):
        ps.add(f"{prefix}.w1", _glorot(seed, f"{prefix}.w1", n_hidden, n_in))
        ps.add(f"{prefix}.b1", np.zeros(n_hidden))
        ps.add(f"{prefix}.w_mu", _glorot(seed, f"{prefix}.w_mu", n_out, n_hidden, 0.1))
        ps.add(f"{prefix}.b_mu", np.zeros(n_out))
        ps.add(f"{prefix}.w_lv", _glorot(seed, f"{prefix}.w_lv", n_out, n_hidden, 0.1))
        ps.add(f"{prefix}.b_lv", np.zeros(n_out))

    def expected_shapes(self):
        return {k: v.shape for k, v in Model.init(self.config, 0).params.params.items()}

    def p(self, name):
        return self.params.params[name]

    def g(self, name):
        return self.params.grads[name]

    # -- reference encoder ------------------------------------------------------

    def _encode(self, frames, lengths):
        pre = frames @ self.p("enc.w_x").T + self.p("enc.b")
        hs = kernels.rnn_forward(np.ascontiguousarray(pre), self.p("enc.w_h"), lengths)
        summary = hs[np.arange(len(lengths)), lengths - 1]
        return summary, (frames, lengths, hs)

    def _encode_backward(self, d_summary, cache):
        frames, lengths, hs = cache
        B, L, H = hs.shape
        d_hs = np.zeros_like(hs)
        d_hs[np.arange(B), lengths - 1] = d_summary
        d_pre, d_wh = kernels.rnn_backward(hs, self.p("enc.w_h"), d_hs, lengths)
        self.g("enc.w_h")[...] += d_wh
        self.g("enc.w_x")[...] += d_pre.reshape(-1, H).T @ frames.reshape(-1, frames.shape[2])
        self.g("enc.b")[...] += d_pre.sum(axis=(0, 1))

    # -- conditioning -------------------------------------------------------------

    def _check_labels(self, y_text, y_speaker):
        y_text = np.atleast_1d(np.asarray(y_text, dtype=np.int64))
        y_speaker = np.atleast_1d(np.asarray(y_speaker, dtype=np.int64))
        c = self.config
        if np.any((y_text < 0) | (y_text >= c.num_text_classes)):
            raise InputError(f"text label out of range [0, {c.num_text_classes})")
        if np.any((y_speaker < 0) | (y_speaker >= c.num_speakers)):
            raise InputError(f"speaker label out of range [0, {c.num_speakers})")
        return y_text, y_speaker

    def _condition(self, y_text, y_speaker):
        parts = []
        if self.config.condition_on_text:
            parts.append(self.p("emb.text")[y_text])
        if self.config.condition_on_speaker:
            parts.append(self.p("emb.speaker")[y_speaker])
        if not parts:
            return np.zeros((len(y_text), 0))
        return np.concatenate(parts, axis=1)

    def _condition_backward(self, d_cond, y_text, y_speaker):
        col = 0
        if self.config.condition_on_text:
            np.add.at(self.g("emb.text"), y_text, d_cond[:, col:col + EMBED_DIM])
            col += EMBED_DIM
        if self.config.condition_on_speaker:
            np.add.at(self.g("emb.speaker"), y_speaker, d_cond[:, col:col + EMBED_DIM])

    # -- Gaussian MLP heads --------------------------------------------------------

    def _mlp(self, prefix, inp):
        hid = np.tanh(inp @ self.p(f"{prefix}.w1").T + self.p(f"{prefix}.b1"))
        mean = hid @ self.p(f"{prefix}.w_mu").T + self.p(f"{prefix}.b_mu")
        raw = hid @ self.p(f"{prefix}.w_lv").T + self.p(f"{prefix}.b_lv")
        log_var, mask = clamp_log_var(raw)
        return mean, log_var, (inp, hid, mask)

    def _mlp_backward(self, prefix, d_mean, d_log_var, cache):
        inp, hid, mask = cache
        d_raw = d_log_var * mask
        self.g(f"{prefix}.w_mu")[...] += d_mean.T @ hid
        self.g(f"{prefix}.b_mu")[...] += d_mean.sum(axis=0)
        self.g(f"{prefix}.w_lv")[...] += d_raw.T @ hid
        self.g(f"{prefix}.b_lv")[...] += d_raw.sum(axis=0)
        d_hid = d_mean @ self.p(f"{prefix}.w_mu") + d_raw @ self.p(f"{prefix}.w_lv")
        d_pre = d_hid * (1.0 - hid * hid)
        self.g(f"{prefix}.w1")[...] += d_pre.T @ inp
        self.g(f"{prefix}.b1")[...] += d_pre.sum(axis=0)
        return d_pre @ self.p(f"{prefix}.w1")

    # -- decoder ------------------------------------------------------------------

    def _context(self, z, y_text, y_speaker):
        return np.concatenate(
            [z, self.p("emb.text")[y_text], self.p("emb.speaker")[y_speaker]], axis=1
        )

    def _decode(self, z, batch: Batch):
        frames, lengths = batch.frames, batch.lengths
        B, L, D = frames.shape
        ctx = self._context(z, batch.y_text, batch.y_speaker)
        const = ctx @ self.p("dec.w_c").T + self.p("dec.b")
        xprev = np.zeros_like(frames)
        xprev[:, 1:] = frames[:, :-1]
        pre = xprev @ self.p("dec.w_x").T + const[:, None, :]
        hs = kernels.rnn_forward(np.ascontiguousarray(pre), self.p("dec.w_h"), lengths)
        xhat = hs @ self.p("out.w").T + self.p("out.b")
        logits = hs @ self.p("stop.w") + self.p("stop.b")[0]
        mask = batch.mask
        target = (np.arange(L)[None, :] == (lengths - 1)[:, None]).astype(np.float64)
        resid = (xhat - frames) * mask[:, :, None]
        l1 = np.abs(resid).sum(axis=(1, 2))
        ce = ((softplus(logits) - target * logits) * mask).sum(axis=1)
        cache = (ctx, xprev, hs, xhat, logits, resid, target, mask, batch)
        return xhat, l1, ce, cache

    def _decode_backward(self, d_recon, cache):
        """``d_recon`` is (B,); returns the gradient w.r.t. ``z``."""
        ctx, xprev, hs, xhat, logits, resid, target, mask, batch = cache
        B, L, H = hs.shape
        D = xhat.shape[2]
        Z = self.config.latent_dim
        d_xhat = np.sign(resid) * d_recon[:, None, None]
        d_s = (sigmoid(logits) - target) * mask * d_recon[:, None]
        hs2 = hs.reshape(-1, H)
        self.g("out.w")[...] += d_xhat.reshape(-1, D).T @ hs2
        self.g("out.b")[...] += d_xhat.sum(axis=(0, 1))
        self.g("stop.w")[...] += d_s.reshape(-1) @ hs2
        self.g("stop.b")[...] += d_s.sum()
        d_hs = d_xhat @ self.p("out.w") + d_s[:, :, None] * self.p("stop.w")
        d_pre, d_wh = kernels.rnn_backward(hs, self.p("dec.w_h"), d_hs, batch.lengths)
        self.g("dec.w_h")[...] += d_wh
        self.g("dec.w_x")[...] += d_pre.reshape(-1, H).T @ xprev.reshape(-1, D)
        d_const = d_pre.sum(axis=1)
        self.g("dec.b")[...] += d_const.sum(axis=0)
        self.g("dec.w_c")[...] += d_const.T @ ctx
        d_ctx = d_const @ self.p("dec.w_c")
        np.add.at(self.g("emb.text"), batch.y_text, d_ctx[:, Z:Z + EMBED_DIM])
        np.add.at(self.g("emb.speaker"), batch.y_speaker, d_ctx[:, Z + EMBED_DIM:])
        return d_ctx[:, :Z]

    # -- whole-objective forward/backward ---------------------------------------------

    def _posterior_input(self, batch):
        summary, enc_cache = self._encode(batch.frames, batch.lengths)
        cond = self._condition(batch.y_text, batch.y_speaker)
        return np.concatenate([summary, cond], axis=1), enc_cache

    def _posterior_input_backward(self, d_inp, enc_cache, batch):
        H = self.config.hidden_dim
        self._encode_backward(d_inp[:, :H], enc_cache)
        if d_inp.shape[1] > H:
            self._condition_backward(d_inp[:, H:], batch.y_text, batch.y_speaker)

    def forward_backward(self, batch: Batch, eps, kl_weights, example_weight=None,
                         backward=True):
        """Evaluate per-example terms and accumulate gradients of the weighted loss.

        The differentiated loss is ``sum_b w_b * (recon_b + sum_k kl_weights[k] * R_k,b)``
        with ``R_k`` the rate (flat: one weight) or ``(R_H, R_L)`` (hierarchical:
        two weights).  ``eps`` holds standard-normal draws: shape (B, Z) for the
        flat model, (2, B, Z) for the hierarchical one; ignored by the tanh
        bottleneck.  ``w_b`` defaults to ``1/B``.
        """
        c = self.config
        B = batch.size
        w = np.full(B, 1.0 / B) if example_weight is None else np.asarray(example_weight, float)
        if not c.variational:
            return self._heuristic_fb(batch, w, backward)
        if c.hierarchical:
            return self._hier_fb(batch, eps, kl_weights, w, backward)
        return self._flat_fb(batch, eps, kl_weights, w, backward)

    def _heuristic_fb(self, batch, w, backward):
        summary, enc_cache = self._encode(batch.frames, batch.lengths)
        pre = summary @ self.p("bneck.w").T + self.p("bneck.b")
        emb = np.tanh(pre)
        _, l1, ce, dec_cache = self._decode(emb, batch)
        terms = BatchTerms(l1 + ce, np.zeros(batch.size), signature=_sig(dec_cache))
        if backward:
            d_emb = self._decode_backward(w, dec_cache)
            d_pre = d_emb * (1.0 - emb * emb)
            self.g("bneck.w")[...] += d_pre.T @ summary
            self.g("bneck.b")[...] += d_pre.sum(axis=0)
            self._encode_backward(d_pre @ self.p("bneck.w"), enc_cache)
        return terms

    def _flat_fb(self, batch, eps, kl_weights, w, backward):
        (beta,) = kl_weights
        inp, enc_cache = self._posterior_input(batch)
        mean, log_var, mlp_cache = self._mlp("post", inp)
        std = np.exp(0.5 * log_var)
        z = mean + std * eps
        _, l1, ce, dec_cache = self._decode(z, batch)
        rate = np.sum(0.5 * (np.exp(log_var) + mean**2 - 1.0 - log_var), axis=1)
        terms = BatchTerms(l1 + ce, rate, signature=_sig(dec_cache))
        if backward:
            d_z = self._decode_backward(w, dec_cache)
            wb = (w * beta)[:, None]
            d_mean = d_z + wb * mean
            d_lv = d_z * 0.5 * std * eps + wb * 0.5 * (np.exp(log_var) - 1.0)
            d_inp = self._mlp_backward("post", d_mean, d_lv, mlp_cache)
            self._posterior_input_backward(d_inp, enc_cache, batch)
        return terms

    def _hier_fb(self, batch, eps, kl_weights, w, backward):
        beta_h, beta_l = kl_weights
        eps_l, eps_h = eps[0], eps[1]
        inp, enc_cache = self._posterior_input(batch)
        m_l, lv_l, c_post = self._mlp("post", inp)
        s_l = np.exp(0.5 * lv_l)
        z_l = m_l + s_l * eps_l
        m_h, lv_h, c_qh = self._mlp("qh", z_l)
        s_h = np.exp(0.5 * lv_h)
        z_h = m_h + s_h * eps_h
        m_p, lv_p, c_pl = self._mlp("pl", z_h)
        v_p = np.exp(lv_p)
        _, l1, ce, dec_cache = self._decode(z_l, batch)
        r_high = np.sum(0.5 * (np.exp(lv_h) + m_h**2 - 1.0 - lv_h), axis=1)
        q_low = DiagGaussian(m_l, lv_l)
        p_low = DiagGaussian(m_p, lv_p)
        if self.config.r_low_estimator == "joint":
            diff = z_l - m_p
            r_low = np.sum(0.5 * (lv_p - lv_l) + diff**2 / (2.0 * v_p) - 0.5, axis=1)
        else:
            r_low = kl_divergence(q_low, p_low)
        terms = BatchTerms(l1 + ce, r_high + r_low, r_high, r_low, signature=_sig(dec_cache))
        if not backward:
            return terms
        wl = (w * beta_l)[:, None]
        wh = (w * beta_h)[:, None]
        d_zl = self._decode_backward(w, dec_cache)
        if self.config.r_low_estimator == "joint":
            d_zl = d_zl + wl * diff / v_p
            d_mp = -wl * diff / v_p
            d_lvp = wl * 0.5 * (1.0 - diff**2 / v_p)
            d_ml_extra = 0.0
            d_lvl_extra = -0.5 * wl
        else:
            d_ml_extra, d_lvl_extra, d_mp, d_lvp = kl_backward(q_low, p_low, w * beta_l)
        d_zh = self._mlp_backward("pl", d_mp, d_lvp, c_pl)
        d_mh = d_zh + wh * m_h
        d_lvh = d_zh * 0.5 * s_h * eps_h + wh * 0.5 * (np.exp(lv_h) - 1.0)
        d_zl = d_zl + self._mlp_backward("qh", d_mh, d_lvh, c_qh)
        d_ml = d_zl + d_ml_extra
        d_lvl = d_zl * 0.5 * s_l * eps_l + d_lvl_extra
        d_inp = self._mlp_backward("post", d_ml, d_lvl, c_post)
        self._posterior_input_backward(d_inp, enc_cache, batch)
        return terms

    def eps_shape(self, batch_size):
        Z = self.config.latent_dim
        return (2, batch_size, Z) if self.config.hierarchical else (batch_size, Z)

    # -- inference API on single utterances --------------------------------------------

    def encode_reference(self, frames) -> EncodedReference:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise InputError("reference must be a non-empty (L, D) frame matrix")
        summary, _ = self._encode(frames[None], np.array([frames.shape[0]]))
        return EncodedReference(summary[0])

    def condition_summary(self, y_text, y_speaker):
        y_t, y_s = self._check_labels(y_text, y_speaker)
        return self._condition(y_t, y_s)[0]

    def _require_variational(self):
        if not self.config.variational:
            raise ConfigurationError("operation needs a variational model")

    def posterior(self, reference: EncodedReference, cond) -> DiagGaussian:
        self._require_variational()
        inp = np.concatenate([reference.summary, np.asarray(cond, dtype=np.float64)])[None]
        mean, log_var, _ = self._mlp("post", inp)
        return DiagGaussian(mean[0], log_var[0])

    def posteriors(self, utterances) -> DiagGaussian:
        """Posterior ``q(z|x)`` (``q(z_L|x)`` when hierarchical) for each utterance, stacked."""
        self._require_variational()
        inp, _ = self._posterior_input(Batch.from_utterances(utterances))
        mean, log_var, _ = self._mlp("post", inp)
        return DiagGaussian(mean, log_var)

    def heuristic_bottleneck(self, reference: EncodedReference):
        if self.config.variational:
            raise ConfigurationError("model does not use the tanh bottleneck")
        return np.tanh(self.p("bneck.w") @ reference.summary + self.p("bneck.b"))

    def high_posterior(self, z_low) -> DiagGaussian:
        mean, log_var, _ = self._mlp("qh", np.atleast_2d(z_low))
        return DiagGaussian(mean.reshape(np.shape(z_low)), log_var.reshape(np.shape(z_low)))

    def conditional_prior(self, z_high) -> DiagGaussian:
        mean, log_var, _ = self._mlp("pl", np.atleast_2d(z_high))
        return DiagGaussian(mean.reshape(np.shape(z_high)), log_var.reshape(np.shape(z_high)))

    def hierarchical_posterior(self, reference, cond, rng=None, eps=None) -> HierLatents:
        if not self.config.hierarchical:
            raise ConfigurationError("model is not hierarchical")
        if eps is None:
            rng = rng or np.random.default_rng()
            eps = rng.standard_normal((2, self.config.latent_dim))
        q_low = self.posterior(reference, cond)
        z_low = q_low.mean + q_low.std * eps[0]
        q_high = self.high_posterior(z_low)
        z_high = q_high.mean + q_high.std * eps[1]
        return HierLatents(z_high, z_low, q_low, q_high, self.conditional_prior(z_high))

    def decode_teacher_forced(self, z, y_text, y_speaker, frames) -> DecodeResult:
        y_t, y_s = self._check_labels(y_text, y_speaker)
        frames = np.asarray(frames, dtype=np.float64)
        batch = Batch(frames[None], np.array([frames.shape[0]]), y_t, y_s)
        xhat, l1, ce, _ = self._decode(np.atleast_2d(z), batch)
        return DecodeResult(xhat[0], float(l1[0] + ce[0]), float(l1[0]), float(ce[0]))

    def decode_free_running_batch(self, z, y_text, y_speaker, max_len):
        """Free-running decode of B latents; returns a list of (L_b, D) arrays."""
        if max_len < 1:
            raise ConfigurationError("max_len must be at least 1")
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        y_t, y_s = self._check_labels(y_text, y_speaker)
        if len(y_t) == 1 and len(z) > 1:
            y_t = np.repeat(y_t, len(z))
            y_s = np.repeat(y_s, len(z))
        ctx = self._context(z, y_t, y_s)
        bias = np.ascontiguousarray(ctx @ self.p("dec.w_c").T + self.p("dec.b"))
        frames, lengths = kernels.decode_free(
            self.p("dec.w_x"), bias, self.p("dec.w_h"), self.p("out.w"), self.p("out.b"),
            self.p("stop.w"), float(self.p("stop.b")[0]), int(max_len),
        )
        return [frames[b, :lengths[b]].copy() for b in range(len(z))]

    def decode_free_running(self, z, y_text, y_speaker, max_len):
        return self.decode_free_running_batch(np.atleast_2d(z), y_text, y_speaker, max_len)[0]


def _sig(dec_cache):
    resid = dec_cache[5]
    return np.packbits(resid > 0).tobytes()


# -- checkpoints ---------------------------------------------------------------------

CKPT_MAGIC = b"CAPCKPT"
CKPT_VERSION = b"1"


def checkpoint_bytes(model: Model) -> bytes:
    cfg = model.config.to_text().encode("utf-8")
    parts = [CKPT_MAGIC + CKPT_VERSION, struct.pack("<I", len(cfg)), cfg]
    names = model.params.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = model.params[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model: Model):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint_bytes(buf) -> Model:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    head = take(len(CKPT_MAGIC) + 1, "magic")
    if head[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    if head[len(CKPT_MAGIC):] != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {head[len(CKPT_MAGIC):]!r}", 7)
    (n_cfg,) = struct.unpack("<I", take(4, "config length"))
    try:
        config = ModelConfig.from_text(take(n_cfg, "config").decode("utf-8"))
    except (ConfigurationError, ValueError) as exc:
        raise FormatError(f"invalid model config in checkpoint: {exc}", pos) from exc
    expected = Model.init(config, 0).params
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    store = ParamStore()
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2, "name length"))
        name = take(n_name, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}", pos)
        if tuple(shape) != expected[name].shape:
            raise FormatError(
                f"shape mismatch for {name!r}: file {shape}, config {expected[name].shape}", pos
            )
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size, f"tensor {name}"), dtype="<f8")
        store.add(name, data.reshape(shape))
    missing = set(expected.names()) - set(store.names())
    if missing:
        raise FormatError(f"checkpoint lacks tensors {sorted(missing)}", pos)
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor", pos)
    return Model(config, store)


def load_checkpoint(path) -> Model:
    return load_checkpoint_bytes(Path(path).read_bytes())
