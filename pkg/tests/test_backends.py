import os
import subprocess
import sys

import numpy as np
import pytest

from caplab import _pure, kernels

compiled = kernels.compiled()
needs_compiled = pytest.mark.skipif(compiled is None, reason="extension not built")


def test_backend_name():
    assert kernels.BACKEND in ("cython", "pure")


def test_env_var_selects_pure():
    out = subprocess.run(
        [sys.executable, "-c", "from caplab import kernels; print(kernels.BACKEND)"],
        env={**os.environ, "CAPLAB_PURE_PYTHON": "1"}, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"


@needs_compiled
@pytest.mark.parametrize("seed", range(5))
def test_dtw_kernels_identical(seed):
    rng = np.random.default_rng(seed)
    cost = rng.random((rng.integers(1, 30), rng.integers(1, 30)))
    cost[rng.random(cost.shape) < 0.3] = 0.5  # force ties
    a_acc, a_mv = compiled.dtw_accumulate(cost, 1.0)
    b_acc, b_mv = _pure.dtw_accumulate(cost, 1.0)
    assert np.array_equal(a_acc, b_acc)
    assert np.array_equal(a_mv, b_mv)


@needs_compiled
@pytest.mark.parametrize("seed", range(3))
def test_rnn_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    B, L, H = 4, 9, 6
    pre = rng.normal(size=(B, L, H))
    w_h = rng.normal(size=(H, H)) * 0.5
    lengths = np.array([9, 3, 1, 6])
    hs_c = compiled.rnn_forward(pre, w_h, lengths)
    hs_p = _pure.rnn_forward(pre, w_h, lengths)
    assert np.allclose(hs_c, hs_p, rtol=0, atol=1e-13)
    d_hs = rng.normal(size=(B, L, H))
    for got, want in zip(compiled.rnn_backward(hs_p, w_h, d_hs, lengths),
                         _pure.rnn_backward(hs_p, w_h, d_hs, lengths)):
        assert np.allclose(got, want, rtol=0, atol=1e-12)


@needs_compiled
def test_free_running_kernels_agree():
    rng = np.random.default_rng(0)
    B, H, D = 5, 7, 3
    args = (rng.normal(size=(H, D)) * 0.5, rng.normal(size=(B, H)), rng.normal(size=(H, H)) * 0.4,
            rng.normal(size=(D, H)), rng.normal(size=D), rng.normal(size=H), -0.5, 40)
    f_c, l_c = compiled.decode_free(*args)
    f_p, l_p = _pure.decode_free(*args)
    assert np.array_equal(l_c, l_p)
    assert np.allclose(f_c, f_p, rtol=0, atol=1e-12)


def test_pure_backend_trains_like_default():
    script = (
        "from caplab.model import Model, ModelConfig\n"
        "from caplab.objective import CapacityTarget, TrainConfig, train\n"
        "from caplab.toydata import ToySpec, generate_dataset\n"
        "d = generate_dataset(ToySpec(channels=3, num_text_classes=3, num_speakers=2), 30)\n"
        "m = Model.init(ModelConfig(hidden_dim=6, channels=3, num_text_classes=3, num_speakers=2))\n"
        "r = train(m, d, CapacityTarget.flat(1.0), TrainConfig(steps=20, batch_size=8))\n"
        "print(repr(r.metrics[-1].recon_nll))\n"
    )
    values = []
    for pure in ("", "1"):
        out = subprocess.run([sys.executable, "-c", script], capture_output=True, text=True,
                             check=True, env={**os.environ, "CAPLAB_PURE_PYTHON": pure})
        values.append(float(out.stdout))
    assert values[0] == pytest.approx(values[1], rel=1e-9)
