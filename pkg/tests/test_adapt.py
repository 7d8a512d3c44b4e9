import logging

import numpy as np
import pytest

from lipprox.adapt import NothingToAdaptError, adapt_dp_to_l2, l2_from_dp
from lipprox.data import synth_blobs
from lipprox.layers import DPMHA, L2MHA, Residual, network_lipschitz
from lipprox.numerics import make_rng
from lipprox.train import build_mlp, build_toy_vit


def _attention_layers(net):
    return [layer for _, layer in net.iter_layers() if isinstance(layer, (DPMHA, L2MHA))]


def test_zero_weight_attention_is_reproduced_exactly():
    net = build_toy_vit((8,), 2, 2, 4, 2, 2, 3, seed=0, attention="dp")
    for layer in _attention_layers(net):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            getattr(layer, name)[:] = 0.0
    x = make_rng(1).standard_normal((20, 8))
    student, losses = adapt_dp_to_l2(net, x, epochs=2)
    np.testing.assert_array_equal(student.forward(x), net.forward(x))
    assert losses == [0.0, 0.0, 0.0]


def test_replaces_every_dp_layer_and_freezes_the_rest():
    net = build_toy_vit((8,), 2, 2, 4, 2, 2, 3, seed=0, attention="dp")
    x, _ = synth_blobs(0, 64, 3, 8, 0.5)
    student, losses = adapt_dp_to_l2(net, x, epochs=3, lr=0.01)
    assert all(isinstance(a, L2MHA) for a in _attention_layers(student))
    assert len(_attention_layers(student)) == 2
    assert np.isfinite(network_lipschitz(student))
    assert student.provenance.endswith("adapt")
    before, after = net.named_params(), student.named_params()
    for name, value in after.items():
        if not any(name.endswith(s) for s in (".w_qk", ".w_v", ".w_o")):
            np.testing.assert_array_equal(value, before[name])
    assert len(losses) == 4 and losses[-1] < losses[0]


def test_value_init_matches_dp_value_path_when_invertible():
    # with an invertible tied projection the L2 value path reproduces w_v exactly
    rng = make_rng(2)
    H, d, D = 1, 3, 3
    dp = DPMHA(rng.standard_normal((H, d, D)), rng.standard_normal((H, d, D)),
               rng.standard_normal((H, d, D)), rng.standard_normal((D, D)))
    l2 = l2_from_dp(dp)
    W = l2.w_qk[0].astype(float)
    path = l2.w_v[0].astype(float) @ W.T @ W / np.sqrt(d)
    np.testing.assert_allclose(path, dp.w_v[0], rtol=1e-4, atol=1e-5)


def test_nothing_to_adapt():
    with pytest.raises(NothingToAdaptError, match="nothing to adapt"):
        adapt_dp_to_l2(build_mlp((4,), [4], 2), np.zeros((3, 4)))
    with pytest.raises(NothingToAdaptError):
        adapt_dp_to_l2(build_toy_vit((8,), 2, 1, 4, 2, 2, 3), np.zeros((3, 8)))


def test_loss_increase_is_logged(caplog):
    net = build_toy_vit((8,), 2, 1, 4, 2, 2, 3, seed=0, attention="dp")
    x, _ = synth_blobs(0, 64, 3, 8, 0.5)
    with caplog.at_level(logging.WARNING):
        _, losses = adapt_dp_to_l2(net, x, epochs=4, lr=5.0, momentum=0.99)
    assert any(b > a for a, b in zip(losses, losses[1:]))
    assert "distillation loss increased" in caplog.text


def test_empty_data():
    with pytest.raises(ValueError):
        adapt_dp_to_l2(build_toy_vit((8,), 2, 1, 4, 2, 2, 3, attention="dp"), np.zeros((0, 8)))
