import numpy as np
import pytest
from hypothesis import example, given
from hypothesis import strategies as st

from attnseg.attention import (
    ChannelAttention,
    DualPathGate,
    NonLocalBlock,
    ScaleAttention,
    channel_attention_forward,
    dual_gate_forward,
    nonlocal_forward,
    scale_attention_forward,
    zero_parameters,
)
from attnseg.errors import ContractError, DimensionError
from attnseg.gradcheck import check_gradients
from attnseg.tensor import Tensor, no_grad


def block_check(block, inputs, call, **kw):
    return check_gradients(call, list(inputs) + block.parameters(), step=1e-5, **kw)


# ---------------------------------------------------------------- non-local


def test_nonlocal_shapes_and_row_stochastic(rng):
    block = NonLocalBlock(256, rng=rng)
    x = rng.normal(size=(1, 256, 4, 4))
    y, alpha = nonlocal_forward(x, block)
    assert y.shape == x.shape
    assert alpha.shape == (1, 16, 16)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(alpha.data >= 0)


def test_nonlocal_zero_parameters_give_identity_and_uniform_affinity(rng):
    block = NonLocalBlock(256, rng=rng)
    zero_parameters(block)
    y, alpha = block(np.zeros((1, 256, 3, 3)))
    assert not y.data.any()
    np.testing.assert_allclose(alpha.data, 1 / 9, rtol=1e-15)
    x = rng.normal(size=(2, 256, 2, 2))
    y, _ = block(x)
    np.testing.assert_array_equal(y.data, x)


def test_nonlocal_contracts(rng):
    block = NonLocalBlock(16, rng=rng)
    with pytest.raises(ContractError):
        block(np.zeros((1, 8, 2, 2)))
    with pytest.raises(ContractError):
        block(np.zeros((1, 16, 65, 64)))


def test_nonlocal_has_no_redundant_biases(rng):
    names = {n for n, _ in NonLocalBlock(16, rng=rng).named_parameters()}
    assert "theta.bias" in names
    assert "phi.bias" not in names and "g.bias" not in names


def test_nonlocal_gradients(rng):
    block = NonLocalBlock(16, rng=rng)
    x = Tensor(rng.normal(0, 0.5, (2, 16, 3, 3)), requires_grad=True)
    err, _ = block_check(block, [x], lambda: block(x)[0], max_probes=12)
    assert err < 1e-4


# -------------------------------------------------------------- dual gates


def test_gate_zero_convs_give_half(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    for p in gate.paths:
        zero_parameters(p)
    y, a_hat, a_tilde = dual_gate_forward(rng.normal(size=(1, 8, 5, 5)), rng.normal(size=(1, 12, 5, 5)), gate)
    assert np.all(a_hat.data == 0.5) and np.all(a_tilde.data == 0.5)
    assert a_hat.shape == (1, 1, 5, 5)
    assert y.shape == (1, 4, 5, 5)


def test_gate_annihilates_zero_skip(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    y, _ = gate(np.zeros((2, 8, 5, 5)), rng.normal(size=(2, 12, 5, 5)))
    assert not y.data.any()


def test_gate_coefficients_inside_unit_interval(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    _, alphas = gate(rng.normal(0, 3, (2, 8, 6, 6)), rng.normal(0, 3, (2, 12, 6, 6)))
    for a in alphas:
        assert np.all((a.data > 0) & (a.data < 1))


def test_gate_spatial_mismatch(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    with pytest.raises(DimensionError):
        gate(np.zeros((1, 8, 6, 6)), np.zeros((1, 12, 3, 3)))


def test_gate_pathway_symmetry(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    xl, xh = rng.normal(size=(1, 8, 5, 5)), rng.normal(size=(1, 12, 5, 5))
    _, (a1, a2) = gate(xl, xh)
    assert not np.array_equal(a1.data, a2.data)
    gate.paths[1].load_state_dict(gate.paths[0].state_dict())
    _, (a1, a2) = gate(xl, xh)
    assert a1.data.tobytes() == a2.data.tobytes()


def test_single_pathway_gate_has_one_psi(rng):
    gate = DualPathGate(8, 12, 4, pathways=1, rng=rng)
    assert sum(1 for n, _ in gate.named_parameters() if n.endswith("psi.weight")) == 1
    y, alphas = gate(rng.normal(size=(1, 8, 4, 4)), rng.normal(size=(1, 12, 4, 4)))
    assert len(alphas) == 1 and y.shape == (1, 4, 4, 4)


def test_gate_gradients(rng):
    gate = DualPathGate(8, 12, 4, rng=rng)
    xl = Tensor(rng.normal(size=(1, 8, 6, 6)), requires_grad=True)
    xh = Tensor(rng.normal(size=(1, 12, 6, 6)), requires_grad=True)
    err, _ = block_check(gate, [xl, xh], lambda: gate(xl, xh)[0], max_probes=12)
    assert err < 1e-4


# ---------------------------------------------------------- channel attention


def test_channel_attention_zero_input(rng):
    ca = ChannelAttention(8, rng=rng)
    y, beta = channel_attention_forward(np.zeros((1, 8, 3, 3)), ca)
    np.testing.assert_array_equal(beta.data, 0.5)
    assert beta.shape == (1, 8, 1, 1)
    assert not y.data.any()


@given(st.integers(0, 2**31))
@example(seed=123247)  # saturates one sigmoid to exactly 1.0
def test_channel_attention_ranges_and_residual(seed):
    r = np.random.default_rng(seed)
    ca = ChannelAttention(6, rng=r)
    x = r.normal(0, 2, (2, 6, 4, 4))
    y, beta = ca(x)
    fc1, fc2 = ca.mlp.fc1, ca.mlp.fc2

    def mlp(v):
        return np.maximum(v @ fc1.weight.data.T + fc1.bias.data, 0) @ fc2.weight.data.T + fc2.bias.data

    z = mlp(x.mean(axis=(2, 3))) + mlp(x.max(axis=(2, 3)))
    b = beta.data.reshape(z.shape)
    np.testing.assert_allclose(b, 1 / (1 + np.exp(-z)), rtol=1e-12, atol=0)
    # sigmoid(z) rounds to exactly 0 or 1 in float64 once |z| exceeds about 36
    representable = np.abs(z) < 36
    assert np.all((b[representable] > 0) & (b[representable] < 1))
    assert np.all((b >= 0) & (b <= 1))
    np.testing.assert_allclose(y.data, x * (1 + beta.data), rtol=1e-14)
    xp = np.abs(x)
    yp, _ = ca(xp)
    assert np.all(yp.data >= xp)


def test_channel_attention_forced_beta(rng, monkeypatch):
    ca = ChannelAttention(4, rng=rng)
    x = rng.normal(size=(1, 4, 3, 3))
    monkeypatch.setattr(ca, "coefficients", lambda _: Tensor(np.full((1, 4, 1, 1), 0.3)))
    y, _ = ca(x)
    np.testing.assert_allclose(y.data, 1.3 * x, rtol=1e-15)


def test_channel_attention_odd_channels():
    with pytest.raises(ContractError):
        ChannelAttention(7)


def test_channel_attention_gradients(rng):
    ca = ChannelAttention(8, rng=rng)
    x = Tensor(rng.normal(size=(2, 8, 5, 5)), requires_grad=True)
    err, _ = block_check(ca, [x], lambda: ca(x)[0], max_probes=12)
    assert err < 1e-4


# ------------------------------------------------------------ scale attention


def _features(rng, chans=(4, 6, 8, 10), size=8, n=1):
    return [rng.normal(size=(n, c, size // 2**i, size // 2**i)) for i, c in enumerate(chans)]


def test_scale_attention_shapes_and_ranges(rng):
    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    y, gamma, gamma_star = scale_attention_forward(_features(rng, n=2), la, (8, 8))
    assert y.shape == (2, 16, 8, 8)
    assert gamma.shape == (2, 4, 1, 1)
    assert gamma_star.shape == (2, 4, 8, 8)
    for c in (gamma, gamma_star):
        assert np.all((c.data > 0) & (c.data < 1))


def test_scale_attention_zero_everything(rng):
    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    zero_parameters(la)
    y, gamma, _ = la([np.zeros_like(f) for f in _features(rng)], (8, 8))
    assert not y.data.any()
    np.testing.assert_array_equal(gamma.data, 0.5)


def test_scale_attention_output_matches_fused_features_when_gates_vanish(rng, monkeypatch):
    import attnseg.attention as A

    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    feats = _features(rng)
    # with sigmoid forced to zero the weighted terms vanish and y = F
    monkeypatch.setattr(A, "sigmoid", lambda t: t * 0.0)
    y, _, _ = la(feats, (8, 8))
    with no_grad():
        parts = [A.bilinear_resize(c(f), 8, 8) if c(f).shape[2:] != (8, 8) else c(f)
                 for f, c in zip(feats, la.compress)]
    fused = np.concatenate([p.data for p in parts], axis=1)
    np.testing.assert_allclose(y.data, fused, rtol=1e-13, atol=1e-14)


def test_scale_attention_upsamples_to_requested_size(rng):
    la = ScaleAttention([3, 5], rng=rng)
    y, gamma, gamma_star = la([rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(1, 5, 2, 2))], (16, 16))
    assert y.shape == (1, 8, 16, 16) and gamma.shape == (1, 2, 1, 1)


def test_scale_attention_shared_gamma_star_switch(rng):
    la = ScaleAttention([4, 6, 8, 10], gamma_star_per_scale=False, rng=rng)
    _, _, gamma_star = la(_features(rng), (8, 8))
    assert gamma_star.shape == (1, 1, 8, 8)


def test_scale_attention_wrong_scale_count(rng):
    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    with pytest.raises(ContractError):
        la(_features(rng)[:3], (8, 8))


def test_scale_attention_gradients(rng):
    la = ScaleAttention([4, 6, 8, 10], rng=rng)
    feats = [Tensor(f, requires_grad=True) for f in _features(rng)]
    err, _ = block_check(la, feats, lambda: la(feats, (8, 8))[0], max_probes=8)
    assert err < 1e-4
