import numpy as np
import pytest

from attnseg.errors import ConfigError, ContractError, DimensionError
from attnseg.layers import parameter_count
from attnseg.model import AttentionMaps, ModelConfig, build, export_attention_maps, forward, predict_mask
from attnseg.tensor import Tape, backward
from attnseg.training import segmentation_loss

from oracles import argmax_brute


def count(**kw):
    return parameter_count(build(ModelConfig(**kw), seed=0))


def test_default_and_baseline_parameter_counts():
    assert 2.5e6 <= count() <= 3.1e6
    assert 1.7e6 <= count(enable_sa=False, enable_ca=False, enable_la=False) <= 2.1e6


def test_parameter_count_ordering():
    base = count(enable_sa=False, enable_ca=False, enable_la=False)
    sa = count(enable_ca=False, enable_la=False)
    sa_ca = count(enable_la=False)
    full = count()
    assert base < sa < sa_ca <= full


def test_module_counts_sum_to_total():
    model = build(ModelConfig(), seed=0)
    assert sum(model.module_parameter_counts().values()) == parameter_count(model)


def test_same_seed_same_parameters():
    a, b = build(ModelConfig(), seed=5), build(ModelConfig(), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()
    c = build(ModelConfig(), seed=6)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_forward_shapes(rng):
    logits, att = forward(build(ModelConfig(), seed=0), rng.normal(size=(1, 3, 64, 64)))
    assert logits.shape == (1, 2, 64, 64)
    assert np.all(np.isfinite(logits.data))
    model = build(ModelConfig(in_channels=1, num_classes=3), seed=0)
    assert model(rng.normal(size=(1, 1, 96, 96)))[0].shape == (1, 3, 96, 96)


def test_forward_rejects_indivisible_extent(rng):
    model = build(ModelConfig(in_channels=1), seed=0)
    with pytest.raises(DimensionError):
        model(np.zeros((1, 1, 40, 32)))
    with pytest.raises(DimensionError):
        model(np.zeros((1, 3, 32, 32)))


def test_attention_census_and_ranges(rng):
    model = build(ModelConfig(in_channels=1), seed=0)
    model(rng.normal(size=(2, 1, 32, 32)))
    maps = export_attention_maps(model)
    assert isinstance(maps, AttentionMaps)
    assert sorted(maps.maps) == ["CA1", "CA2", "CA3", "CA4", "LA", "SA1", "SA2", "SA3", "SA4"]
    np.testing.assert_allclose(maps["SA1"].sum(axis=-1), 1.0, atol=1e-9)
    for name, arr in maps.maps.items():
        assert np.all((arr >= 0) & (arr <= 1)), name
    assert maps["LA"].shape == (2, 4, 32, 32)
    assert maps.gamma.shape == (2, 4)
    assert [maps[f"SA{i}"].shape[-1] for i in (2, 3, 4)] == [4, 8, 16]
    # gated skip (half width) concatenated with the upsampled deeper feature
    assert [maps[f"CA{i}"].shape[1] for i in (1, 2, 3, 4)] == [64 + 256, 32 + 128, 16 + 64, 16 + 32]


def test_export_is_detached(rng):
    model = build(ModelConfig(in_channels=1), seed=0)
    _, att = model(rng.normal(size=(1, 1, 32, 32)))
    maps = export_attention_maps(att)
    maps.maps["CA1"][...] = -1
    assert np.all(att["CA1"].data > 0)


def test_export_before_forward_is_a_contract_error():
    with pytest.raises(ContractError):
        export_attention_maps(build(ModelConfig(in_channels=1), seed=0))


@pytest.mark.parametrize("kw,expect", [
    (dict(sa_variant="s-AG"), {"SA1", "SA2", "SA3", "SA4"}),
    (dict(sa_variant="t-AG"), {"SA1", "SA2", "SA3", "SA4"}),
    (dict(sa_variant="n-Local"), {"SA1"}),
    (dict(enable_sa=False), set()),
])
def test_spatial_variants(rng, kw, expect):
    model = build(ModelConfig(in_channels=1, enable_ca=False, enable_la=False, **kw), seed=0)
    _, att = model(rng.normal(size=(1, 1, 32, 32)))
    assert {k for k in att if k.startswith("SA")} == expect


def test_single_gate_variant_has_one_psi_per_gate():
    model = build(ModelConfig(sa_variant="s-AG"), seed=0)
    for gate in model.gates:
        assert sum(1 for n, _ in gate.named_parameters() if n.endswith("psi.weight")) == 1
    dual = build(ModelConfig(sa_variant="t-AG"), seed=0)
    for gate in dual.gates:
        assert sum(1 for n, _ in gate.named_parameters() if n.endswith("psi.weight")) == 2


@pytest.mark.parametrize("placement,names", [
    ("Enc", {"CA1", "CA2", "CA3", "CA4"}),
    ("Dec", {"CA1", "CA2", "CA3", "CA4"}),
    ("EncDec", {"CA1", "CA2", "CA3", "CA4", "CAenc1", "CAenc2", "CAenc3", "CAenc4"}),
])
def test_channel_placements(rng, placement, names):
    model = build(ModelConfig(in_channels=1, ca_placement=placement, enable_la=False), seed=0)
    _, att = model(rng.normal(size=(1, 1, 32, 32)))
    assert {k for k in att if k.startswith("CA")} == names


@pytest.mark.parametrize("k", [2, 3, 4, 5])
def test_scale_counts(rng, k):
    model = build(ModelConfig(in_channels=1, la_scales=k), seed=0)
    logits, att = model(rng.normal(size=(1, 1, 32, 32)))
    assert att["LA.gamma"].shape == (1, k, 1, 1)
    assert logits.shape == (1, 2, 32, 32)


@pytest.mark.parametrize("kw", [
    dict(sa_variant="Js-B"), dict(ca_placement="Mid"), dict(la_scales=6), dict(la_scales=1),
    dict(base_channels=15), dict(num_classes=0),
])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_round_trip_and_unknown_keys():
    cfg = ModelConfig(in_channels=1, sa_variant="t-AG", la_scales=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"in_channel": 1})


@pytest.mark.parametrize("kw", [{}, dict(sa_variant="s-AG"), dict(ca_placement="EncDec"), dict(la_scales=5)])
def test_every_parameter_receives_gradient(rng, kw):
    model = build(ModelConfig(in_channels=1, **kw), seed=0)
    x = rng.normal(size=(2, 1, 32, 32))
    labels = (rng.random((2, 32, 32)) > 0.6).astype(np.int64)
    with Tape():
        logits, _ = model(x)
        loss = segmentation_loss(logits, labels)
    backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name
        assert np.abs(p.grad).max() > 1e-10, name


def test_predict_mask_examples(rng):
    logits = rng.normal(size=(2, 3, 5, 5))
    np.testing.assert_array_equal(predict_mask(logits), argmax_brute(logits))
    np.testing.assert_array_equal(predict_mask(logits + 7.5), predict_mask(logits))
    lead = np.zeros((1, 2, 4, 4))
    lead[:, 0] = 1.0
    assert not predict_mask(lead).any()
    assert not predict_mask(np.zeros((1, 2, 3, 3))).any()  # ties to the lower index
