import pytest
import torch

from hybridstereo.attention import TransformerBlock
from hybridstereo.errors import ConfigurationError
from hybridstereo.networks import (
    REFERENCE_PARAMS_M,
    VARIANTS,
    CFeatureNet,
    CMatchNet,
    MatchNetConfig,
    ModelConfig,
    StereoModel,
    TFeatureNet,
    TMatchNet,
    assemble_variant,
    canonical_variant,
    count_parameters,
    parameter_report,
    toy_config,
)

PARTS = {
    "baseline": (CFeatureNet, CMatchNet),
    "type1": (TFeatureNet, CMatchNet),
    "type2": (CFeatureNet, TMatchNet),
    "type3": (TFeatureNet, TMatchNet),
}


@pytest.mark.parametrize("variant", sorted(PARTS))
def test_variant_composition(variant):
    model = assemble_variant(toy_config(variant))
    feat, match = PARTS[variant]
    assert isinstance(model.feature_net, feat)
    assert isinstance(model.match_net, match)


@pytest.mark.parametrize("variant", sorted(PARTS))
def test_toy_forward_shape_and_bounds(variant):
    model = assemble_variant(toy_config(variant))
    left, right = torch.rand(2, 3, 48, 48), torch.rand(2, 3, 48, 48)
    with torch.no_grad():
        disp = model(left, right)
    assert disp.shape == (2, 48, 48)
    assert torch.isfinite(disp).all()
    assert disp.min() >= 0 and disp.max() <= model.dmax


def test_odd_input_sizes_are_padded_and_cropped():
    model = assemble_variant(toy_config("type1"))
    with torch.no_grad():
        assert model(torch.rand(1, 3, 37, 50), torch.rand(1, 3, 37, 50)).shape == (1, 37, 50)


def test_aliases():
    assert canonical_variant("HybridStereoNet") == "type1"
    assert canonical_variant("hybrid") == "type1"
    assert canonical_variant("LEAStereo") == "baseline"
    with pytest.raises(ConfigurationError):
        canonical_variant("type9")


@pytest.mark.parametrize("cls", [TMatchNet, CMatchNet])
def test_match_stages_halve_disparity_and_space_together(cls):
    cfg = MatchNetConfig("transformer" if cls is TMatchNet else "cnn", layers=6, stages=3, channels=8, window=2)
    net = cls(cfg, in_channels=16)
    shapes = net.stage_shapes((1, 16, 8, 16, 24))
    assert len(shapes) == 4
    for (c0, d0, h0, w0), (c1, d1, h1, w1) in zip(shapes, shapes[1:]):
        assert (d1, h1, w1) == (d0 // 2, h0 // 2, w0 // 2)
        assert c1 == 2 * c0


def test_reference_layer_counts():
    model = StereoModel(ModelConfig("type3", dmax=48))
    feature_blocks = [m for m in model.feature_net.modules() if isinstance(m, TransformerBlock)]
    match_blocks = [m for m in model.match_net.modules() if isinstance(m, TransformerBlock)]
    assert len(feature_blocks) == 6
    assert len(match_blocks) == 12
    cnn = StereoModel(ModelConfig("baseline", dmax=48)).feature_net
    convs = [m for m in cnn.modules() if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == 6  # stem, stride-3 conv, four residual layers


def test_match_layers_must_split_evenly():
    with pytest.raises(ConfigurationError):
        MatchNetConfig("cnn", layers=10, stages=3).blocks_per_stage


def test_feature_net_is_shared_between_views():
    model = assemble_variant(toy_config("type1"))
    left, right = torch.rand(1, 3, 24, 24), torch.rand(1, 3, 24, 24)
    with torch.no_grad():
        fl, fr = model.features(left, right)
        torch.testing.assert_close(fl, model.feature_net(left * 2 - 1))
        torch.testing.assert_close(fr, model.feature_net(right * 2 - 1))


def test_assembly_is_seeded():
    a = assemble_variant(toy_config("type2", seed=3))
    b = assemble_variant(toy_config("type2", seed=3))
    c = assemble_variant(toy_config("type2", seed=4))
    for p, q in zip(a.parameters(), b.parameters()):
        torch.testing.assert_close(p, q, rtol=0, atol=0)
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_config_round_trip_and_unknown_keys():
    cfg = toy_config("type1", dmax=36)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({**cfg.to_dict(), "depth": 3})


def test_parameter_report_lists_all_variants():
    rows = parameter_report(**{k: v for k, v in toy_config().to_dict().items() if k not in ("variant", "seed")})
    assert [r["variant"] for r in rows] == list(VARIANTS)
    for r in rows:
        assert r["params"] == count_parameters(assemble_variant(toy_config(r["variant"])))
        assert r["reference_params_m"] == REFERENCE_PARAMS_M[r["variant"]]
