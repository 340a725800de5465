import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from posemoe.data import h36m_skeleton
from posemoe.model import (ConfigError, ModelConfig, PoseMoE, census, flip_input, loss_2d, loss_depth,
                           loss_temporal, mirror_permutation, parameter_group, predict, saturate_routers,
                           total_loss)
from posemoe.tensor_core import DimensionError, Rng


def _x(cfg, batch=2, seed=0):
    return torch.from_numpy(Rng(seed).child("x").normal((batch, cfg.frames, cfg.joints, 2)))


def test_forward_shapes_and_streams(tiny_config):
    model = PoseMoE(tiny_config)
    x = _x(tiny_config)
    y2d, yd, y3d = model(x)
    assert y2d.shape == (2, 4, 5, 2) and yd.shape == (2, 4, 5, 1) and y3d.shape == (2, 4, 5, 3)
    assert torch.equal(y3d[..., :2], y2d) and torch.equal(y3d[..., 2:], yd)
    assert len(model.streams(x)) == tiny_config.encoder_layers + 1
    assert len(model.streams(x, bypass_decoder=True)) == tiny_config.encoder_layers
    assert model(x[0])[2].shape == (4, 5, 3)


def test_input_shape_checked(tiny_config):
    model = PoseMoE(tiny_config)
    with pytest.raises(DimensionError):
        model(torch.zeros(1, 4, 6, 2, dtype=torch.float64))
    with pytest.raises(DimensionError):
        model(torch.zeros(1, 4, 5, 3, dtype=torch.float64))


def test_same_seed_same_model(tiny_config):
    a, b = PoseMoE(tiny_config), PoseMoE(tiny_config)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = PoseMoE(dataclasses.replace(tiny_config, seed=1))
    assert not torch.equal(a.embed.weight, c.embed.weight)


def test_census_groups(tiny_config):
    model = PoseMoE(tiny_config)
    counts = census(model)
    t, j, c = 4, 5, 8
    assert counts["pos_embed"] == 2 * t * j * c
    assert counts["gaussian_tokens"] == 2 * t * j * c
    assert counts["fusion_mu"] == 2 * 2  # spatial + temporal blocks, two branches each
    assert counts["router"] == 2 * 2 * (2 * c * 2 + 2)
    assert counts["embed"] == counts["input_proj"] == 2 * c + c
    assert sum(v for k, v in counts.items() if k != "total") == counts["total"]
    groups = {parameter_group(n) for n, _ in model.named_parameters()}
    assert groups == {"pos_embed", "gaussian_tokens", "fusion_mu", "router", "layer_norm", "embed",
                      "input_proj", "encoder", "decoder", "head_2d", "head_d"}


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(encoder_layers=0)
    with pytest.raises(ConfigError):
        ModelConfig(lambda_t=-1)
    with pytest.raises(ConfigError):
        ModelConfig(token_init="uniform")
    with pytest.raises(ConfigError, match="bogus"):
        ModelConfig.from_dict({"bogus": 1})
    cfg = ModelConfig(frames=9)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_ablation_flags_change_output(tiny_config):
    x = _x(tiny_config)
    base = PoseMoE(tiny_config)(x)[2]
    for flag in ("cross_attention", "cross_expert"):
        other = PoseMoE(dataclasses.replace(tiny_config, **{flag: False}))(x)[2]
        assert not torch.allclose(base, other)
    no_dec = PoseMoE(dataclasses.replace(tiny_config, decoder_layers=0))
    assert len(no_dec.decoder) == 0 and no_dec(x)[2].shape == base.shape


def test_flip_is_involution_and_mirrors():
    sk = h36m_skeleton()
    x = torch.from_numpy(Rng(2).normal((3, 17, 2)))
    f = flip_input(x, sk.mirror_pairs)
    assert torch.equal(flip_input(f, sk.mirror_pairs), x)
    assert torch.equal(f[:, 4, 0], -x[:, 1, 0]) and torch.equal(f[:, 4, 1], x[:, 1, 1])
    assert torch.equal(f[:, 0, 0], -x[:, 0, 0])
    assert mirror_permutation(17, sk.mirror_pairs) == sk.mirror_permutation()


def test_predict_flip_average(tiny_config):
    model = PoseMoE(tiny_config)
    x = _x(tiny_config)
    pairs = [(1, 2), (3, 4)]
    with torch.no_grad():
        plain = predict(model, x)
        avg = predict(model, x, pairs)
        manual = 0.5 * (model(x)[2] + flip_input(model(flip_input(x, pairs))[2], pairs))
    assert torch.equal(plain, model(x)[2].detach())
    assert torch.allclose(avg, manual, rtol=0, atol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_losses_match_loops(b, t, j, seed):
    rng = Rng(seed)
    p3, g3 = rng.normal((b, t, j, 3)), rng.normal((b, t, j, 3))
    tp, tg = torch.from_numpy(p3), torch.from_numpy(g3)
    assert abs(float(loss_2d(tp[..., :2], tg[..., :2])) - oracles.loss_2d(p3[..., :2], g3[..., :2])) < 1e-12
    assert abs(float(loss_depth(tp[..., 2:], tg[..., 2:])) - oracles.loss_depth(p3[..., 2:], g3[..., 2:])) < 1e-12
    assert abs(float(loss_temporal(tp, tg)) - oracles.loss_temporal(p3, g3)) < 1e-12
    total = float(total_loss(tp[..., :2], tp[..., 2:], tp, tg, 0.5))
    ref = oracles.loss_2d(p3[..., :2], g3[..., :2]) + oracles.loss_depth(p3[..., 2:], g3[..., 2:]) \
        + 0.5 * oracles.loss_temporal(p3, g3)
    assert abs(total - ref) < 1e-12


def test_loss_edge_cases():
    z = torch.zeros(1, 1, 2, 3, dtype=torch.float64)
    assert float(loss_temporal(z + 1, z)) == 0.0
    with pytest.raises(DimensionError):
        loss_2d(z[..., :2], z[..., :1])
    with pytest.raises(ConfigError):
        total_loss(z[..., :2], z[..., 2:], z, z, -0.1)
    c = torch.zeros(1, 4, 2, 3, dtype=torch.float64) + torch.arange(4.0, dtype=torch.float64)[None, :, None, None]
    assert float(loss_temporal(c + 7.0, c)) == 0.0  # constant offsets have no velocity error


def test_depth_perturbation_leaves_2d_stream_bit_identical(tiny_config):
    model = PoseMoE(tiny_config)
    saturate_routers(model)
    x = _x(tiny_config)
    with torch.no_grad():
        before = model(x, bypass_decoder=True)
        model.pos_d.add_(torch.from_numpy(Rng(9).normal(tuple(model.pos_d.shape))))
        after = model(x, bypass_decoder=True)
    assert torch.equal(before[0], after[0])
    assert not torch.equal(before[1], after[1])


def test_gradients_reach_every_parameter(tiny_config):
    model = PoseMoE(tiny_config)
    x = _x(tiny_config)
    y = torch.from_numpy(Rng(3).normal((2, 4, 5, 3)))
    y2d, yd, y3d = model(x)
    total_loss(y2d, yd, y3d, y, 0.5).backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not bool(p.grad.abs().sum() > 0)]
    assert missing == []


def test_float64_everywhere(tiny_config):
    model = PoseMoE(tiny_config)
    assert all(p.dtype == torch.float64 for p in model.parameters())
    assert np.isclose(float(model.pos_2d.detach().std()), 0.02, rtol=0.3)
