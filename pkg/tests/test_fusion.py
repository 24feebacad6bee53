import dataclasses

import numpy as np
import pytest

from daftnet import tensor as T
from daftnet.fusion import (VARIANTS, AffineModulator, DaftConfig, DuanmuGates, ModelConfig, ModulationPair,
                            apply_gate, build_model, daft_aux, daft_transform, duanmu_gate, fix_alpha, fix_beta,
                            forward_with_override, modulation_param_count, modulation_stats, noise_alpha, noise_beta)
from daftnet.metrics import cross_entropy
from daftnet.nn import HOOK_POINTS, BatchNorm3d
from daftnet.tensor import Tensor

from oracles import daft_aux_dense

SMALL = dict(stem_channels=4, stem_stride=1, block_channels=(4, 8), block_strides=(2, 1))


def small_cfg(variant="daft", **daft):
    return ModelConfig(fusion_variant=variant, daft=DaftConfig(**daft), **SMALL)


def batch(n=4, size=8, seed=0, p=15):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, 1, size, size, size)).astype(np.float32),
            rng.standard_normal((n, p)).astype(np.float32))


# -- auxiliary network and transform ---------------------------------------------------

def _modulator(c=4, p=3, b=2, **kw):
    m = AffineModulator(c, p, DaftConfig(bottleneck_dim=b, **kw))
    rng = np.random.default_rng(0)
    m.squeeze.weight.data = rng.standard_normal(m.squeeze.weight.shape)
    m.expand.weight.data = rng.standard_normal(m.expand.weight.shape)
    return m


def test_aux_zero_second_layer_gives_zero_or_half():
    F = Tensor(np.random.default_rng(1).standard_normal((3, 4, 2, 2, 2)))
    x = Tensor(np.random.default_rng(2).standard_normal((3, 3)))
    m = _modulator()
    m.expand.weight.data[:] = 0
    alpha, beta = daft_aux(m, F, x)
    assert np.all(alpha.data == 0) and np.all(beta.data == 0)
    m = _modulator(scale_activation="sigmoid")
    m.expand.weight.data[:] = 0
    assert np.all(daft_aux(m, F, x).alpha.data == 0.5)


@pytest.mark.parametrize("act,fn", [("identity", lambda a: a), ("tanh", np.tanh),
                                    ("sigmoid", lambda a: 1 / (1 + np.exp(-a)))])
def test_aux_matches_dense_oracle(act, fn):
    m = _modulator(c=4, p=3, b=2, scale_activation=act)
    rng = np.random.default_rng(5)
    F = rng.standard_normal((1, 4, 3, 3, 3))
    x = rng.standard_normal((1, 3))
    alpha, beta = daft_aux(m, Tensor(F), Tensor(x))
    a_ref, b_ref = daft_aux_dense(F, x, m.squeeze.weight.data, m.expand.weight.data, fn)
    np.testing.assert_allclose(alpha.data, a_ref, atol=1e-6)
    np.testing.assert_allclose(beta.data, b_ref, atol=1e-6)


def test_aux_bias_free_and_bottleneck_must_squeeze():
    m = _modulator()
    assert [n for n, _ in m.named_parameters()] == ["squeeze.weight", "expand.weight"]
    with pytest.raises(ValueError, match="bottleneck"):
        AffineModulator(1, 2, DaftConfig(bottleneck_dim=4))


def test_squeeze_factor_used_when_bottleneck_unset():
    m = AffineModulator(16, 15, DaftConfig(bottleneck_dim=None, squeeze_factor=7))
    assert m.bottleneck_dim == 31 // 7


def test_disabled_scale_or_shift_is_exact():
    F = Tensor(np.random.default_rng(1).standard_normal((3, 4, 2, 2, 2)))
    x = Tensor(np.random.default_rng(2).standard_normal((3, 3)))
    assert np.all(daft_aux(_modulator(scale_enabled=False), F, x).alpha.data == 1)
    assert np.all(daft_aux(_modulator(shift_enabled=False), F, x).beta.data == 0)
    with pytest.raises(ValueError):
        DaftConfig(scale_enabled=False, shift_enabled=False)


def test_daft_transform_examples():
    F = Tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 2, 2)))
    ident = ModulationPair(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 3))))
    assert np.array_equal(daft_transform(F, ident).data, F.data)
    b = np.arange(6.0).reshape(2, 3)
    out = daft_transform(Tensor(np.zeros((2, 3, 2, 2, 2))), ModulationPair(Tensor(np.ones((2, 3))), Tensor(b)))
    assert np.all(out.data == b[:, :, None, None, None])
    out = daft_transform(Tensor(np.array([2.0, -1.0]).reshape(1, 1, 1, 1, 2)),
                         ModulationPair(Tensor(np.array([[3.0]])), Tensor(np.array([[0.5]]))))
    assert out.data.reshape(-1).tolist() == [6.5, -2.5]
    with pytest.raises(ValueError):
        daft_transform(F, ModulationPair(Tensor(np.ones((2, 2))), Tensor(np.zeros((2, 2)))))


def test_daft_transform_gradients():
    rng = np.random.default_rng(4)
    err = T.grad_check(lambda f, a, b: daft_transform(f, ModulationPair(a, b)),
                       [rng.standard_normal((2, 3, 2, 2, 2)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))])
    assert err < 1e-6


# -- Duanmu gates ---------------------------------------------------------------------

def test_duanmu_gates():
    gates = DuanmuGates(5, [3, 6])
    x = Tensor(np.random.default_rng(0).standard_normal((2, 5)))
    out = duanmu_gate(gates, x)
    assert [g.shape for g in out] == [(2, 3), (2, 6)] and all(np.all(g.data == 0.5) for g in out)
    F = Tensor(np.random.default_rng(1).standard_normal((2, 3, 2, 2, 2)))
    assert np.array_equal(apply_gate(F, out[0]).data, F.data * 0.5)
    rng = np.random.default_rng(2)
    for fc in gates.fcs:
        fc.weight.data = rng.standard_normal(fc.weight.shape)
    out = duanmu_gate(gates, x)
    for fc, g in zip(gates.fcs, out):
        ref = 1 / (1 + np.exp(-(x.data @ fc.weight.data.T)))
        np.testing.assert_allclose(g.data, ref, atol=1e-6)
        assert np.all((g.data > 0) & (g.data < 1))


# -- model builder ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("task", ["diagnosis", "survival"])
def test_every_variant_builds_and_backpropagates(variant, task):
    cfg = dataclasses.replace(small_cfg(variant), task=task)
    model = build_model(cfg, seed=0)
    img, tab = batch()
    out = model(Tensor(img), Tensor(tab))
    assert out.shape == ((4, 3) if task == "diagnosis" else (4, 1))
    T.tsum(out).backward()
    assert any(p.grad is not None for p in model.parameters())


def test_unknown_variant_and_bad_tabular_dim():
    with pytest.raises(ValueError, match="fusion_variant"):
        ModelConfig(fusion_variant="attention")
    model = build_model(small_cfg("daft"))
    img, _ = batch()
    with pytest.raises(ValueError):
        model(Tensor(img), Tensor(np.zeros((4, 7), np.float32)))


@pytest.mark.parametrize("location", HOOK_POINTS)
def test_parameter_count_formula_at_every_location(location):
    base = build_model(small_cfg("image_only"))
    daft = build_model(small_cfg("daft", location=location))
    block = daft.backbone.last_block
    c = block.hook_channels(location)
    extra = modulation_param_count(c, 15, 4)
    assert extra == (c + 15) * 4 + 4 * 2 * c
    # the preceding BatchNorm loses gamma/beta; the forced projection adds its conv + BatchNorm
    adjust = 0
    if location == "before_relu1":
        adjust -= 2 * block.out_channels
    if location == "before_shortcut_conv" and not base.backbone.last_block.has_projection:
        adjust += block.in_channels * block.out_channels + 2 * block.out_channels
    assert daft.num_parameters() - base.num_parameters() == extra + adjust
    assert daft.modulator.num_parameters() == extra


def test_default_model_parameter_difference():
    base = build_model(ModelConfig(fusion_variant="image_only"))
    daft = build_model(ModelConfig(fusion_variant="daft"))
    c = daft.backbone.last_block.hook_channels("before_conv1")
    assert daft.num_parameters() - base.num_parameters() == (c + 15) * 4 + 4 * 2 * c


def test_film_conditions_on_tabular_only():
    film = build_model(small_cfg("film"))
    c = film.modulator.channels
    assert film.modulator.num_parameters() == modulation_param_count(c, 15, 4, condition_on_image=False)


def test_only_the_batchnorm_before_the_hook_loses_affine():
    for location in HOOK_POINTS:
        model = build_model(small_cfg("daft", location=location))
        pre = model.preceding_batchnorm()
        for m in model.modules():
            if isinstance(m, BatchNorm3d):
                assert m.affine_enabled == (m is not pre)
        assert (pre is not None) == (location == "before_relu1")


def test_concat_1fc_with_zero_image_branch_is_linear_in_x():
    concat = build_model(small_cfg("concat_1fc"), seed=1)
    linear = build_model(small_cfg("tabular_linear"), seed=2)
    latent = concat.cfg.latent_dim
    concat.head.weight.data[:, :latent] = 0
    linear.head.weight.data = concat.head.weight.data[:, latent:].copy()
    linear.head.bias.data = concat.head.bias.data.copy()
    img, tab = batch()
    a = forward_with_override(concat, img, tab)
    b = forward_with_override(linear, img, tab)
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_builds_are_deterministic():
    img, tab = batch()
    a = forward_with_override(build_model(small_cfg("daft"), seed=7), img, tab)
    b = forward_with_override(build_model(small_cfg("daft"), seed=7), img, tab)
    assert np.array_equal(a, b)


def test_linear_with_resnet_features_freezes_the_image_model():
    feats = build_model(small_cfg("image_only"), seed=3)
    model = build_model(small_cfg("linear_with_resnet_features"), seed=0, feature_model=feats)
    assert model.num_parameters() == (feats.cfg.latent_dim + 15) * 3 + 3
    before = {k: v.copy() for k, v in feats.state_dict().items()}
    img, tab = batch()
    T.tsum(model(Tensor(img), Tensor(tab))).backward()
    assert all(p.grad is None for p in feats.parameters())
    assert all(np.array_equal(before[k], v) for k, v in feats.state_dict().items())
    assert any(k.startswith("frozen_features.") for k in model.state_dict())


# -- overrides and statistics -------------------------------------------------------------

@pytest.mark.parametrize("variant", ["daft", "film"])
def test_identity_override_equals_bypassed_modulation(variant):
    model = build_model(small_cfg(variant), seed=0)
    img, tab = batch(n=6)
    fixed = forward_with_override(model, img, tab, [fix_alpha(np.ones(model.modulator.channels)),
                                                    fix_beta(np.zeros(model.modulator.channels))])
    model.eval()
    bypass = model(Tensor(img), Tensor(tab), bypass_modulation=True).data
    assert np.array_equal(fixed, bypass)


def test_zero_noise_equals_plain_forward():
    model = build_model(small_cfg("daft"), seed=0)
    img, tab = batch()
    plain = forward_with_override(model, img, tab)
    assert np.array_equal(forward_with_override(model, img, tab, noise_alpha(0.0, seed=3)), plain)
    assert np.array_equal(forward_with_override(model, img, tab, noise_beta(0.0, seed=3)), plain)
    assert not np.array_equal(forward_with_override(model, img, tab, noise_beta(1.0, seed=3)), plain)


def test_noise_is_reproducible_and_batch_size_free():
    model = build_model(small_cfg("daft"), seed=0)
    img, tab = batch(n=6)
    a = forward_with_override(model, img, tab, noise_alpha(0.5, seed=1), batch_size=6)
    b = forward_with_override(model, img, tab, noise_alpha(0.5, seed=1), batch_size=6)
    assert np.array_equal(a, b)


def test_override_on_unmodulated_variant_is_an_error():
    model = build_model(small_cfg("concat_1fc"))
    img, tab = batch()
    with pytest.raises(ValueError):
        forward_with_override(model, img, tab, fix_alpha(np.ones(8)))
    with pytest.raises(ValueError):
        modulation_stats(model, img, tab)


def test_modulation_stats_single_instance_and_accumulation():
    model = build_model(small_cfg("daft"), seed=0)
    img, tab = batch(n=10, seed=4)
    a1, b1 = modulation_stats(model, img[:1], tab[:1])
    model(Tensor(img[:1]), Tensor(tab[:1]))
    np.testing.assert_array_equal(a1, model.modulator.last.alpha.data[0].astype(np.float64))
    np.testing.assert_array_equal(b1, model.modulator.last.beta.data[0].astype(np.float64))
    mean_a, mean_b = modulation_stats(model, img, tab, batch_size=3)
    acc_a, acc_b = np.zeros_like(mean_a), np.zeros_like(mean_b)
    for i in range(10):
        model(Tensor(img[i:i + 1]), Tensor(tab[i:i + 1]))
        acc_a += model.modulator.last.alpha.data[0]
        acc_b += model.modulator.last.beta.data[0]
    np.testing.assert_allclose(mean_a, acc_a / 10, atol=1e-6)
    np.testing.assert_allclose(mean_b, acc_b / 10, atol=1e-6)


def test_modulation_stats_two_instance_mean():
    model = build_model(small_cfg("film"), seed=0)
    mod = model.modulator
    mod.squeeze.weight.data[:] = 0
    mod.squeeze.weight.data[0, 0] = 1
    mod.expand.weight.data[:] = 0
    mod.expand.weight.data[:mod.channels, 0] = 1
    img, tab = batch(n=2)
    tab[:, 0] = [0.0, 2.0]
    mean_a, _ = modulation_stats(model, img, tab)
    assert np.all(mean_a == 1.0)


def test_gradient_reaches_tabular_input():
    model = build_model(small_cfg("daft"), seed=0)
    img, tab = batch()
    x = Tensor(tab, requires_grad=True)
    cross_entropy(model(Tensor(img), x), [0, 1, 2, 0]).backward()
    assert x.grad is not None and np.abs(x.grad).sum() > 0
