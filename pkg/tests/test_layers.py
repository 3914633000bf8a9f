import numpy as np
import pytest

from stainbench.checkpoint import load_checkpoint, save_checkpoint
from stainbench.gradcheck import numerical_gradient, rel_error
from stainbench.layers import Conv, InitSpec, forward_backward, init_params, l1_loss
from stainbench.models import ModelSpec, UNet, build_unet
from stainbench.tensor import ShapeError


def test_init_is_deterministic_per_seed():
    a = UNet(ModelSpec(base_channels=4))
    b = UNet(ModelSpec(base_channels=4))
    init_params(InitSpec(7), a)
    init_params(InitSpec(7), b)
    assert a.params.keys() == b.params.keys()
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    init_params(InitSpec(8), b)
    assert a.params["enc1.conv1.weight"].tobytes() != b.params["enc1.conv1.weight"].tobytes()


def test_he_normal_std_and_zero_bias():
    model = UNet(ModelSpec(base_channels=64))
    init_params(InitSpec(3), model)
    w = model.params["enc2.conv1.weight"]  # 3x3, in_ch 64, 128*576 = 73728 draws
    assert w.size >= 10_000
    assert abs(w.std() / np.sqrt(2 / 576) - 1) < 0.1
    assert all(not v.any() for k, v in model.params.items() if k.endswith(".bias"))


def test_parameter_names_unique_and_stable():
    model = build_unet(ModelSpec(base_channels=2))
    names = list(model.param_shapes())
    assert len(names) == len(set(names))
    assert names == list(build_unet(ModelSpec(base_channels=2), seed=99).params)


def test_invalid_kernel_size():
    with pytest.raises(ValueError):
        Conv("bad", 3, 3, k=5)


def test_init_spec_rejects_bad_seed():
    with pytest.raises(ValueError):
        InitSpec(seed=-1)


def test_l1_loss_hand_values():
    loss, grad = l1_loss(np.array([1.0, -1.0]), np.zeros(2))
    assert loss == 1.0
    assert np.array_equal(grad, [0.5, -0.5])


def test_l1_loss_zero_at_target():
    x = np.random.default_rng(0).random((2, 3, 4, 4))
    loss, grad = l1_loss(x, x.copy())
    assert loss == 0.0 and not grad.any()


def test_l1_shape_mismatch():
    with pytest.raises(ShapeError):
        l1_loss(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


@pytest.mark.parametrize("seed", range(5))
def test_l1_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pred, target = rng.standard_normal(12), rng.standard_normal(12)
    _, grad = l1_loss(pred, target)
    assert rel_error(grad, numerical_gradient(lambda: l1_loss(pred, target)[0], pred)) < 1e-5


def test_self_distillation_has_zero_loss_and_gradient():
    model = build_unet(ModelSpec(base_channels=2), seed=1)
    x = np.random.default_rng(1).random((2, 3, 8, 8)).astype(np.float32)
    loss, grads = forward_backward(model, x, model(x))
    assert loss == 0.0
    assert all(not g.any() for g in grads.values())


def test_forward_backward_touches_every_parameter_and_is_deterministic():
    model = build_unet(ModelSpec(base_channels=2), seed=2)
    rng = np.random.default_rng(2)
    x, y = rng.random((2, 3, 8, 8), dtype=np.float32), rng.random((2, 3, 8, 8), dtype=np.float32)
    l1, g1 = forward_backward(model, x, y)
    l2, g2 = forward_backward(model, x, y)
    assert set(g1) == set(model.params)
    assert all(g1[k].shape == model.params[k].shape for k in g1)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)


def test_indivisible_input_names_divisibility():
    model = build_unet(ModelSpec(base_channels=2))
    with pytest.raises(ShapeError, match="divisible by 4"):
        forward_backward(model, np.zeros((1, 3, 10, 8), np.float32), np.zeros((1, 3, 10, 8), np.float32))


def _sampled_gradcheck(model, x, y, n_coords, rng):
    _, grads = forward_backward(model, x, y)
    names = list(model.params)
    analytic, numeric = [], []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        fd = numerical_gradient(lambda: l1_loss(model(x), y)[0], p, coords=[idx])
        analytic.append(grads[name][idx])
        numeric.append(fd[idx])
    return rel_error(analytic, numeric)


def test_toy_unet_end_to_end_gradcheck():
    rng = np.random.default_rng(11)
    model = build_unet(ModelSpec(base_channels=2), seed=11).astype(np.float64)
    for name, p in model.params.items():  # move off the ReLU kink that zero biases create
        if name.endswith(".bias"):
            p[:] = rng.normal(0, 0.1, p.shape)
    x, y = rng.random((1, 3, 8, 8)), rng.random((1, 3, 8, 8))
    assert _sampled_gradcheck(model, x, y, 60, rng) < 1e-4


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    model = build_unet(ModelSpec(base_channels=4), seed=5)
    x = np.random.default_rng(5).random((1, 3, 16, 16), dtype=np.float32)
    before = model(x)
    save_checkpoint(tmp_path / "m.ckpt", model, epoch=3)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.epoch == 3 and ck.spec == model.spec
    assert np.array_equal(ck.model()(x), before)
    save_checkpoint(tmp_path / "m2.ckpt", ck.model(), epoch=3)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
