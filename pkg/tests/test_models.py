import numpy as np
import pytest

from stainbench.data import stitch, tile_image
from stainbench.models import ModelSpec, build_model, build_pixelmapper, build_unet, infer
from stainbench.tensor import ShapeError

# closed-form count over the fixed schedule (conv: o*i*k*k + o, upconv: i*(i/2)*4 + i/2),
# evaluated by a separate counting script
UNET64_PARAMS = 1_862_979
UNET8_PARAMS = 29_483
PIXELMAPPER_PARAMS = 1_283


def test_unet_preserves_tile_shape():
    model = build_unet(ModelSpec(base_channels=4))
    assert model(np.zeros((1, 3, 256, 256), np.float32)).shape == (1, 3, 256, 256)


def test_unet_channel_schedule():
    model = build_unet(ModelSpec())
    shapes = model.param_shapes()
    assert shapes["up1.weight"][:2] == (256, 128)
    assert shapes["up2.weight"][:2] == (128, 64)
    assert shapes["head.weight"] == (3, 64, 1, 1)
    assert shapes["dec1.conv1.weight"][:2] == (128, 256)


def test_parameter_counts():
    assert build_unet(ModelSpec()).num_params() == UNET64_PARAMS
    assert build_unet(ModelSpec(base_channels=8)).num_params() == UNET8_PARAMS
    assert build_pixelmapper(ModelSpec(kind="pixelmapper")).num_params() == PIXELMAPPER_PARAMS


@pytest.mark.parametrize("spec", [ModelSpec(kind="gan"), ModelSpec(depth=3), ModelSpec(base_channels=0),
                                  ModelSpec(kind="pixelmapper", widths=[3, 8, 4])])
def test_invalid_specs(spec):
    with pytest.raises(ValueError):
        build_model(spec)


def test_builders_check_kind():
    with pytest.raises(ValueError):
        build_unet(ModelSpec(kind="pixelmapper"))
    with pytest.raises(ValueError):
        build_pixelmapper(ModelSpec(kind="unet"))


def test_pixelmapper_commutes_with_pixel_permutation():
    model = build_pixelmapper(ModelSpec(kind="pixelmapper"), seed=3)
    rng = np.random.default_rng(3)
    x = rng.random((1, 3, 6, 10), dtype=np.float32)
    perm = rng.permutation(60)
    xp = x.reshape(1, 3, 60)[:, :, perm].reshape(x.shape)
    assert np.array_equal(model(xp).reshape(1, 3, 60), model(x).reshape(1, 3, 60)[:, :, perm])


def test_pixelmapper_accepts_odd_dims():
    model = build_pixelmapper(ModelSpec(kind="pixelmapper"))
    assert model(np.zeros((1, 3, 17, 31), np.float32)).shape == (1, 3, 17, 31)


def test_pixelmapper_tiled_inference_is_bit_identical():
    model = build_pixelmapper(ModelSpec(kind="pixelmapper"), seed=4)
    img = np.random.default_rng(4).random((3, 50, 70), dtype=np.float32)
    tiles, grid = tile_image(img, 16, 0)
    stitched = stitch(infer(model, tiles), grid)
    assert np.array_equal(stitched, infer(model, img[None])[0])


def test_unet_translation_equivariance_in_interior():
    model = build_unet(ModelSpec(base_channels=4), seed=5)
    big = np.random.default_rng(5).random((1, 3, 84, 84), dtype=np.float32)
    a, b = big[:, :, :80, :80], big[:, :, 4:84, 4:84]
    fa, fb = model(a), model(b)
    m = 24  # beyond the receptive-field reach of the zero padding
    np.testing.assert_allclose(fa[:, :, 4 + m:80 - m, 4 + m:80 - m], fb[:, :, m:76 - m, m:76 - m], atol=1e-4)


def test_infer_clamps_and_is_deterministic():
    model = build_unet(ModelSpec(base_channels=4), seed=6)
    model.params["head.bias"][:] = [5.0, -5.0, 0.0]
    x = np.zeros((2, 3, 8, 8), np.float32)
    out = infer(model, x)
    assert np.isfinite(out).all() and out.min() >= 0 and out.max() <= 1
    assert np.all(out[:, 0] == 1.0) and np.all(out[:, 1] == 0.0)
    assert np.array_equal(out, infer(model, x))


def test_infer_rejects_indivisible_dims():
    with pytest.raises(ShapeError, match="reflect-pad"):
        infer(build_unet(ModelSpec(base_channels=2)), np.zeros((1, 3, 10, 12)))


def test_float64_copy_for_gradient_checks():
    model = build_unet(ModelSpec(base_channels=2), seed=1)
    m64 = model.astype(np.float64)
    x = np.random.default_rng(0).random((1, 3, 8, 8))
    assert m64(x).dtype == np.float64
    np.testing.assert_allclose(m64(x), model(x.astype(np.float32)), atol=1e-5)
