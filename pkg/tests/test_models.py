import numpy as np
import pytest

from strokeseg.autodiff import Tensor, backward, no_grad, precision
from strokeseg.models import (
    PUBLISHED_PARAMETER_COUNTS,
    VARIANTS,
    VARIANTS_2D,
    ModelSpec,
    ModelSpecError,
    build_model,
    parameter_count,
)

TOY_EXTENTS = {2: (16, 16), 3: (8, 8, 8)}


def toy(variant, **kw):
    nd = 3 if variant.endswith("3d") else 2
    kw.setdefault("width_scale", 8 if nd == 2 else 4)
    return ModelSpec(variant, input_extents=TOY_EXTENTS[nd], **kw)


class TestSpec:
    def test_published_widths(self):
        assert ModelSpec("unet2d").channels == (64, 128, 256, 512, 1024)
        assert ModelSpec("unet2d").levels == 4
        assert ModelSpec("unettransformer2d").channels == (64, 128, 256, 512)
        assert ModelSpec("unettransformer2d").levels == 3
        assert ModelSpec("resunet3d").channels == (16, 32, 64, 128)
        assert ModelSpec("resunet3d").levels == 3
        assert ModelSpec("unet3d").dropout == 0.2

    def test_width_scale(self):
        assert ModelSpec("unet2d", width_scale=8).channels == (8, 16, 32, 64, 128)

    def test_published_extents(self):
        assert ModelSpec("unet3d").input_extents == (144, 172, 128)
        assert ModelSpec("attnunet3d").input_extents == (144, 176, 128)

    @pytest.mark.parametrize("bad", [dict(variant="vnet"), dict(variant="unet2d", width_scale=0),
                                     dict(variant="unet2d", dropout=1.0),
                                     dict(variant="unet2d", channels=(4, 8), levels=3),
                                     dict(variant="unet3d", input_extents=(8, 8))])
    def test_invalid(self, bad):
        with pytest.raises(ModelSpecError):
            ModelSpec(**bad)

    def test_dict_round_trip(self):
        s = toy("attnunet3d")
        assert ModelSpec.from_dict(s.to_dict()) == s


class TestBuild:
    def test_same_seed_identical(self):
        a = build_model(toy("transattn2d"), 3).parameters()
        b = build_model(toy("transattn2d"), 3).parameters()
        assert a.keys() == b.keys()
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_biases_zero_and_weights_bounded(self):
        params = build_model(toy("unet2d"), 0).parameters()
        w = params["encoder.0.conv1.weight"].data
        assert np.abs(w).max() <= np.sqrt(6 / 9) + 1e-12  # fan_in = 1 * 3 * 3
        assert not params["encoder.0.conv1.bias"].data.any()

    def test_width_scaling_is_quadratic(self):
        full = parameter_count(build_model(ModelSpec("unet2d", width_scale=4), 0))
        half = parameter_count(build_model(ModelSpec("unet2d", width_scale=8), 0))
        assert 4 * 0.85 <= full / half <= 4 * 1.15

    @pytest.mark.parametrize("variant", ["resunet3d", "attnunet3d", "unet3d"])
    def test_3d_counts(self, variant):
        n = parameter_count(build_model(ModelSpec(variant), 0))
        assert abs(n / PUBLISHED_PARAMETER_COUNTS[variant] - 1) <= 0.10


@pytest.mark.parametrize("variant", VARIANTS)
def test_toy_forward_backward(variant):
    spec = toy(variant)
    m = build_model(spec, 0).train()
    x = np.random.default_rng(0).normal(size=(2, 1) + spec.input_extents)
    with precision("float64"):
        y = m(Tensor(x), np.random.default_rng(1))
        assert y.shape == x.shape
        assert ((y.data > 0) & (y.data < 1)).all()
        grads = backward(y.mean())
    for name, p in m.parameters().items():
        assert p in grads, f"{name} unreachable"
        assert np.isfinite(grads[p]).all()


@pytest.mark.parametrize("variant", VARIANTS)
def test_eval_is_deterministic(variant):
    spec = toy(variant)
    x = Tensor(np.random.default_rng(5).normal(size=(1, 1) + spec.input_extents))
    with no_grad():
        a = build_model(spec, 2).eval()(x).data
        b = build_model(spec, 2).eval()(x).data
    assert np.array_equal(a, b)


def test_wrong_extents_rejected():
    m = build_model(toy("unet2d"), 0)
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 1, 20, 20))))
    with pytest.raises(ValueError):
        m(Tensor(np.zeros((1, 2, 16, 16))))


def test_odd_extents_are_padded():
    spec = ModelSpec("unet3d", width_scale=4, input_extents=(12, 10, 9))
    with no_grad():
        y = build_model(spec, 0).eval()(Tensor(np.zeros((1, 1, 12, 10, 9))))
    assert y.shape == (1, 1, 12, 10, 9)


def test_astype_converts_everything():
    m = build_model(toy("attnunet2d"), 0).astype(np.float32)
    assert all(p.dtype == np.float32 for p in m.parameters().values())
    assert all(b.dtype == np.float32 for b in m.buffers().values())


def test_2d_variant_list():
    assert len(VARIANTS) == 8 and len(VARIANTS_2D) == 5
