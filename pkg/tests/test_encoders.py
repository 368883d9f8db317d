import logging

import pytest
import torch

from tissueproto.encoders import (AdapterStack, BackendUnavailable, FeaturePyramid, REAL_ADAPTER_HIDDEN,
                                  ToyBackend, count_parameters, get_backend, trainable_parameter_report)
from tissueproto.protocam import DEFAULT_PROMPTS

from oracles import central_difference, relative_error


def _image(h=224, w=224, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, h, w, generator=g)


def test_toy_pyramids_deterministic(toy):
    x = _image()
    for fn in (toy.student_pyramid, toy.teacher_pyramid):
        a, b = fn(x), fn(x)
        for la, lb in zip(a.levels, b.levels):
            assert torch.equal(la, lb)


def test_toy_backend_pure_in_seed():
    x = _image()
    a = ToyBackend(seed=3).student_pyramid(x)
    b = ToyBackend(seed=3).student_pyramid(x)
    c = ToyBackend(seed=4).student_pyramid(x)
    assert all(torch.equal(p, q) for p, q in zip(a.levels, b.levels))
    assert not torch.equal(a.levels[0], c.levels[0])


def test_toy_level_shapes(toy):
    s = toy.student_pyramid(_image())
    t = toy.teacher_pyramid(_image())
    assert s.level_dims == [(64, 56, 56), (64, 28, 28), (64, 14, 14), (64, 7, 7)]
    assert t.level_dims == [(32, 56, 56), (32, 28, 28), (32, 14, 14), (32, 7, 7)]


def test_non_square_input_keeps_aspect(toy):
    pyr = toy.student_pyramid(_image(224, 112))
    for f in pyr.levels[:3]:
        h, w = f.shape[-2:]
        assert h == 2 * w
    # 112 / 32 is not an integer; the coarsest grid floors to 7 x 3
    assert [tuple(f.shape[-2:]) for f in pyr.levels] == [(224 // s, 112 // s) for s in (4, 8, 16, 32)]


def test_teacher_resolutions_strictly_decrease(toy):
    sizes = [f.shape[-2] * f.shape[-1] for f in toy.teacher_pyramid(_image()).levels]
    assert all(a > b for a, b in zip(sizes, sizes[1:]))


def test_pyramid_level_count_enforced():
    with pytest.raises(ValueError):
        FeaturePyramid([torch.zeros(1, 1, 2, 2)] * 3, "student")
    with pytest.raises(ValueError):
        FeaturePyramid([torch.zeros(1, 1, 2, 2)] * 4, "middle")


def test_bad_image_shape(toy):
    with pytest.raises(ValueError):
        toy.student_pyramid(torch.zeros(1, 4, 32, 32))


def test_real_backend_strict_raises():
    with pytest.raises(BackendUnavailable, match="conch|transformers"):
        get_backend("conch+segformer", strict=True)


def test_real_backend_falls_back_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        b = get_backend("conch+segformer")
    assert isinstance(b, ToyBackend)
    assert "falling back" in caplog.text


def test_unknown_backend():
    with pytest.raises(KeyError):
        get_backend("resnet")


def test_adapter_zero_init_is_identity(toy):
    stack = AdapterStack(toy.student_dim)
    stu = toy.student_pyramid(_image())
    grids = toy.guidance_grids(224, 224)
    out = stack(stu, grids)
    assert out.role == "refined"
    for a, b in zip(stu.levels, out.levels):
        assert a.shape == b.shape
        assert torch.allclose(a, b)


def test_adapter_rejects_teacher(toy):
    stack = AdapterStack(toy.teacher_dims[0])
    with pytest.raises(ValueError):
        stack(toy.teacher_pyramid(_image()), toy.guidance_grids(224, 224))


def test_adapter_output_shape_on_guidance_grid(toy):
    stack = AdapterStack(toy.student_dim)
    with torch.no_grad():
        for blk in stack.blocks:
            torch.nn.init.normal_(blk.expand.weight, std=0.1)
    out = stack(toy.student_pyramid(_image(224, 112)), toy.guidance_grids(224, 112))
    assert [tuple(f.shape[-2:]) for f in out.levels] == toy.guidance_grids(224, 112)
    assert all(f.shape[1] == toy.student_dim for f in out.levels)


def test_adapter_gradient_finite_difference(toy):
    torch.manual_seed(1)
    stack = AdapterStack(toy.student_dim).double()
    with torch.no_grad():
        for blk in stack.blocks:
            torch.nn.init.normal_(blk.expand.weight, std=0.05)
    stu = toy.student_pyramid(_image(64, 64).double())
    stu = FeaturePyramid([f.double() for f in stu.levels], "student")
    grids = toy.guidance_grids(64, 64)
    target = torch.randn(1, toy.student_dim, *grids[1], dtype=torch.float64)

    def loss():
        return ((stack(stu, grids)[2] - target) ** 2).mean()

    w = stack.blocks[1].reduce.weight
    stack.zero_grad()
    loss().backward()
    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        idx = tuple(int(torch.randint(0, n, (1,), generator=g)) for n in w.shape)
        with torch.no_grad():
            num = central_difference(lambda: float(loss()), w.data, idx)
        assert relative_error(float(w.grad[idx]), num) < 1e-4


def test_toy_parameter_count_by_hand():
    c, h = 64, 32
    per_adapter = (c * h + h) + (h + h) + (9 * h + h) + (h + h) + (h * c + c)
    assert per_adapter == 4640
    stack = AdapterStack(c)
    assert count_parameters(stack) == 4 * per_adapter == 18560
    assert AdapterStack.expected_parameter_count(c, h) == 18560


def test_real_configuration_parameter_count():
    stack = AdapterStack(768, REAL_ADAPTER_HIDDEN)
    n = count_parameters(stack)
    assert n == AdapterStack.expected_parameter_count(768, REAL_ADAPTER_HIDDEN) == 6_355_968
    assert 5.8e6 <= n <= 6.8e6


def test_frozen_backend_report(toy):
    model = torch.nn.Module()
    model.backend = toy
    model.adapters = AdapterStack(toy.student_dim)
    rep = trainable_parameter_report(model)
    assert rep["modules"]["backend"]["trainable"] == 0
    assert rep["modules"]["backend"]["total"] > 0
    assert rep["trainable"] == 18560
    assert rep["fraction"] == pytest.approx(18560 / rep["total"])
    assert toy.frozen


def test_encode_text(toy):
    a = toy.encode_text(DEFAULT_PROMPTS["TUM"])
    b = toy.encode_text(DEFAULT_PROMPTS["TUM"])
    assert torch.equal(a, b)
    embs = torch.stack([toy.encode_text(p) for p in DEFAULT_PROMPTS.values()])
    assert torch.isfinite(embs).all() and embs.shape == (4, toy.text_dim)
    cos = embs @ embs.T
    assert float(cos[0, 3]) < 1 - 1e-4
    off = cos[~torch.eye(4, dtype=torch.bool)]
    assert float(off.max()) < 0.9999


def test_encode_text_empty(toy):
    with pytest.raises(ValueError):
        toy.encode_text("   ")


def test_image_embeddings_unit_norm(toy):
    e = toy.embed_images(_image(seed=2).repeat(2, 1, 1, 1))
    assert torch.allclose(e.norm(dim=-1), torch.ones(2), atol=1e-5)
