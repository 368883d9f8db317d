import numpy as np
import pytest
import torch

from tissueproto.data import l2_normalize_rows
from tissueproto.distill import ContractError, DistillConfig, affinity, level_affinity, struct_loss
from tissueproto.encoders import FeaturePyramid

from oracles import naive_affinity


def _pyr(level2: torch.Tensor, role: str) -> FeaturePyramid:
    c = level2.shape[1]
    others = [torch.zeros(1, c, s, s, dtype=level2.dtype) for s in (4, 1, 1)]
    return FeaturePyramid([others[0], level2, others[1], others[2]], role)


def test_affinity_collinear_and_orthonormal():
    v = l2_normalize_rows(torch.ones(5, 3))
    assert torch.allclose(affinity(v), torch.ones(5, 5))
    assert torch.allclose(affinity(torch.eye(4)), torch.eye(4))


def test_affinity_matches_naive_oracle(rng):
    feat = rng.standard_normal((4, 2, 3))          # 6 tokens of dimension 4
    ours = level_affinity(torch.from_numpy(feat).double().unsqueeze(0))[0].numpy()
    assert np.abs(ours - naive_affinity(feat)).max() < 1e-6


def test_affinity_invariants(rng):
    tok = l2_normalize_rows(torch.from_numpy(rng.standard_normal((20, 7))))
    a = affinity(tok)
    assert torch.allclose(a, a.T, atol=1e-5)
    assert torch.allclose(torch.diagonal(a), torch.ones(20, dtype=a.dtype), atol=1e-5)
    assert float(a.abs().max()) <= 1 + 1e-6


def test_affinity_requires_normalised_rows():
    with pytest.raises(ContractError):
        affinity(torch.full((3, 2), 2.0))


def test_identical_streams_give_zero(rng):
    f = torch.from_numpy(rng.standard_normal((1, 8, 4, 4)))
    loss = struct_loss(_pyr(f, "refined"), _pyr(f.clone(), "teacher"), DistillConfig())
    assert float(loss) == pytest.approx(0.0, abs=1e-12)


def test_hand_built_2x2_grid():
    # student tokens alternate e1, e2, e1, e2; teacher tokens are all e1
    stu = torch.tensor([[[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]]])
    tea = torch.tensor([[[[1.0, 1.0], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]]]])
    # student affinity has 8 zeros among 16 entries, teacher is all ones -> MSE 8/16
    loss = struct_loss(_pyr(stu, "refined"), _pyr(tea, "teacher"), DistillConfig(layers=(2,)))
    assert float(loss) == pytest.approx(0.5, abs=1e-7)


def test_teacher_resized_to_student_grid(rng):
    stu = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)))
    tea = torch.from_numpy(rng.standard_normal((1, 6, 8, 8)))
    loss = struct_loss(_pyr(stu, "refined"), _pyr(tea, "teacher"), DistillConfig())
    assert torch.isfinite(loss) and float(loss) > 0


def test_common_permutation_invariance(rng):
    stu = torch.from_numpy(rng.standard_normal((1, 5, 3, 3)))
    tea = torch.from_numpy(rng.standard_normal((1, 7, 3, 3)))
    base = struct_loss(_pyr(stu, "refined"), _pyr(tea, "teacher"), DistillConfig())
    for _ in range(5):
        perm = torch.from_numpy(rng.permutation(9))

        def shuffle(f):
            return f.flatten(2)[..., perm].reshape(f.shape)

        moved = struct_loss(_pyr(shuffle(stu), "refined"), _pyr(shuffle(tea), "teacher"), DistillConfig())
        assert float(moved) == pytest.approx(float(base), abs=1e-12)


def test_no_gradient_to_teacher(rng):
    stu = torch.from_numpy(rng.standard_normal((1, 4, 3, 3))).requires_grad_()
    tea = torch.from_numpy(rng.standard_normal((1, 4, 3, 3))).requires_grad_()
    struct_loss(_pyr(stu, "refined"), _pyr(tea, "teacher"), DistillConfig()).backward()
    assert stu.grad is not None and tea.grad is None


def test_disabled_configs():
    assert not DistillConfig(layers=(), weight=1.5).enabled
    assert not DistillConfig(layers=(2,), weight=0.0).enabled
    f = torch.ones(1, 2, 2, 2)
    assert float(struct_loss(_pyr(f, "refined"), _pyr(-f, "teacher"), DistillConfig(layers=()))) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        DistillConfig(layers=(5,))
    with pytest.raises(ValueError):
        DistillConfig(layers=(2, 2))
    with pytest.raises(ValueError):
        DistillConfig(weight=-1)


def test_multi_layer_mean(rng):
    levels = [torch.from_numpy(rng.standard_normal((1, 3, s, s))) for s in (4, 3, 2, 2)]
    teach = [torch.from_numpy(rng.standard_normal((1, 3, s, s))) for s in (4, 3, 2, 2)]
    r, t = FeaturePyramid(levels, "refined"), FeaturePyramid(teach, "teacher")
    one = struct_loss(r, t, DistillConfig(layers=(1,)))
    two = struct_loss(r, t, DistillConfig(layers=(2,)))
    both = struct_loss(r, t, DistillConfig(layers=(1, 2)))
    assert float(both) == pytest.approx((float(one) + float(two)) / 2, rel=1e-12)
