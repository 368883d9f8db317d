import json
import math

import numpy as np
import pytest
import torch

from tissueproto.protocam import (DEFAULT_PROMPTS, LOGIT_SCALE_INIT, CamHead, class_logits,
                                  classification_loss, cosine_cams, init_prototypes, load_prompts,
                                  normalize_cams)

from oracles import bce_with_logits


def _cams_from_logits(z):
    # constant maps whose spatial mean is z
    z = torch.as_tensor(z, dtype=torch.float64)
    return z.view(1, -1, 1, 1).expand(1, -1, 3, 3).clone()


def test_prompts_cover_four_classes():
    prompts = load_prompts()
    assert len(prompts) == 4
    assert prompts[0].startswith("Tumor regions consist of malignant epithelial cells")
    assert prompts[3].startswith("Necrosis represents areas of dead or dying tissue")


def test_prompt_override(tmp_path):
    p = tmp_path / "prompts.json"
    p.write_text(json.dumps({"LYM": "immune cells"}))
    prompts = load_prompts(p)
    assert prompts[2] == "immune cells"
    assert prompts[0] == DEFAULT_PROMPTS["TUM"]
    p.write_text(json.dumps({"FAT": "adipose"}))
    with pytest.raises(ValueError):
        load_prompts(p)


def test_bank_from_prompts(toy):
    bank = init_prototypes(toy, load_prompts(), seed=0)
    assert bank.n_classes == 4
    p = bank.prototypes()
    assert torch.allclose(p.norm(dim=-1), torch.ones(4), atol=1e-5)
    assert bank.feature_prototypes().shape == (4, toy.student_dim)
    assert not bank.text_embeddings.requires_grad


def test_bank_seeded(toy):
    a = init_prototypes(toy, load_prompts(), seed=5)
    b = init_prototypes(toy, load_prompts(), seed=5)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)


def test_duplicate_prompts_share_rows(toy):
    text = DEFAULT_PROMPTS["STR"]
    bank = init_prototypes(toy, [text] * 4)
    p = bank.prototypes()
    assert torch.allclose(p[0], p[3])


def test_prompt_count_checked(toy):
    with pytest.raises(ValueError):
        init_prototypes(toy, load_prompts()[:3])


def test_tau_initialisation_and_clamp():
    head = CamHead()
    assert float(head.logit_scale.detach()) == pytest.approx(1 / 0.07, abs=1e-5)
    assert LOGIT_SCALE_INIT == pytest.approx(14.285714285714286)
    with torch.no_grad():
        head.logit_scale.fill_(500.0)
    assert float(head.scale().detach()) == 100.0
    head.clamp_()
    assert float(head.logit_scale.detach()) == 100.0
    with torch.no_grad():
        head.logit_scale.fill_(-3.0)
    head.clamp_()
    assert float(head.logit_scale.detach()) == 1.0


def test_cam_scores_closed_form():
    tau = 1 / 0.07
    # 2 tokens x 2 prototypes on a 1 x 2 grid
    feats = torch.tensor([[[[3.0, 0.0]], [[4.0, 2.0]]]], dtype=torch.float64)   # tokens (3,4), (0,2)
    protos = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    g = cosine_cams(feats, protos, tau)
    r2 = math.sqrt(2)
    expected = tau * torch.tensor([[0.6, 0.0], [(3 + 4) / (5 * r2), 1 / r2]], dtype=torch.float64)
    assert torch.allclose(g[0, :, 0, :], expected, atol=1e-12)


def test_cam_matching_and_orthogonal_tokens():
    feats = torch.tensor([[[[1.0]], [[0.0]]]])
    protos = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    g = cosine_cams(feats, protos, 10.0)
    assert float(g[0, 0, 0, 0]) == pytest.approx(10.0)
    assert float(g[0, 1, 0, 0]) == 0.0


def test_cam_channel_mismatch():
    with pytest.raises(ValueError):
        cosine_cams(torch.zeros(1, 3, 2, 2), torch.zeros(4, 5), 1.0)


def test_cams_equivariant_to_token_permutation(rng):
    feats = torch.from_numpy(rng.standard_normal((1, 6, 3, 4)))
    protos = torch.from_numpy(rng.standard_normal((4, 6)))
    perm = torch.from_numpy(rng.permutation(12))
    g = cosine_cams(feats, protos, 7.0).flatten(2)
    gp = cosine_cams(feats.flatten(2)[..., perm].reshape(feats.shape), protos, 7.0).flatten(2)
    assert torch.allclose(gp, g[..., perm], atol=1e-12)


def test_bce_hand_case():
    z = [1.0, -1.0, 0.0, 2.0]
    y = [1.0, 0.0, 0.0, 1.0]
    loss = float(classification_loss(_cams_from_logits(z), torch.tensor([y])))
    assert loss == pytest.approx(0.3616496416598409, abs=1e-6)
    assert loss == pytest.approx(bce_with_logits(z, y), abs=1e-6)


def test_bce_limits():
    assert float(classification_loss(_cams_from_logits([0.0] * 4), torch.tensor([[1, 0, 1, 0]]))) == \
        pytest.approx(math.log(2), abs=1e-7)
    sat = classification_loss(_cams_from_logits([60.0, -60.0, -60.0, -60.0]), torch.tensor([[1, 0, 0, 0]]))
    assert float(sat) < 1e-20


def test_bce_random_against_oracle(rng):
    for _ in range(20):
        z = rng.normal(0, 3, size=4)
        y = rng.integers(0, 2, size=4)
        ours = float(classification_loss(_cams_from_logits(z), torch.tensor(y[None])))
        assert ours == pytest.approx(bce_with_logits(z, y), abs=1e-6)


def test_logits_are_spatial_means(rng):
    cams = torch.from_numpy(rng.standard_normal((2, 4, 5, 6)))
    assert torch.allclose(class_logits(cams), cams.mean(dim=(2, 3)))


def test_normalize_label_masking_and_affine():
    cams = torch.zeros(1, 4, 2, 2, dtype=torch.float64)
    cams[0, 0] = torch.tensor([[2.0, 3.0], [5.0, 6.0]])
    cams[0, 1:] = torch.randn(3, 2, 2, dtype=torch.float64)
    out = normalize_cams(cams, torch.tensor([[1, 0, 0, 0]]))
    assert torch.equal(out[0, 1:], torch.zeros(3, 2, 2, dtype=torch.float64))
    assert torch.allclose(out[0, 0], (cams[0, 0] - 2) / 4)


def test_normalize_constant_map_is_zero():
    out = normalize_cams(torch.full((1, 4, 3, 3), 0.7), torch.ones(1, 4))
    assert torch.equal(out, torch.zeros(1, 4, 3, 3))


def test_normalized_maps_reach_one(rng):
    cams = torch.from_numpy(rng.standard_normal((1, 4, 5, 5)))
    out = normalize_cams(cams, torch.ones(1, 4))
    assert float(out.min()) >= 0.0
    assert torch.allclose(out.flatten(2).max(-1).values, torch.ones(1, 4, dtype=out.dtype))


def test_tau_scaling_invariance(rng):
    feats = torch.from_numpy(rng.standard_normal((1, 6, 4, 4)))
    protos = torch.from_numpy(rng.standard_normal((4, 6)))
    y = torch.tensor([[1, 1, 0, 1]])
    g1 = cosine_cams(feats, protos, 14.0)
    g2 = cosine_cams(feats, protos, 14.0 * 3.5)
    assert torch.allclose(g2, 3.5 * g1, atol=1e-12)
    assert torch.equal(g1.argmax(1), g2.argmax(1))
    assert torch.allclose(normalize_cams(g1, y), normalize_cams(g2, y), atol=1e-12)


def test_cls_gradients_reach_trainables(toy):
    from tissueproto.pipeline import Config, build_model
    model = build_model(Config(), backend=toy)
    img = torch.rand(1, 3, 64, 64)
    classification_loss(model.cams(img), torch.tensor([[1.0, 0, 0, 1]])).backward()
    assert model.head.logit_scale.grad is not None
    assert model.bank.proj[0].weight.grad is not None
    assert model.bank.adaptive[2].weight.grad is not None
    assert any(p.grad is not None for p in model.adapters.parameters())
    assert all(p.grad is None for p in toy.parameters())
    np.testing.assert_equal(model.bank.background.grad, None)
