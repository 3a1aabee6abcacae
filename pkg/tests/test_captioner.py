import pytest
import torch

from ovpanoptic.captioner import FeatureExtractor, ImplicitCaptioner
from ovpanoptic.model import OpenVocabSegmenter
from ovpanoptic.training import build_optimizer, compute_losses, load_dataset

from conftest import small_config


@pytest.fixture(scope="module")
def model():
    return OpenVocabSegmenter(small_config())


def test_empty_mode_ignores_image(model):
    a = model.extractor.implicit_caption(torch.rand(1, 3, 32, 32), "empty")
    b = model.extractor.implicit_caption(torch.rand(1, 3, 32, 32), "empty")
    assert torch.equal(a.sequence, b.sequence)
    assert a.padding is not None and a.padding.all()


def test_implicit_mode_deterministic_and_shaped(model):
    x = torch.rand(2, 3, 32, 32)
    a = model.extractor.implicit_caption(x, "implicit")
    b = model.extractor.implicit_caption(x, "implicit")
    assert a.sequence.shape == (2, 8, 64)
    assert torch.equal(a.sequence, b.sequence)
    assert torch.isfinite(a.sequence).all()


def test_unknown_mode_rejected(model):
    with pytest.raises(ValueError):
        model.extractor.implicit_caption(torch.rand(1, 3, 32, 32), "blip")


def test_captioner_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cap = ImplicitCaptioner(6, 4, pseudo_tokens=3, hidden_dim=5).double()
    pooled = torch.randn(2, 6, dtype=torch.float64)
    w = cap.mlp[0].weight

    def f(weight):
        h = torch.nn.functional.linear(pooled, weight, cap.mlp[0].bias)
        out = cap.mlp[1:](h).view(2, 3, 4)
        return (out * torch.arange(24, dtype=torch.float64).view(2, 3, 4).cos()).sum()

    assert torch.autograd.gradcheck(f, (w.detach().clone().requires_grad_(True),), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_empty_and_implicit_pyramids_differ(model):
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        a = model.extractor(x, model.spec, 0, "empty")
        b = model.extractor(x, model.spec, 0, "implicit")
    assert not torch.equal(a.levels[-1], b.levels[-1])


def test_one_step_changes_only_trainable_parameters():
    cfg = small_config()
    model = OpenVocabSegmenter(cfg)
    ds = load_dataset(cfg)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    buffers = {n: b.clone() for n, b in model.named_buffers()}
    opt = build_optimizer(model, cfg)
    model.train()
    loss = compute_losses(model, ds, [0, 1], ds.vocabulary())["total"]
    loss.backward()
    for n, p in model.named_parameters():
        if not p.requires_grad:
            assert p.grad is None, n
    opt.step()
    for n, p in model.named_parameters():
        frozen = n.startswith(("extractor.text_encoder", "extractor.image_encoder", "extractor.unet",
                               "extractor.projection"))
        if frozen:
            assert torch.equal(p, before[n]), n
    assert not torch.equal(model.extractor.captioner.mlp[0].weight, before["extractor.captioner.mlp.0.weight"])
    assert all(torch.equal(b, buffers[n]) for n, b in model.named_buffers())


def test_trainable_census(model):
    names = {n.split(".")[0] if not n.startswith("extractor") else ".".join(n.split(".")[:2])
             for n, p in model.named_parameters() if p.requires_grad}
    assert names == {"extractor.captioner", "mask_generator", "tau_cls", "tau_grounding", "null_embedding"}
    model.check_census()


def test_frozen_submodules_stay_in_eval(model):
    model.train()
    assert not model.extractor.unet.training and not model.extractor.image_encoder.training
    assert model.extractor.captioner.training
    model.eval()
