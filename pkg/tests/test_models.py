import math

import pytest
import torch

from sourcefree.errors import ContractError, IngestionError
from sourcefree.models import (ClassifierTrace, Generator, SourceClassifier, classifier_forward,
                               current_stats, generator_forward, load_checkpoint, save_checkpoint,
                               state_hash)

from conftest import tiny_classifier


def fake_trace(bn_input):
    return ClassifierTrace([bn_input], torch.zeros(bn_input.shape[0], 1), torch.zeros(bn_input.shape[0], 2))


def test_probs_are_distributions():
    torch.manual_seed(0)
    m = SourceClassifier(widths=(8, 8, 8)).freeze()
    tr = classifier_forward(m, torch.rand(5, 3, 32, 32))
    p = tr.probs
    assert (p >= 0).all()
    assert torch.allclose(p.sum(1), torch.ones(5), atol=1e-5)
    assert tr.last_features.shape == (5, 8)
    assert [h.shape[1] for h in tr.bn_inputs] == [8, 8, 8]


def test_default_architecture():
    m = SourceClassifier()
    assert [bn.num_features for bn in m.bns] == [64, 128, 256]
    assert m.head.in_features == 256


def test_duplicated_samples_give_identical_rows():
    m = tiny_classifier()
    x = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    x = torch.cat([x, x[:1]])
    tr = classifier_forward(m, x)
    assert torch.equal(tr.last_features[0], tr.last_features[3])
    assert torch.equal(tr.logits[0], tr.logits[3])


def test_forward_is_bit_stable():
    torch.manual_seed(4)
    m = SourceClassifier(widths=(8, 8, 8)).freeze()
    x = torch.rand(4, 3, 32, 32, generator=torch.Generator().manual_seed(1))
    a = classifier_forward(m, x).last_features
    b = classifier_forward(m, x).last_features
    assert a.numpy().tobytes() == b.numpy().tobytes()


def test_forward_shape_contract():
    m = tiny_classifier()
    with pytest.raises(ContractError):
        classifier_forward(m, torch.rand(2, 1, 8, 8, dtype=torch.float64))


def test_forward_requires_inference_mode():
    m = SourceClassifier(widths=(4, 4, 4))
    m.train()
    with pytest.raises(ContractError):
        classifier_forward(m, torch.rand(2, 3, 32, 32))


def test_frozen_refuses_training():
    m = tiny_classifier()
    assert m.frozen and not m.training
    assert all(not p.requires_grad for p in m.parameters())
    with pytest.raises(ContractError):
        m.train()
    m.eval()  # switching to eval stays allowed


def test_stored_stats_match_running_buffers():
    m = tiny_classifier()
    for s, bn in zip(m.stored_stats(), m.bns):
        assert s.kind == "stored"
        assert s.n_channels == bn.num_features
        assert torch.allclose(s.std, torch.sqrt(bn.running_var + 1e-5))
        assert (s.std >= 0).all()


def test_current_stats_constant_input():
    s = current_stats(fake_trace(torch.full((4, 3, 5, 5), 2.5, dtype=torch.float64)), 0)
    assert torch.allclose(s.mean, torch.full((3,), 2.5, dtype=torch.float64))
    assert torch.allclose(s.std, torch.full((3,), math.sqrt(1e-5), dtype=torch.float64))
    assert s.kind == "current"


def test_current_stats_two_samples():
    h = torch.tensor([0.0, 2.0], dtype=torch.float64).view(2, 1, 1, 1)
    s = current_stats(fake_trace(h), 0)
    assert s.mean.item() == pytest.approx(1.0)
    assert s.std.item() == pytest.approx(math.sqrt(1 + 1e-5), abs=1e-15)


def test_current_stats_permutation_invariant():
    h = torch.randn(6, 4, 3, 3, dtype=torch.float64)
    a = current_stats(fake_trace(h), 0)
    b = current_stats(fake_trace(h[torch.randperm(6)]), 0)
    assert torch.allclose(a.mean, b.mean, atol=1e-14) and torch.allclose(a.std, b.std, atol=1e-14)


def test_current_stats_needs_two():
    with pytest.raises(ContractError):
        current_stats(fake_trace(torch.zeros(1, 2, 2, 2)), 0)


def test_batch_stats_approach_stored_as_batch_grows(synth_classifier):
    from sourcefree.data import make_synthetic_pair

    data = make_synthetic_pair(0, 60, "color_tint").source.images
    stored = synth_classifier.stored_stats()
    g = torch.Generator().manual_seed(0)
    gaps = []
    with torch.no_grad():
        for size in (8, 64, 512):
            total = 0.0
            for _ in range(8):
                idx = torch.randperm(len(data), generator=g)[:size]
                tr = classifier_forward(synth_classifier, data[idx])
                total += sum((current_stats(tr, n).mean - s.mean).abs().mean().item()
                             for n, s in enumerate(stored))
            gaps.append(total / 8)
    assert gaps[0] > gaps[1] > gaps[2], gaps


# generator -------------------------------------------------------------------------

def test_generator_shape_and_range():
    torch.manual_seed(0)
    g = Generator(width=8)
    x = torch.rand(16, 3, 32, 32)
    y = generator_forward(g, x)
    assert y.shape == (16, 3, 32, 32)
    assert y.min() >= 0 and y.max() <= 1


def test_generator_starts_near_identity():
    torch.manual_seed(0)
    g = Generator()
    x = torch.rand(16, 3, 32, 32, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        dist = (generator_forward(g, x) - x).abs().flatten(1).max(dim=1).values.mean().item()
    assert dist < 0.3


def test_generator_is_differentiable():
    g = Generator(width=4, n_blocks=1)
    generator_forward(g, torch.rand(2, 3, 32, 32)).sum().backward()
    assert all(p.grad is not None for p in g.parameters())


# checkpoints ----------------------------------------------------------------------

def test_classifier_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    m = SourceClassifier(widths=(4, 6, 8))
    for bn in m.bns:
        bn.running_mean.uniform_(-1, 1)
    m.freeze()
    save_checkpoint(m, tmp_path / "c.pt")
    back = load_checkpoint(tmp_path / "c.pt", expect="classifier")
    assert state_hash(back) == state_hash(m)
    assert back.frozen
    for a, b in zip(back.stored_stats(), m.stored_stats()):
        assert torch.equal(a.mean, b.mean) and torch.equal(a.std, b.std)


def test_generator_checkpoint_roundtrip(tmp_path):
    g = Generator(width=4, n_blocks=2)
    save_checkpoint(g, tmp_path / "g.pt")
    assert state_hash(load_checkpoint(tmp_path / "g.pt", expect="generator")) == state_hash(g)


def test_checkpoint_validates_channels(tmp_path):
    m = SourceClassifier(widths=(4, 6, 8)).freeze()
    save_checkpoint(m, tmp_path / "c.pt")
    payload = torch.load(tmp_path / "c.pt", weights_only=True)
    payload["stored_stats"][1]["mean"] = torch.zeros(5)
    torch.save(payload, tmp_path / "bad.pt")
    with pytest.raises(IngestionError, match="BN layer 1"):
        load_checkpoint(tmp_path / "bad.pt")


def test_checkpoint_version_and_kind(tmp_path):
    g = Generator(width=2, n_blocks=0)
    save_checkpoint(g, tmp_path / "g.pt")
    with pytest.raises(IngestionError, match="expected a classifier"):
        load_checkpoint(tmp_path / "g.pt", expect="classifier")
    payload = torch.load(tmp_path / "g.pt", weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "v.pt")
    with pytest.raises(IngestionError, match="version"):
        load_checkpoint(tmp_path / "v.pt")
