import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseadv.baselines import Pgd0Config, l0_project, pgd0_attack, random_sparse_baseline
from sparseadv.evaluation import changed_pixels, sparsity_of
from sparseadv.quantize import unit_epsilon


def _delta_with_scores(scores):
    # one channel carries sqrt(score) so the per-pixel energy is exactly `score`
    d = torch.zeros(1, 3, 1, len(scores))
    d[0, 0, 0] = torch.tensor(scores, dtype=torch.float32).sqrt()
    return d


def test_l0_project_keeps_top_pixel():
    out = l0_project(_delta_with_scores([5.0, 2.0, 9.0]), 1)
    assert (out[0, 0, 0] != 0).tolist() == [False, False, True]


def test_l0_project_edge_counts():
    d = torch.randn(2, 3, 4, 4)
    assert torch.equal(l0_project(d, 16), d)
    assert torch.equal(l0_project(d, 100), d)
    assert torch.equal(l0_project(d, 0), torch.zeros_like(d))


def test_l0_project_ties_prefer_lowest_index():
    out = l0_project(_delta_with_scores([1.0, 3.0, 3.0, 3.0]), 2)
    assert (out[0, 0, 0] != 0).tolist() == [False, True, True, False]


def test_l0_project_per_image_k():
    d = torch.ones(2, 3, 2, 2)
    out = l0_project(d, torch.tensor([1, 3]))
    assert (out[:, 0] != 0).flatten(1).sum(dim=1).tolist() == [1, 3]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(0, 20))
def test_l0_project_idempotent_and_bounded(seed, k):
    d = torch.randn(2, 3, 4, 4, generator=torch.Generator().manual_seed(seed))
    once = l0_project(d, k)
    assert torch.equal(l0_project(once, k), once)
    assert ((once != 0).any(dim=1).flatten(1).sum(dim=1) <= k).all()


@pytest.mark.parametrize("change", [dict(k=0), dict(steps=0), dict(step_size=0.0),
                                    dict(targeted=True)])
def test_pgd0_config_validation(change):
    with pytest.raises(ValueError):
        Pgd0Config(**change).validate()


def test_pgd0_respects_constraints_and_is_reproducible(tiny_classifier, digits_test):
    x, y = digits_test.images[:8], digits_test.labels[:8]
    cfg = Pgd0Config(k=5, steps=10, epsilon=20, random_start=True, seed=1)
    a, ok_a = pgd0_attack(x, y, tiny_classifier, cfg)
    b, ok_b = pgd0_attack(x, y, tiny_classifier, cfg)
    assert torch.equal(a, b) and torch.equal(ok_a, ok_b)
    assert a.min() >= 0 and a.max() <= 1
    assert ((a - x).abs() <= unit_epsilon(20) + 1e-6).all()
    assert (changed_pixels(x, a).flatten(1).sum(dim=1) <= 5).all()
    assert sparsity_of(x, a) <= 5 / 256


def test_pgd0_success_flags_match_predictions(tiny_classifier, digits_test):
    x, y = digits_test.images[:8], digits_test.labels[:8]
    adv, ok = pgd0_attack(x, y, tiny_classifier, Pgd0Config(k=256, steps=20))
    with torch.no_grad():
        assert torch.equal(ok, tiny_classifier(adv).argmax(dim=1) != y)


class _NanModel(torch.nn.Module):
    def forward(self, x):
        return torch.stack([x.sum(dim=(1, 2, 3)) * float("nan"), x.sum(dim=(1, 2, 3))], dim=1)


def test_pgd0_non_finite_gradient_is_failure():
    x = torch.rand(2, 3, 4, 4)
    adv, ok = pgd0_attack(x, torch.tensor([0, 1]), _NanModel(), Pgd0Config(k=4, steps=3))
    assert not ok.any()


def test_random_baseline_k_zero_is_identity():
    x = torch.rand(3, 3, 8, 8)
    assert torch.equal(random_sparse_baseline(x, 0, 255, torch.Generator().manual_seed(0)), x)


def test_random_baseline_exact_sparsity():
    # mid-grey images never saturate, so every chosen pixel changes
    x = torch.full((4, 3, 8, 8), 0.5)
    out = random_sparse_baseline(x, 5, 10, torch.Generator().manual_seed(0))
    assert sparsity_of(x, out) == pytest.approx(5 / 64)
    assert torch.allclose((out - x).abs().amax(), torch.tensor(unit_epsilon(10)))


def test_random_baseline_per_image_k_and_seed():
    x = torch.full((2, 3, 4, 4), 0.5)
    k = torch.tensor([1, 7])
    out = random_sparse_baseline(x, k, 30, torch.Generator().manual_seed(3))
    assert changed_pixels(x, out).flatten(1).sum(dim=1).tolist() == [1, 7]
    again = random_sparse_baseline(x, k, 30, torch.Generator().manual_seed(3))
    assert torch.equal(out, again)
