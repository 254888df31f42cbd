import pytest
import torch

from sparseadv.models import (
    ARCHITECTURES,
    ClassifierHandle,
    load_classifier,
    logits,
    save_classifier,
    train_classifier,
)


def _handle(arch, size=16):
    torch.manual_seed(0)
    return ClassifierHandle(arch, 10, [0.5] * 3, [0.25] * 3, (size, size)).freeze()


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_shapes_and_finite_on_zero_image(arch):
    f = _handle(arch)
    out = logits(f, torch.zeros(5, 3, 16, 16))
    assert out.shape == (5, 10) and torch.isfinite(out).all()


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_gradient_matches_finite_differences(arch):
    f = _handle(arch).double()
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    x.requires_grad_(True)
    (grad,) = torch.autograd.grad(logits(f, x, requires_grad=True)[0, 3], x)
    h = 1e-6
    for c in range(3):
        for i in range(6, 10):
            for j in range(6, 10):
                up, dn = x.detach().clone(), x.detach().clone()
                up[0, c, i, j] += h
                dn[0, c, i, j] -= h
                fd = (logits(f, up)[0, 3] - logits(f, dn)[0, 3]).item() / (2 * h)
                assert grad[0, c, i, j].item() == pytest.approx(fd, rel=1e-3, abs=1e-7)


def test_resolution_mismatch():
    with pytest.raises(ValueError):
        _handle("small-resnet")(torch.rand(1, 3, 32, 32))


def test_unknown_arch():
    with pytest.raises(ValueError):
        ClassifierHandle("vit", 10, [0] * 3, [1] * 3, (16, 16))


def test_training_is_reproducible_and_saved(tmp_path, digits_train, digits_test):
    train, test = digits_train.subset(range(200)), digits_test.subset(range(100))
    a = train_classifier("small-vgg", train, test, seed=3, epochs=2, out_dir=tmp_path)
    b = train_classifier("small-vgg", train, test, seed=3, epochs=2)
    assert a.manifest.accuracy == b.manifest.accuracy
    loaded = load_classifier(tmp_path, "small-vgg")
    assert loaded.manifest.checksum and loaded.manifest.epochs == 2
    x = test.images[:4]
    assert torch.equal(logits(a, x), logits(loaded, x))
    weights = tmp_path / "small-vgg.pt"
    weights.write_bytes(weights.read_bytes() + b"x")
    with pytest.raises(ValueError, match="checksum"):
        load_classifier(tmp_path, "small-vgg")


def test_below_floor_is_flagged_but_saved(tmp_path, digits_train, digits_test):
    f = train_classifier("small-resnet", digits_train.subset(range(32)),
                         digits_test.subset(range(50)), epochs=1, out_dir=tmp_path)
    assert f.manifest.below_floor
    assert (tmp_path / "small-resnet.json").is_file()
