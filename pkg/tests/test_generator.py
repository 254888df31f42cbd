import json
from dataclasses import replace

import pytest
import torch

from sparseadv.generator import (
    GeneratorConfig,
    ManifestMismatch,
    build_generator,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from sparseadv.quantize import unit_epsilon


def test_default_architecture_shapes():
    G = build_generator(GeneratorConfig(base_width=64), seed=0)
    x = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        t = G(x)
    assert t.r.shape == (2, 3, 32, 32)
    assert t.soft.shape == t.mask.shape == (2, 1, 32, 32)
    assert ((t.soft > 0) & (t.soft < 1)).all()


def test_same_seed_same_weights(tiny_gen_cfg):
    a, b = build_generator(tiny_gen_cfg, seed=3), build_generator(tiny_gen_cfg, seed=3)
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(a(x).r, b(x).r)
    c = build_generator(tiny_gen_cfg, seed=4)
    assert any(not torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_zero_residual_blocks_still_runs(tiny_gen_cfg):
    G = build_generator(replace(tiny_gen_cfg, num_residual_blocks=0))
    with torch.no_grad():
        assert G(torch.rand(1, 3, 16, 16)).r.shape == (1, 3, 16, 16)


def test_infer_mask_is_binary_and_magnitude_bounded(tiny_gen_cfg):
    G = build_generator(replace(tiny_gen_cfg, epsilon=10), seed=1)
    with torch.no_grad():
        t = G(torch.rand(4, 3, 16, 16), mode="infer")
    assert set(t.mask.unique().tolist()) <= {0.0, 1.0}
    assert t.r.abs().max().item() <= unit_epsilon(10)


def test_train_gate_statistics(tiny_gen_cfg):
    G = build_generator(tiny_gen_cfg)
    t = G(torch.rand(16, 3, 16, 16), mode="train", p=0.5,
          generator=torch.Generator().manual_seed(0))
    n = t.gate.numel()
    assert abs(t.gate.mean().item() - 0.5) <= 3 * (0.25 / n) ** 0.5


def test_gradients_reach_both_decoders(tiny_gen_cfg):
    G = build_generator(tiny_gen_cfg)
    t = G(torch.rand(2, 3, 16, 16), mode="train", p=0.5,
          generator=torch.Generator().manual_seed(0))
    (t.delta.sum() + t.soft.sum()).backward()
    for dec in (G.magnitude_decoder, G.mask_decoder):
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in dec.parameters())


def test_ste_mode_mask_is_binary_with_gradient(tiny_gen_cfg):
    G = build_generator(tiny_gen_cfg)
    t = G(torch.rand(2, 3, 16, 16), mode="train", quantizer="ste")
    assert set(t.mask.unique().tolist()) <= {0.0, 1.0}
    assert t.mask.requires_grad


def test_fully_convolutional(tiny_gen_cfg):
    G = build_generator(tiny_gen_cfg)
    with torch.no_grad():
        assert G(torch.rand(1, 3, 32, 48)).mask.shape == (1, 1, 32, 48)


def test_no_decouple_mask_is_ones(tiny_gen_cfg):
    G = build_generator(replace(tiny_gen_cfg, decouple=False))
    assert G.mask_decoder is None
    with torch.no_grad():
        t = G(torch.rand(1, 3, 16, 16))
    assert torch.equal(t.mask, torch.ones(1, 1, 16, 16))
    assert parameter_count(G) < parameter_count(build_generator(tiny_gen_cfg))


@pytest.mark.parametrize("shape", [(1, 1, 16, 16), (1, 3, 15, 16), (3, 16, 16)])
def test_bad_input_shapes(tiny_gen_cfg, shape):
    with pytest.raises(ValueError):
        build_generator(tiny_gen_cfg)(torch.rand(*shape))


@pytest.mark.parametrize("change", [dict(num_down=2, num_up=3), dict(base_width=4),
                                    dict(norm="layer"), dict(epsilon=0)])
def test_config_validation(change):
    with pytest.raises(ValueError):
        GeneratorConfig(**change).validate()


def test_checkpoint_round_trip_and_manifest(tmp_path, tiny_gen_cfg):
    G = build_generator(tiny_gen_cfg, seed=2)
    save_checkpoint(G, tmp_path, {"seed": 2, "source_model": "small-vgg"})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["parameter_count"] == parameter_count(G)
    H, m, _ = load_checkpoint(tmp_path, {"seed": 2, "generator": tiny_gen_cfg})
    x = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(G(x).r, H(x).r)
    with pytest.raises(ManifestMismatch):
        load_checkpoint(tmp_path, {"source_model": "small-resnet"})
    with pytest.raises(ManifestMismatch):
        load_checkpoint(tmp_path, {"generator": replace(tiny_gen_cfg, base_width=16)})
