"""Optimization-based comparison attacks: PGD with l0 projection, and a random sparse control."""

from dataclasses import dataclass

import torch

from . import losses, quantize


@dataclass
class Pgd0Config:
    k: int = 10              # max perturbed pixels per image
    steps: int = 100
    step_size: float = 0.25  # normalized units, largest per-element move per step
    epsilon: float = 255.0   # 0-255 scale
    targeted: bool = False
    target_class: int | None = None
    kappa: float = 0.0
    random_start: bool = False
    seed: int = 0

    def validate(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        quantize.unit_epsilon(self.epsilon)
        if self.targeted and self.target_class is None:
            raise ValueError("targeted PGD0 needs a target_class")
        return self


def pixel_scores(delta):
    """Per-pixel energy: squared perturbation summed over channels, shape (B, H*W)."""
    return delta.pow(2).sum(dim=1).flatten(1)


def l0_project(delta: torch.Tensor, k) -> torch.Tensor:
    """Keep the ``k`` highest-energy pixels of each image and zero the rest.

    ``k`` may be an int or a per-image tensor. Ties go to the lowest
    row-major pixel index.
    """
    if delta.dim() != 4:
        raise ValueError("delta must be (B, C, H, W)")
    b, _, h, w = delta.shape
    k = torch.as_tensor(k, dtype=torch.long).reshape(-1).expand(b) if not torch.is_tensor(k) \
        else k.long().reshape(-1).expand(b)
    scores = pixel_scores(delta)
    # stable sort keeps the original (row-major) order among equal scores
    order = torch.sort(scores, dim=1, descending=True, stable=True).indices
    rank = torch.empty_like(order)
    rank.scatter_(1, order, torch.arange(h * w).expand(b, -1).contiguous())
    keep = (rank < k[:, None]).view(b, 1, h, w)
    return delta * keep


def _loss(logits, y, cfg):
    if cfg.targeted:
        t = torch.full_like(y, cfg.target_class)
        return losses.adv_loss_targeted(logits, t, cfg.kappa, reduction="none")
    return losses.adv_loss_untargeted(logits, y, cfg.kappa, reduction="none")


def _success(logits, y, cfg):
    pred = logits.argmax(dim=1)
    return pred == cfg.target_class if cfg.targeted else pred != y


def pgd0_attack(x, y, f, cfg: Pgd0Config):
    """Batched PGD restricted to at most ``k`` pixels and an l-inf ball.

    Each iteration descends the hinge loss with a gradient step normalized so
    its largest element equals ``step_size``, then projects onto the l-inf
    ball, the [0, 1] box and the l0 ball in that order. An image is frozen at
    its first successful iterate.

    Returns:
        ``(x_adv, success)`` where ``success`` is a bool tensor per image.
        Images whose gradient turns non-finite are returned unperturbed and
        marked unsuccessful.
    """
    cfg.validate()
    eps = quantize.unit_epsilon(cfg.epsilon)
    x = x.detach()
    y = torch.as_tensor(y).long().reshape(-1)
    delta = torch.zeros_like(x)
    if cfg.random_start:
        g = torch.Generator().manual_seed(cfg.seed)
        delta = (torch.rand(x.shape, generator=g) * 2 - 1) * eps
        delta = l0_project((x + delta).clamp(0, 1) - x, cfg.k)
    best = x.clone()
    done = torch.zeros(len(x), dtype=torch.bool)
    failed = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(cfg.steps):
        active = ~(done | failed)
        if not active.any():
            break
        d = delta[active].clone().requires_grad_(True)
        logits = f(x[active] + d)
        ok = _success(logits.detach(), y[active], cfg)
        idx = active.nonzero().squeeze(1)
        best[idx[ok]] = (x[active] + d.detach())[ok]
        done[idx[ok]] = True
        loss = _loss(logits, y[active], cfg).sum()
        (grad,) = torch.autograd.grad(loss, d)
        bad = ~torch.isfinite(grad).flatten(1).all(dim=1)
        failed[idx[bad]] = True
        grad = torch.nan_to_num(grad)
        scale = grad.abs().flatten(1).max(dim=1).values.clamp_min(1e-12).view(-1, 1, 1, 1)
        with torch.no_grad():
            d = d - cfg.step_size * grad / scale
            d = d.clamp(-eps, eps)
            d = (x[active] + d).clamp(0, 1) - x[active]
            delta[active] = l0_project(d, cfg.k)
    rest = ~(done | failed)
    if rest.any():
        with torch.no_grad():
            final = x[rest] + delta[rest]
            done[rest.nonzero().squeeze(1)] = _success(f(final), y[rest], cfg)
            best[rest] = final
    return best, done & ~failed


def random_sparse_baseline(x, k, epsilon, generator: torch.Generator | None = None):
    """Perturb ``k`` uniformly chosen pixels per image by +-epsilon (sign per channel).

    ``epsilon`` is on the 0-255 scale; ``k`` is an int or a per-image tensor.
    """
    eps = quantize.unit_epsilon(epsilon)
    b, c, h, w = x.shape
    k = torch.as_tensor(k, dtype=torch.long).reshape(-1).expand(b)
    rank = torch.rand(b, h * w, generator=generator).argsort(dim=1).argsort(dim=1)
    chosen = (rank < k[:, None]).view(b, 1, h, w).to(x.dtype)
    signs = torch.randint(0, 2, (b, c, h, w), generator=generator).to(x.dtype) * 2 - 1
    return (x + eps * signs * chosen).clamp(0, 1)
