"""Adversarial, sparsity and quantization losses and their weighted sum."""

from dataclasses import dataclass

import torch


def _as_batch(logits, labels):
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ValueError(f"expected logits of shape (B, K>=2), got {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, device=logits.device).long().reshape(-1)
    if labels.numel() == 1 and logits.shape[0] > 1:
        labels = labels.expand(logits.shape[0])
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("label count does not match the logits batch")
    if (labels < 0).any() or (labels >= logits.shape[1]).any():
        raise ValueError(f"label index out of range for {logits.shape[1]} classes")
    return logits, labels


def margin(logits, labels):
    """Return ``logit[label] - max_{i != label} logit[i]`` per row."""
    logits, labels = _as_batch(logits, labels)
    own = logits.gather(1, labels[:, None]).squeeze(1)
    others = logits.masked_fill(
        torch.nn.functional.one_hot(labels, logits.shape[1]).bool(), float("-inf"))
    return own - others.max(dim=1).values


def _reduce(values, reduction):
    if reduction == "mean":
        return values.mean()
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}")


def adv_loss_untargeted(logits, labels, kappa=0.0, reduction="mean"):
    """Carlini-Wagner hinge ``max(f_y - max_{i!=y} f_i, -kappa)``."""
    return _reduce(torch.clamp(margin(logits, labels), min=-kappa), reduction)


def adv_loss_targeted(logits, targets, kappa=0.0, reduction="mean"):
    """Targeted hinge ``max(max_{i!=t} f_i - f_t, -kappa)``."""
    return _reduce(torch.clamp(-margin(logits, targets), min=-kappa), reduction)


def _per_image(t):
    # a 1-D tensor is a single flattened image
    return t.reshape(1, -1) if t.dim() <= 1 else t.flatten(1)


def sparse_loss(m, reduction="mean"):
    """L1 norm of the mask per image (raw sum, not divided by pixel count)."""
    if not torch.isfinite(m).all():
        raise ValueError("mask contains non-finite values")
    return _reduce(_per_image(m).abs().sum(dim=1), reduction)


def quantization_loss(soft, m, reduction="mean"):
    """Euclidean distance ``||soft - m||_2`` per image (not squared)."""
    if soft.shape != m.shape:
        raise ValueError(f"shape mismatch: {tuple(soft.shape)} vs {tuple(m.shape)}")
    return _reduce(torch.linalg.vector_norm(_per_image(soft - m), dim=1), reduction)


@dataclass
class LossBreakdown:
    adv: torch.Tensor
    sparse: torch.Tensor
    quanti: torch.Tensor
    total: torch.Tensor
    lambda_s: float
    lambda_q: float
    kappa: float = 0.0

    def row(self):
        """Float view for logging."""
        return {k: float(torch.as_tensor(getattr(self, k)).detach())
                for k in ("adv", "sparse", "quanti", "total")}


def total_loss(adv, sparse, quanti, lambda_s, lambda_q, kappa=0.0):
    """Combine the three terms as ``adv + lambda_s * sparse + lambda_q * quanti``."""
    if lambda_s < 0 or lambda_q < 0:
        raise ValueError("loss weights must be non-negative")
    adv, sparse, quanti = (torch.as_tensor(v, dtype=torch.float64)
                           if not torch.is_tensor(v) else v for v in (adv, sparse, quanti))
    total = adv + lambda_s * sparse + lambda_q * quanti
    return LossBreakdown(adv, sparse, quanti, total, lambda_s, lambda_q, kappa)
