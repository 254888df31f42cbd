"""
Differentiable primitives for decoupled sparse perturbations.

A perturbation is factored as ``delta = r * m`` where ``r`` is a bounded
magnitude field (one value per channel) and ``m`` is a single-channel
location mask broadcast over the channels. The mask comes from a soft map
in [0, 1] passed through one of three binarizers:

* :func:`hard_quantize` -- threshold, no gradient (used at inference),
* :func:`random_quantize` -- each element is thresholded with probability
  ``p`` (gradient blocked there) or left untouched (gradient flows),
* :func:`ste_quantize` -- threshold forward, identity backward.

All images live in [0, 1]. Magnitude bounds are given in the same
normalized units; use :func:`unit_epsilon` to convert from the 0-255 scale.
"""

import torch

PIXEL_LEVELS = 255.0


def unit_epsilon(epsilon_255):
    """Convert an l-inf budget on the 0-255 scale to normalized pixel units."""
    if not epsilon_255 > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon_255}")
    return float(epsilon_255) / PIXEL_LEVELS


def _check_finite(t, name):
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


def _check_tau(tau):
    if not 0.0 < tau < 1.0:
        raise ValueError(f"threshold tau must lie in (0, 1), got {tau}")


def hard_quantize(soft: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Binarize ``soft``: 0 where ``soft <= tau``, 1 where ``soft > tau``.

    The result is detached from the autograd graph.
    """
    _check_tau(tau)
    _check_finite(soft, "soft mask")
    return (soft.detach() > tau).to(soft.dtype)


def sample_gate(shape, p: float, generator: torch.Generator | None = None,
                device=None) -> torch.Tensor:
    """Draw independent Bernoulli(p) indicators; 1 marks a quantized element."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"gate probability p must lie in [0, 1], got {p}")
    u = torch.rand(shape, generator=generator, device=device)
    # u is in [0, 1): p=0 never fires, p=1 always fires
    return (u < p).to(torch.float32)


def random_quantize(soft: torch.Tensor, tau: float = 0.5, p: float = 0.5,
                    generator: torch.Generator | None = None,
                    gate: torch.Tensor | None = None):
    """Randomly binarize ``soft`` element-wise.

    Where the gate is 1 the element is replaced by its hard-thresholded value
    and receives no gradient; where the gate is 0 the soft value passes
    through unchanged with unit derivative.

    Args:
        soft: soft mask, values in [0, 1].
        tau: threshold.
        p: probability of quantizing an element.
        generator: RNG used to draw the gate.
        gate: optional pre-drawn gate (overrides ``p`` and ``generator``).

    Returns:
        ``(mask, gate)`` with ``gate`` in the dtype of ``soft``.
    """
    hard = hard_quantize(soft, tau)
    if gate is None:
        gate = sample_gate(soft.shape, p, generator=generator, device=soft.device)
    gate = gate.to(soft.dtype)
    mask = torch.where(gate.bool(), hard, soft)
    return mask, gate


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, soft, tau):
        return (soft > tau).to(soft.dtype)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output, None


def ste_quantize(soft: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """Hard threshold in the forward pass, identity gradient in the backward pass."""
    _check_tau(tau)
    _check_finite(soft, "soft mask")
    return _StraightThrough.apply(soft, tau)


def project_magnitude(raw: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Squash ``raw`` smoothly into (-epsilon, epsilon) with ``epsilon * tanh``.

    ``epsilon`` is in normalized pixel units.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    _check_finite(raw, "magnitude input")
    # largest value of raw's dtype not above epsilon, so the bound holds exactly
    eps = torch.tensor(epsilon, dtype=raw.dtype, device=raw.device)
    if eps.item() > epsilon:
        eps = torch.nextafter(eps, torch.zeros_like(eps))
    return eps * torch.tanh(raw)


class _BoxClamp(torch.autograd.Function):
    # clamp to [0, 1] forward, identity backward
    @staticmethod
    def forward(ctx, x):
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output


def apply_perturbation(x: torch.Tensor, r: torch.Tensor, m: torch.Tensor,
                       clamp_grad: str = "zero") -> torch.Tensor:
    """Return ``clamp(x + r * m, 0, 1)`` with ``m`` broadcast across channels.

    ``clamp_grad`` selects the backward rule of the box clamp: ``"zero"`` is
    the ordinary clamp derivative, ``"pass"`` lets the gradient through
    saturated pixels (useful when large budgets push most values outside the
    box during training). The forward value is identical in both cases.
    """
    if x.dim() != 4:
        raise ValueError(f"expected a rank-4 image batch, got shape {tuple(x.shape)}")
    if r.shape != x.shape:
        raise ValueError(f"magnitude shape {tuple(r.shape)} does not match images {tuple(x.shape)}")
    if m.dim() != 4 or m.shape[1] != 1 or m.shape[0] != x.shape[0] or m.shape[2:] != x.shape[2:]:
        raise ValueError(f"mask shape {tuple(m.shape)} incompatible with images {tuple(x.shape)}")
    out = x + r * m
    if clamp_grad == "zero":
        out = out.clamp(0.0, 1.0)
    elif clamp_grad == "pass":
        out = _BoxClamp.apply(out)
    else:
        raise ValueError(f"unknown clamp_grad {clamp_grad!r}")
    return out
