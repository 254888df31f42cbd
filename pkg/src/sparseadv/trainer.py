"""
Generator training against a frozen source classifier.

Every source of randomness in a step (minibatch order, quantization gate) is
derived from ``(seed, epoch)`` or ``(seed, step)``, so a run resumed from a
checkpoint retraces the uninterrupted trajectory exactly on CPU.
"""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from . import losses, quantize
from .data import iterate_minibatches
from .generator import GeneratorConfig, build_generator, load_checkpoint, save_checkpoint
from .models import parameter_digest

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "adv", "sparse", "quanti", "total")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, breakdown=None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class AttackConfig:
    epsilon: float = 255.0  # 0-255 scale
    tau: float = 0.5
    p: float = 0.5
    kappa: float = 0.0
    lambda_s: float = 1e-3
    lambda_q: float = 0.1
    targeted: bool = False
    target_class: int | None = None

    @property
    def epsilon_unit(self):
        return quantize.unit_epsilon(self.epsilon)

    def validate(self):
        quantize.unit_epsilon(self.epsilon)
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.lambda_s < 0 or self.lambda_q < 0:
            raise ValueError("loss weights must be non-negative")
        if self.targeted and self.target_class is None:
            raise ValueError("targeted attacks need a target_class")
        return self


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    no_decouple: bool = False
    p_zero: bool = False
    ste: bool = False
    no_sparse_loss: bool = False
    no_quanti_loss: bool = False
    checkpoint_every: int = 0      # epochs; 0 keeps only the final checkpoint
    max_steps: int | None = None
    # when set, lambda_s is adapted multiplicatively so the inference-mode
    # mask density of each batch tracks this fraction
    target_sparsity: float | None = None
    sparsity_rate: float = 0.05
    clamp_grad: str = "pass"

    def validate(self):
        self.attack.validate()
        if self.p_zero and self.ste:
            raise ValueError("p_zero and ste select different quantizers; choose one")
        if self.no_decouple and (self.p_zero or self.ste or self.no_quanti_loss):
            raise ValueError("no_decouple has no mask branch; quantizer/mask flags do not apply")
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.target_sparsity is not None and not 0 < self.target_sparsity < 1:
            raise ValueError("target_sparsity must lie in (0, 1)")
        return self

    @property
    def quantizer(self):
        return "ste" if self.ste else "random"

    @property
    def gate_p(self):
        return 0.0 if self.p_zero else self.attack.p

    @property
    def lambda_s(self):
        return 0.0 if self.no_sparse_loss else self.attack.lambda_s

    @property
    def lambda_q(self):
        return 0.0 if (self.no_quanti_loss or self.no_decouple) else self.attack.lambda_q

    @property
    def variant(self):
        for flag in ("no_decouple", "p_zero", "ste", "no_sparse_loss", "no_quanti_loss"):
            if getattr(self, flag):
                return flag
        return "proposed"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["attack"] = AttackConfig(**d.get("attack", {}))
        return cls(**d)


def step_generator(seed, step):
    return torch.Generator().manual_seed((seed * 1_000_003 + step) % (2 ** 63))


def adversarial_loss(logits, y, attack: AttackConfig, reduction="mean"):
    if attack.targeted:
        t = torch.full_like(y, attack.target_class)
        return losses.adv_loss_targeted(logits, t, attack.kappa, reduction)
    return losses.adv_loss_untargeted(logits, y, attack.kappa, reduction)


def compute_loss(G, f, x, y, cfg: TrainConfig, step, lambda_s=None):
    """One training-mode forward pass. Returns ``(breakdown, triple, x_adv)``."""
    a = cfg.attack
    lambda_s = cfg.lambda_s if lambda_s is None else lambda_s
    t = G(x, mode="train", p=cfg.gate_p, tau=a.tau, generator=step_generator(cfg.seed, step),
          quantizer=cfg.quantizer)
    x_adv = quantize.apply_perturbation(x, t.r, t.mask, clamp_grad=cfg.clamp_grad)
    adv = adversarial_loss(f(x_adv), y, a)
    if cfg.no_decouple:
        sparse = losses.sparse_loss(t.delta)
        quanti = torch.zeros((), dtype=adv.dtype)
    else:
        sparse = losses.sparse_loss(t.mask)
        quanti = losses.quantization_loss(t.soft, t.mask)
    parts = losses.total_loss(adv, sparse, quanti, lambda_s, cfg.lambda_q, a.kappa)
    return parts, t, x_adv


def _batch_density(t, cfg, tau):
    if cfg.no_decouple:
        return 1.0
    return (t.soft.detach() > tau).float().mean().item()


def adapt_lambda(lambda_s, density, cfg):
    """Multiplicative update of lambda_s toward ``cfg.target_sparsity``."""
    if cfg.target_sparsity is None or lambda_s <= 0:
        return lambda_s
    err = (density - cfg.target_sparsity) / cfg.target_sparsity
    err = max(min(err, 4.0), -1.0)
    return float(min(max(lambda_s * math.exp(cfg.sparsity_rate * err), 1e-8), 10.0))


@dataclass
class TrainResult:
    generator: torch.nn.Module
    log: list
    steps: int
    lambda_s: float
    out_dir: Path | None = None


def write_log(rows, path, columns):
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def log_columns(cfg):
    cols = [c for c in LOG_COLUMNS if not (cfg.no_decouple and c == "quanti")]
    return cols + ["lambda_s", "density"]


def _manifest(cfg, steps, lambda_s, source_id, dataset_id):
    return {"train": asdict(cfg), "steps": steps, "lambda_s_final": lambda_s,
            "source_model": source_id, "dataset_id": dataset_id, "seed": cfg.seed,
            "attack": asdict(cfg.attack), "variant": cfg.variant}


def train_generator(G, f, dataset, cfg: TrainConfig, out_dir=None, resume_from=None,
                    stop_after=None):
    """Optimize ``G`` on ``dataset`` against the frozen classifier ``f``.

    Args:
        G: generator (its config decides whether the mask branch exists).
        f: source classifier; never updated.
        dataset: :class:`~sparseadv.data.DatasetHandle` of training images.
        cfg: training configuration.
        out_dir: where checkpoints and ``train_log.csv`` go (optional).
        resume_from: checkpoint directory to continue from.
        stop_after: stop once this many total steps have run (for tests).

    Returns:
        :class:`TrainResult`.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if cfg.no_decouple != (G.mask_decoder is None):
        raise ValueError("generator branch layout does not match cfg.no_decouple")
    f.freeze()
    source_digest = parameter_digest(f)
    opt = torch.optim.Adam(G.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    step, lambda_s, log = 0, cfg.lambda_s, []
    if resume_from is not None:
        _, manifest, state = load_checkpoint(resume_from, {"train": asdict(cfg)})
        G.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        step, lambda_s = manifest["steps"], manifest["lambda_s_final"]
        logger.info("resumed from %s at step %d", resume_from, step)
    source_id = getattr(f, "model_id", type(f).__name__)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    limit = total_steps if stop_after is None else min(total_steps, stop_after)

    G.train()
    first_epoch = step // steps_per_epoch
    for epoch in range(first_epoch, cfg.epochs):
        batches = iterate_minibatches(len(dataset), cfg.batch_size, cfg.seed, epoch)
        for i, idx in enumerate(batches):
            if epoch * steps_per_epoch + i < step:
                continue
            if step >= limit:
                break
            x, y = dataset.images[idx], dataset.labels[idx]
            parts, t, _ = compute_loss(G, f, x, y, cfg, step, lambda_s)
            if not torch.isfinite(parts.total):
                raise TrainingDiverged(step, parts.row())
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            density = _batch_density(t, cfg, cfg.attack.tau)
            log.append({"step": step, **parts.row(), "lambda_s": lambda_s, "density": density})
            lambda_s = adapt_lambda(lambda_s, density, cfg)
            step += 1
        if step >= limit:
            break
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(G, Path(out_dir) / f"epoch_{epoch + 1:03d}",
                            _manifest(cfg, step, lambda_s, source_id, dataset.dataset_id), opt)
    G.eval()
    if parameter_digest(f) != source_digest:
        raise RuntimeError("source classifier parameters changed during training")
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(G, out_dir, _manifest(cfg, step, lambda_s, source_id, dataset.dataset_id), opt)
        write_log(log, out_dir / "train_log.csv", ["step", *log_columns(cfg)[1:]])
    return TrainResult(G, log, step, lambda_s, out_dir)


def train_no_decouple(G, f, dataset, cfg: TrainConfig, **kwargs):
    """Single-branch ablation: sparse loss on the dense perturbation itself."""
    if G.mask_decoder is not None:
        raise ValueError("train_no_decouple needs a generator built with decouple=False")
    return train_generator(G, f, dataset, replace(cfg, no_decouple=True), **kwargs)


@dataclass
class AdhocResult:
    x_adv: torch.Tensor
    mask: torch.Tensor
    fooled: bool
    converged: bool
    steps: int


def _infer(G, f, x, cfg):
    with torch.no_grad():
        t = G(x, mode="infer", tau=cfg.attack.tau)
        x_adv = quantize.apply_perturbation(x, t.r, t.mask)
        pred = f(x_adv).argmax(dim=1)
    return x_adv, t.mask, pred


def train_adhoc(x, y, f, cfg: TrainConfig, gen_cfg: GeneratorConfig, steps=200, lr=None,
                check_every=10):
    """Fit a fresh generator to a single image and return its inference output.

    Every ``check_every`` steps the inference-mode image is scored; the run
    stops at the first check where it fools ``f`` (converged). Exhausting
    the step budget is reported through ``converged=False``, not raised.
    """
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError("ad-hoc mode takes exactly one image")
    cfg.validate()
    y = torch.as_tensor(y).reshape(1).long()
    f.freeze()

    def fooled(pred):
        if cfg.attack.targeted:
            return bool(pred.item() == cfg.attack.target_class)
        return bool(pred.item() != y.item())

    G = build_generator(replace(gen_cfg, decouple=not cfg.no_decouple), seed=cfg.seed)
    opt = torch.optim.Adam(G.parameters(), lr=lr or cfg.lr, betas=(cfg.beta1, cfg.beta2))
    lambda_s = cfg.lambda_s
    step = 0
    while step < steps:
        G.train()
        parts, t, _ = compute_loss(G, f, x, y, cfg, step, lambda_s)
        if not torch.isfinite(parts.total):
            raise TrainingDiverged(step, parts.row())
        opt.zero_grad()
        parts.total.backward()
        opt.step()
        lambda_s = adapt_lambda(lambda_s, _batch_density(t, cfg, cfg.attack.tau), cfg)
        step += 1
        if check_every and step % check_every == 0 and fooled(_infer(G, f, x, cfg)[2]):
            break
    G.eval()
    x_adv, mask, pred = _infer(G, f, x, cfg)
    ok = fooled(pred)
    return AdhocResult(x_adv, mask, ok, ok, step)
