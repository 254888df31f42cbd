"""
Attack metrics and report files.

Sparsity is the fraction of pixel locations whose value changes in any
channel; fooling rate is the fraction of adversarial images misclassified
(untargeted) or assigned the target label (targeted).
"""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import torch

from .quantize import PIXEL_LEVELS

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHANGE_TOLERANCE = 1.0 / (2 * PIXEL_LEVELS)
# fields that differ between otherwise identical runs
VOLATILE_FIELDS = ("latency", "timestamp")


def changed_pixels(x, x_adv, tol=CHANGE_TOLERANCE):
    """Boolean (B, H, W) map of pixels that differ by more than ``tol`` in any channel."""
    if x.shape != x_adv.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_adv.shape)}")
    return ((x_adv - x).abs() > tol).any(dim=1)


def sparsity_of(x, x_adv, reduction="mean"):
    frac = changed_pixels(x, x_adv).flatten(1).double().mean(dim=1)
    return frac.mean().item() if reduction == "mean" else frac


@torch.no_grad()
def predictions(f, x, batch_size=500):
    return torch.cat([f(x[i:i + batch_size]).argmax(dim=1) for i in range(0, len(x), batch_size)])


def fooled_mask(f, x_adv, labels, target=None):
    if len(x_adv) == 0:
        raise ValueError("empty adversarial set")
    labels = torch.as_tensor(labels).long()
    if labels.shape[0] != x_adv.shape[0]:
        raise ValueError("label count does not match the image count")
    pred = predictions(f, x_adv)
    return pred == target if target is not None else pred != labels


def fooling_rate(f, x_adv, labels, target=None):
    """Untargeted (``target=None``) or targeted fooling rate over all images."""
    return fooled_mask(f, x_adv, labels, target).double().mean().item()


@dataclass
class EvalReport:
    attack_id: str
    source_model: str
    target_model: str
    white_box: bool
    fooling_rate: float | None
    fooling_rate_correct: float | None   # restricted to originally correct images
    clean_accuracy: float | None
    sparsity: float
    latency: float | None
    epsilon: float
    n_samples: int
    seed: int
    targeted: bool = False
    target_class: int | None = None
    error: str | None = None
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        for name in ("fooling_rate", "fooling_rate_correct", "sparsity"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.latency is not None and not self.latency > 0:
            raise ValueError("latency must be positive")
        return self


def _score_model(f, x, x_adv, y, target):
    clean_pred = predictions(f, x)
    fooled = fooled_mask(f, x_adv, y, target)
    # for targeted attacks "originally correct" means not already the target
    correct = clean_pred == y if target is None else clean_pred != target
    restricted = fooled[correct].double().mean().item() if correct.any() else None
    return fooled.double().mean().item(), restricted, (clean_pred == y).double().mean().item()


def transfer_matrix(attack_fn, source, targets, x, y, attack_id, epsilon, seed=0,
                    target=None, latency=None):
    """Run ``attack_fn`` once on ``(x, y)`` and score it on the source and every target.

    ``targets`` maps model ids to classifiers or to zero-argument loaders; a
    loader that raises produces a row with ``error`` set instead of aborting.
    The first row is always the white-box (source) row.
    """
    x_adv = attack_fn(x, y)
    sparsity = sparsity_of(x, x_adv)
    src_id = getattr(source, "model_id", "source")
    rows = []
    models = [(src_id, source)] + [(k, v) for k, v in targets.items() if k != src_id]
    for model_id, model in models:
        common = dict(attack_id=attack_id, source_model=src_id, target_model=model_id,
                      white_box=model_id == src_id, sparsity=sparsity, latency=latency,
                      epsilon=epsilon, n_samples=len(x), seed=seed,
                      targeted=target is not None, target_class=target)
        try:
            if not isinstance(model, torch.nn.Module):
                model = model()
            fr, frc, acc = _score_model(model, x, x_adv, y, target)
            rows.append(EvalReport(fooling_rate=fr, fooling_rate_correct=frc,
                                   clean_accuracy=acc, **common).validate())
        except Exception as err:  # noqa: BLE001 -- per-row failure is part of the contract
            logger.error("scoring on %s failed: %s", model_id, err)
            rows.append(EvalReport(fooling_rate=None, fooling_rate_correct=None,
                                   clean_accuracy=None, error=f"{type(err).__name__}: {err}",
                                   **common))
    return rows, x_adv


def time_attack(attack_fn, x, y=None, batch_size=None, warmup=5):
    """Mean wall-clock seconds per image for ``attack_fn(xb, yb)``.

    ``warmup`` calls on the first batch are run first and excluded.
    """
    n = len(x)
    batch_size = batch_size or n
    batches = [(x[i:i + batch_size], None if y is None else y[i:i + batch_size])
               for i in range(0, n, batch_size)]
    for _ in range(warmup):
        attack_fn(*batches[0])
    start = time.perf_counter()
    for xb, yb in batches:
        attack_fn(xb, yb)
    return (time.perf_counter() - start) / n


def _row_dict(r, include_volatile):
    d = asdict(r)
    if not include_volatile:
        for k in VOLATILE_FIELDS:
            d.pop(k)
    return d


def write_reports(rows, path_stem, include_volatile=False):
    """Write ``<stem>.json`` and ``<stem>.csv``.

    Latency and timestamps vary between identical runs, so by default they go
    to a separate ``<stem>.timing.json`` and the main files stay byte-stable.
    """
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    body = [_row_dict(r, include_volatile) for r in rows]
    stem.with_suffix(".json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "rows": body}, indent=2, sort_keys=True))
    columns = [f.name for f in fields(EvalReport)
               if include_volatile or f.name not in VOLATILE_FIELDS]
    with stem.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for d in body:
            w.writerow({k: ("" if d[k] is None else d[k]) for k in columns})
    if not include_volatile:
        timing = [{"target_model": r.target_model, **{k: getattr(r, k) for k in VOLATILE_FIELDS}}
                  for r in rows]
        stem.with_suffix(".timing.json").write_text(json.dumps(timing, indent=2))
    return stem.with_suffix(".json"), stem.with_suffix(".csv")


def read_reports(path):
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {data.get('schema_version')!r}")
    known = {f.name for f in fields(EvalReport)}
    # byte-stable reports keep latency and timestamp in the timing sidecar
    timing = Path(path).with_suffix(".timing.json")
    extra = json.loads(timing.read_text()) if timing.is_file() else [{}] * len(data["rows"])
    out = []
    for row, t in zip(data["rows"], extra):
        row = {**row, "latency": t.get("latency", row.get("latency"))}
        if "timestamp" in t:
            row["timestamp"] = t["timestamp"]
        out.append(EvalReport(**{k: v for k, v in row.items() if k in known}))
    return out
