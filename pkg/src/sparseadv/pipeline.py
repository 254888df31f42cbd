"""
Orchestration shared by the command line and the end-to-end tests: building
the classifier zoo, training generators, attacking an evaluation sample and
writing reports.
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import torch

from . import evaluation
from .baselines import pgd0_attack, random_sparse_baseline
from .config import RunConfig, freeze_config
from .data import load_dataset, save_png
from .generator import build_generator, load_checkpoint
from .models import load_classifier, predict, train_classifier
from .trainer import TrainConfig, train_adhoc, train_generator

logger = logging.getLogger(__name__)

VARIANTS = ("proposed", "no_decouple", "p_zero", "ste", "no_sparse_loss", "no_quanti_loss")


def configure_threads(workers):
    torch.set_num_threads(max(1, int(workers)))


def load_splits(cfg: RunConfig):
    size = cfg.paths.image_size
    return load_dataset(cfg.paths.dataset, "train", size), load_dataset(cfg.paths.dataset, "test", size)


def eval_sample(cfg: RunConfig, test):
    n = min(cfg.eval.n_samples, len(test))
    return test.subset(range(n))


def classifier_dir(cfg: RunConfig):
    return cfg.checkpoint_dir() / "classifiers"


def generator_dir(cfg: RunConfig):
    return cfg.checkpoint_dir() / "generator"


def train_zoo(cfg: RunConfig, train, test):
    c = cfg.classifier
    out = {}
    for arch in c.archs:
        f = train_classifier(arch, train, test, seed=c.seed, epochs=c.epochs,
                             batch_size=c.batch_size, lr=c.lr, out_dir=classifier_dir(cfg))
        logger.info("%s clean accuracy %.4f", arch, f.manifest.accuracy)
        out[arch] = f
    return out


def load_zoo(cfg: RunConfig, archs=None):
    """Zero-argument loaders per architecture, so a broken checkpoint only fails its own row."""
    d = classifier_dir(cfg)
    return {a: (lambda a=a: load_classifier(d, a)) for a in (archs or cfg.classifier.archs)}


def ensure_zoo(cfg: RunConfig, train=None, test=None):
    """Load every configured classifier, training the missing ones."""
    d = classifier_dir(cfg)
    missing = [a for a in cfg.classifier.archs if not (d / f"{a}.json").is_file()]
    if missing:
        if train is None:
            train, test = load_splits(cfg)
        sub = replace(cfg, classifier=replace(cfg.classifier, archs=missing))
        train_zoo(sub, train, test)
    return {a: load_classifier(d, a) for a in cfg.classifier.archs}


def variant_config(base: TrainConfig, variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    if variant == "proposed":
        return base
    return replace(base, **{variant: True})


def train_variant(cfg: RunConfig, f, train, variant="proposed", seed=None, out_dir=None):
    tcfg = variant_config(cfg.train_config, variant)
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    gcfg = replace(cfg.generator_config, decouple=not tcfg.no_decouple)
    G = build_generator(gcfg, seed=tcfg.seed)
    return train_generator(G, f, train, tcfg, out_dir=out_dir)


def generator_attack(G, tau):
    G.eval()

    def attack(x, y=None):
        return G.attack(x, tau=tau)
    return attack


def pgd0_attack_fn(f, pgd):
    def attack(x, y):
        return pgd0_attack(x, y, f, pgd)[0]
    return attack


def random_attack_fn(k, epsilon, seed):
    def attack(x, y=None):
        return random_sparse_baseline(x, k, epsilon, torch.Generator().manual_seed(seed))
    return attack


def matched_random(x, x_adv, epsilon, seed):
    """Random control with the same per-image changed-pixel count as ``x_adv``."""
    k = evaluation.changed_pixels(x, x_adv).flatten(1).sum(dim=1)
    return random_sparse_baseline(x, k, epsilon, torch.Generator().manual_seed(seed))


def build_attack(cfg: RunConfig, source):
    """The configured attack as ``(attack_id, fn(x, y) -> x_adv)``."""
    kind = cfg.eval.attack
    a = cfg.attack
    if kind == "generator":
        G, _, _ = load_checkpoint(generator_dir(cfg))
        return "generator", generator_attack(G, a.tau)
    if kind == "pgd0":
        pgd = replace(cfg.pgd0, epsilon=a.epsilon, targeted=a.targeted,
                      target_class=a.target_class, kappa=a.kappa, seed=cfg.seed)
        return f"pgd0-k{pgd.k}", pgd0_attack_fn(source, pgd)
    return f"random-k{cfg.pgd0.k}", random_attack_fn(cfg.pgd0.k, a.epsilon, cfg.seed)


def _target(cfg):
    return cfg.attack.target_class if cfg.attack.targeted else None


# -- commands ---------------------------------------------------------------


def cmd_train_classifier(cfg: RunConfig):
    train, test = load_splits(cfg)
    zoo = train_zoo(cfg, train, test)
    freeze_config(cfg, classifier_dir(cfg))
    return {a: f.manifest.accuracy for a, f in zoo.items()}


def cmd_train_generator(cfg: RunConfig):
    train, test = load_splits(cfg)
    zoo = ensure_zoo(cfg, train, test)
    out = generator_dir(cfg)
    res = train_generator(build_generator(cfg.generator_config, seed=cfg.seed),
                          zoo[cfg.classifier.source], train, cfg.train_config, out_dir=out)
    freeze_config(cfg, out)
    return {"steps": res.steps, "lambda_s_final": res.lambda_s, "checkpoint": str(out)}


def cmd_attack(cfg: RunConfig):
    """Attack the evaluation sample; write lossless PNGs and one JSON record per image."""
    _, test = load_splits(cfg)
    sample = eval_sample(cfg, test)
    models = ensure_zoo(cfg)
    source = models[cfg.classifier.source]
    attack_id, fn = build_attack(cfg, source)
    x, y = sample.images, sample.labels
    x_adv = fn(x, y)
    per_image = evaluation.sparsity_of(x, x_adv, reduction="none")
    preds = {m: predict(f, x_adv).tolist() for m, f in models.items()}
    out = cfg.output_dir() / "attack"
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(len(x)):
        name = f"{i:05d}.png"
        save_png(x_adv[i], img_dir / name)
        records.append({
            "index": i,
            "file": f"images/{name}",
            "original": sample.paths[i] if sample.paths else f"{cfg.paths.dataset}/test/{i}",
            "label": int(y[i]),
            "predictions": {m: p[i] for m, p in preds.items()},
            "sparsity": float(per_image[i]),
        })
    (out / "records.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    summary = {"attack_id": attack_id, "n_samples": len(x),
               "sparsity": float(per_image.mean()), "epsilon": cfg.attack.epsilon,
               "fooling_rate": {m: evaluation.fooling_rate(f, x_adv, y, _target(cfg))
                                for m, f in models.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    freeze_config(cfg, out)
    return summary


def cmd_eval(cfg: RunConfig):
    """Transfer table: one white-box row for the source plus one row per target."""
    _, test = load_splits(cfg)
    sample = eval_sample(cfg, test)
    ensure_zoo(cfg)
    source = load_classifier(classifier_dir(cfg), cfg.classifier.source)
    attack_id, fn = build_attack(cfg, source)
    x, y = sample.images, sample.labels
    latency = evaluation.time_attack(fn, x, y, batch_size=cfg.eval.batch_size,
                                     warmup=cfg.eval.warmup)
    targets = load_zoo(cfg, [t for t in cfg.eval.targets if t != cfg.classifier.source])
    rows, _ = evaluation.transfer_matrix(fn, source, targets, x, y, attack_id,
                                         cfg.attack.epsilon, seed=cfg.seed,
                                         target=_target(cfg), latency=latency)
    out = cfg.output_dir() / "eval"
    evaluation.write_reports(rows, out / "report")
    freeze_config(cfg, out)
    return rows


@dataclass
class AblationRow:
    variant: str
    seed: int
    sparsity: float
    white_box: float
    transfer_mean: float
    transfer: dict
    lambda_s_final: float
    steps: int


def evaluate_generator(G, tau, source, targets, x, y, epsilon, seed, target=None):
    rows, x_adv = evaluation.transfer_matrix(generator_attack(G, tau), source, targets, x, y,
                                             "generator", epsilon, seed=seed, target=target)
    return rows, x_adv


def summarize(variant, seed, rows, lambda_s, steps):
    white = next(r for r in rows if r.white_box)
    black = {r.target_model: r.fooling_rate for r in rows if not r.white_box}
    ok = [v for v in black.values() if v is not None]
    return AblationRow(variant, seed, white.sparsity, white.fooling_rate,
                       sum(ok) / len(ok) if ok else float("nan"), black, lambda_s, steps)


def write_ablation(rows, path_stem):
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".json").write_text(
        json.dumps([asdict(r) for r in rows], indent=2, sort_keys=True))
    targets = sorted({t for r in rows for t in r.transfer})
    cols = ["variant", "seed", "sparsity", "white_box", "transfer_mean", "lambda_s_final", "steps"]
    with stem.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + [f"transfer:{t}" for t in targets])
        for r in rows:
            d = asdict(r)
            w.writerow([d[c] for c in cols] + [r.transfer.get(t, "") for t in targets])
    return stem.with_suffix(".json")


def cmd_ablate(cfg: RunConfig):
    """Train and evaluate every configured variant for every configured seed."""
    train, test = load_splits(cfg)
    zoo = ensure_zoo(cfg, train, test)
    source = zoo[cfg.classifier.source]
    targets = {t: zoo[t] for t in cfg.eval.targets if t != cfg.classifier.source}
    sample = eval_sample(cfg, test)
    out = cfg.output_dir() / "ablate"
    summary = []
    for seed in cfg.ablate.seeds:
        for variant in cfg.ablate.variants:
            res = train_variant(cfg, source, train, variant, seed=seed)
            rows, _ = evaluate_generator(res.generator, cfg.attack.tau, source, targets,
                                         sample.images, sample.labels, cfg.attack.epsilon,
                                         seed, _target(cfg))
            evaluation.write_reports(rows, out / f"{variant}_seed{seed}")
            summary.append(summarize(variant, seed, rows, res.lambda_s, res.steps))
            logger.info("%s seed %d: %s", variant, seed, summary[-1])
        if cfg.ablate.include_adhoc:
            summary.append(run_adhoc(cfg, source, targets, sample, seed))
    write_ablation(summary, out / "ablation")
    freeze_config(cfg, out)
    return summary


def run_adhoc(cfg: RunConfig, source, targets, sample, seed):
    """Fit one generator per image and pool the resulting adversarial images."""
    n = min(cfg.ablate.adhoc_samples, len(sample))
    x, y = sample.images[:n], sample.labels[:n]
    tcfg = replace(cfg.train_config, seed=seed)
    adv = torch.cat([train_adhoc(x[i], y[i], source, tcfg, cfg.generator_config,
                                 steps=cfg.ablate.adhoc_steps,
                                 lr=cfg.ablate.adhoc_lr).x_adv for i in range(n)])
    rows, _ = evaluation.transfer_matrix(lambda *_: adv, source, targets, x, y, "adhoc",
                                         cfg.attack.epsilon, seed=seed, target=_target(cfg))
    return summarize("adhoc", seed, rows, tcfg.lambda_s, cfg.ablate.adhoc_steps)


COMMAND_HANDLERS = {
    "train-classifier": cmd_train_classifier,
    "train-generator": cmd_train_generator,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def run_command(cfg: RunConfig):
    configure_threads(cfg.workers)
    return COMMAND_HANDLERS[cfg.command](cfg)
