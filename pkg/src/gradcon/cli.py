"""Command-line front end: train, eval, sweep-beta, corrupt-eval.

Configuration is a flat ``key = value`` text file; every key can also be
overridden on the command line with ``--set key=value``. The resolved config
is written into the run directory so any run can be reproduced exactly.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import data as data_mod
from . import metrics as metrics_mod
from . import nn
from . import training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DEFAULTS = {
    "dataset": "synthetic-digits",   # mnist | fmnist | cifar10 | synthetic-digits | synthetic-shapes
    "data_dir": "",                  # directory holding IDX / CIFAR binary files
    "inlier_class": 0,
    "variant": "cae",                # cae | vae
    "alpha": 0.03,
    "beta_multiple": 4.0,
    "lr": 0.001,
    "batch_size": 64,
    "epochs": 10,
    "seed": 0,
    "precision": "float64",          # float64 | float32
    "max_train": 5000,               # cap on inlier training images (0 = no cap)
    "synthetic_train_pool": 6000,    # generated pool sizes for synthetic datasets
    "synthetic_test_pool": 2000,
    "latent_weight": 0.0,
    "constrain_biases": False,
    "memory_source": "total",
}


class ConfigError(Exception):
    pass


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"config field {key!r}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw.strip())
    except ValueError:
        raise ConfigError(
            f"config field {key!r}: expected {type(default).__name__}, got {raw!r}")


def load_config(path=None, overrides=()):
    cfg = dict(DEFAULTS)
    if path:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config field {key!r}")
            cfg[key] = _coerce(key, raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"--set: unknown config field {key!r}")
        cfg[key] = _coerce(key, raw)
    _validate(cfg)
    return cfg


def _validate(cfg):
    if cfg["variant"] not in (nn.CAE, nn.VAE):
        raise ConfigError(f"config field 'variant': unknown value {cfg['variant']!r}")
    if cfg["precision"] not in ("float32", "float64"):
        raise ConfigError(f"config field 'precision': {cfg['precision']!r}")
    if cfg["dataset"] not in ("mnist", "fmnist", "cifar10",
                              "synthetic-digits", "synthetic-shapes"):
        raise ConfigError(f"config field 'dataset': {cfg['dataset']!r}")
    if cfg["alpha"] < 0:
        raise ConfigError("config field 'alpha': must be >= 0")


def write_resolved(cfg, out_dir: Path):
    lines = [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# dataset resolution
# ---------------------------------------------------------------------------

_IDX_FILES = {
    "mnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
              "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    "fmnist": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_datasets(cfg):
    """Returns (train ImageDataset, test ImageDataset) for the configured source."""
    name = cfg["dataset"]
    seed = cfg["seed"]
    if name == "synthetic-digits":
        train = data_mod.synth_digits(cfg["synthetic_train_pool"], seed=seed + 1000)
        test = data_mod.synth_digits(cfg["synthetic_test_pool"], seed=seed + 2000)
        return train, test
    if name == "synthetic-shapes":
        half_tr = cfg["synthetic_train_pool"] // 2
        half_te = cfg["synthetic_test_pool"] // 2
        tr = [data_mod.synth_shapes(half_tr, "circles", seed=seed + 1000),
              data_mod.synth_shapes(half_tr, "crosses", seed=seed + 1001)]
        te = [data_mod.synth_shapes(half_te, "circles", seed=seed + 2000),
              data_mod.synth_shapes(half_te, "crosses", seed=seed + 2001)]
        join = lambda parts: data_mod.ImageDataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.labels for p in parts]), source="synthetic")
        return join(tr), join(te)
    root = Path(cfg["data_dir"])
    if not cfg["data_dir"] or not root.is_dir():
        raise data_mod.DataError(
            f"dataset {name!r} needs data_dir pointing at the files, got {root!r}")
    if name in _IDX_FILES:
        tr_img, tr_lbl, te_img, te_lbl = (root / f for f in _IDX_FILES[name])
        return (data_mod.load_idx_dataset(tr_img, tr_lbl, name),
                data_mod.load_idx_dataset(te_img, te_lbl, name))
    # cifar10: standard binary batches
    train_bufs = [Path(root / f"data_batch_{i}.bin").read_bytes() for i in range(1, 6)]
    train = data_mod.parse_cifar10_bin(b"".join(train_bufs))
    test = data_mod.parse_cifar10_bin((root / "test_batch.bin").read_bytes())
    return train, test


def _in_channels(dataset):
    return dataset.images.shape[1]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg, out_dir: Path) -> int:
    ad.set_default_dtype(np.float32 if cfg["precision"] == "float32" else np.float64)
    train_set, test_set = resolve_datasets(cfg)
    max_train = cfg["max_train"] or None
    split = data_mod.make_one_class_split(train_set.labels, test_set.labels,
                                          cfg["inlier_class"], seed=cfg["seed"],
                                          max_train=max_train)
    model = nn.build_model(cfg["variant"], _in_channels(train_set), seed=cfg["seed"])
    tconf = training.TrainConfig(
        alpha=cfg["alpha"], lr=cfg["lr"], batch_size=cfg["batch_size"],
        epochs=cfg["epochs"], variant=cfg["variant"], seed=cfg["seed"],
        latent_weight=cfg["latent_weight"], constrain_biases=cfg["constrain_biases"],
        memory_source=cfg["memory_source"])
    log_path = out_dir / "log.jsonl"
    log_path.unlink(missing_ok=True)
    model, memory, _ = training.train(
        model, train_set.images[split.train], tconf,
        val_images=train_set.images[split.val], log_path=log_path)
    ckpt.save_checkpoint(out_dir / "checkpoint.gcon", model, memory)
    write_resolved(cfg, out_dir)
    return EXIT_OK


def _load_scored_split(cfg, checkpoint_path, out_dir: Path):
    """Score the test split, caching per-sample scores to scores_cache.csv."""
    model, memory = ckpt.load_checkpoint(checkpoint_path)
    train_set, test_set = resolve_datasets(cfg)
    split = data_mod.make_one_class_split(train_set.labels, test_set.labels,
                                          cfg["inlier_class"], seed=cfg["seed"],
                                          max_train=cfg["max_train"] or None)
    sconf = training.ScoreConfig(alpha=cfg["alpha"],
                                 beta=cfg["beta_multiple"] * cfg["alpha"])
    cache = out_dir / "scores_cache.csv"
    n_layers = len(memory.averages)
    if cache.exists():
        rows = list(csv.DictReader(cache.open()))
        if rows and int(rows[0].get("n_layers", -1)) == n_layers:
            return _cache_to_scores(rows, n_layers, sconf), model, memory, test_set, split
    scores_in = training.score_dataset(model, memory, test_set.images[split.test_in], sconf)
    scores_out = training.score_dataset(model, memory, test_set.images[split.test_out], sconf)
    with cache.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group", "recon", "latent", "grad", "n_layers"]
                        + [f"layer_{i}" for i in range(n_layers)])
        for group, sc in (("in", scores_in), ("out", scores_out)):
            for i in range(len(sc["recon"])):
                writer.writerow([group, repr(float(sc["recon"][i])),
                                 repr(float(sc["latent"][i])),
                                 repr(float(sc["grad"][i])), n_layers]
                                + [repr(float(v)) for v in sc["layers"][i]])
    return (scores_in, scores_out), model, memory, test_set, split


def _cache_to_scores(rows, n_layers, sconf):
    out = {}
    for group in ("in", "out"):
        sub = [r for r in rows if r["group"] == group]
        recon = np.array([float(r["recon"]) for r in sub])
        latent = np.array([float(r["latent"]) for r in sub])
        grad = np.array([float(r["grad"]) for r in sub])
        layers = np.array([[float(r[f"layer_{i}"]) for i in range(n_layers)] for r in sub])
        out[group] = {"recon": recon, "latent": latent, "grad": grad,
                      "combined": recon + sconf.beta * grad, "layers": layers}
    return out["in"], out["out"]


def cmd_eval(cfg, checkpoint_path, out_dir: Path) -> int:
    ad.set_default_dtype(np.float32 if cfg["precision"] == "float32" else np.float64)
    (scores_in, scores_out), model, memory, _, _ = _load_scored_split(
        cfg, checkpoint_path, out_dir)
    mdir = out_dir / "metrics"
    mdir.mkdir(exist_ok=True)

    kinds = ["recon", "grad", "combined"]
    if model.variant == nn.VAE:
        kinds.insert(1, "latent")
    summary = {}
    with (mdir / "auroc.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "class", "value"])
        for kind in kinds:
            value = metrics_mod.auroc(metrics_mod.ScoreSet(
                scores_in[kind], scores_out[kind], kind))
            writer.writerow([f"auroc_{kind}", cfg["inlier_class"], repr(value)])
            summary[f"auroc_{kind}"] = value
        f1 = metrics_mod.f1_max(metrics_mod.ScoreSet(
            scores_in["combined"], scores_out["combined"], "combined"))
        writer.writerow(["f1_max_combined", cfg["inlier_class"], repr(f1["f1"])])
        summary["f1_max_combined"] = f1["f1"]
        summary["f1_threshold"] = f1["threshold"]

    # histogram bin counts for external plotting, plus overlap percentages
    for kind in kinds:
        pooled = np.concatenate([scores_in[kind], scores_out[kind]])
        edges = np.linspace(pooled.min(), pooled.max(), 101) \
            if pooled.min() < pooled.max() else np.linspace(0, 1, 101)
        cin, _ = np.histogram(scores_in[kind], bins=edges)
        cout, _ = np.histogram(scores_out[kind], bins=edges)
        with (mdir / f"hist_{kind}.csv").open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_left", "bin_right", "inlier_count", "outlier_count"])
            for i in range(100):
                writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                                 int(cin[i]), int(cout[i])])
        summary[f"hist_overlap_{kind}"] = metrics_mod.histogram_overlap(
            scores_in[kind], scores_out[kind])

    report = metrics_mod.decomposition_report(scores_in["layers"], scores_out["layers"])
    with (mdir / "decomposition.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["layer", "auroc"])
        for key, value in report.items():
            writer.writerow([key, repr(value)])
    summary["decomposition"] = report

    (mdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_sweep_beta(cfg, checkpoint_path, out_dir: Path, multiples) -> int:
    ad.set_default_dtype(np.float32 if cfg["precision"] == "float32" else np.float64)
    (scores_in, scores_out), _, _, _, _ = _load_scored_split(cfg, checkpoint_path, out_dir)
    rows = metrics_mod.beta_sweep(scores_in["recon"], scores_in["grad"],
                                  scores_out["recon"], scores_out["grad"],
                                  cfg["alpha"], multiples)
    mdir = out_dir / "metrics"
    mdir.mkdir(exist_ok=True)
    with (mdir / "beta_sweep.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["beta", "auroc"])
        for beta, value in rows:
            writer.writerow([repr(beta), repr(value)])
    return EXIT_OK


def cmd_corrupt_eval(cfg, checkpoint_path, out_dir: Path, kinds, levels) -> int:
    """Clean inlier-class test images vs their corrupted versions, per level."""
    ad.set_default_dtype(np.float32 if cfg["precision"] == "float32" else np.float64)
    model, memory = ckpt.load_checkpoint(checkpoint_path)
    train_set, test_set = resolve_datasets(cfg)
    split = data_mod.make_one_class_split(train_set.labels, test_set.labels,
                                          cfg["inlier_class"], seed=cfg["seed"],
                                          max_train=cfg["max_train"] or None)
    clean = test_set.images[split.test_in]
    sconf = training.ScoreConfig(alpha=cfg["alpha"],
                                 beta=cfg["beta_multiple"] * cfg["alpha"])
    clean_scores = training.score_dataset(model, memory, clean, sconf)
    mdir = out_dir / "metrics"
    mdir.mkdir(exist_ok=True)
    with (mdir / "corrupt_auroc.csv").open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["kind", "level", "auroc"])
        for kind in kinds:
            for level in levels:
                spec = data_mod.CorruptionSpec(kind, level)
                corrupted = np.stack([data_mod.corrupt(img, spec) for img in clean])
                sc = training.score_dataset(model, memory, corrupted, sconf)
                value = metrics_mod.auroc(metrics_mod.ScoreSet(
                    clean_scores["combined"], sc["combined"], "combined"))
                writer.writerow([kind, level, repr(value)])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="gradcon",
                                     description="Gradient-constraint anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--out", default="runs/out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True)

    common(sub.add_parser("train", help="train a model and write a checkpoint"))
    common(sub.add_parser("eval", help="compute metrics for a checkpoint"),
           needs_checkpoint=True)
    p = sub.add_parser("sweep-beta", help="AUROC across anomaly-score beta values")
    common(p, needs_checkpoint=True)
    p.add_argument("--multiples", default="0,0.5,1,1.67,2,3,4,6",
                   help="comma-separated multiples of alpha")
    p = sub.add_parser("corrupt-eval", help="AUROC per corruption kind and level")
    common(p, needs_checkpoint=True)
    p.add_argument("--kinds", default=",".join(data_mod.CORRUPTION_KINDS))
    p.add_argument("--levels", default="1,2,3,4,5")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, out_dir)
        if args.command == "sweep-beta":
            multiples = [float(m) for m in args.multiples.split(",")]
            return cmd_sweep_beta(cfg, args.checkpoint, out_dir, multiples)
        multiples = None
        kinds = [k for k in args.kinds.split(",") if k]
        levels = [int(v) for v in args.levels.split(",")]
        return cmd_corrupt_eval(cfg, args.checkpoint, out_dir, kinds, levels)
    except (ConfigError, ckpt.CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
