"""Command-line entry point: ``mpdvae <verb> [-c config] [-s key=value ...]``.

Every verb reads a flat ``key = value`` file (``#`` comments allowed) plus
``--set`` overrides.  Values are parsed against a per-verb schema and unknown
keys are rejected.  Exit codes: 0 success, 1 usage or config error, 2 numeric
failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from .data import (
    Dataset,
    ResultRow,
    load_dataset,
    synth_mixture,
    write_idx,
    write_image_grid,
    write_metrics_csv,
    write_results_csv,
)
from .evaluation import (
    cluster_accuracy,
    diagnostics,
    extract_representations,
    iw_nll_with_se,
    kmeans,
    knn_classify,
    logistic_probe,
    stratified_subset,
)
from .models import ModelConfig, VaeModel
from .theorem import run_random_trials
from .training import TrainConfig, TrainingDiverged, train

log = logging.getLogger("mpdvae")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class VerificationFailed(Exception):
    pass


# ---------------------------------------------------------------------------
# typed flat config
# ---------------------------------------------------------------------------


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _budgets(text: str) -> tuple[int | None, ...]:
    return tuple(None if v == "all" else int(v) for v in text.replace(" ", "").split(",") if v)


def _optional_path(text: str) -> Path | None:
    return Path(text) if text.strip() else None


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    required: bool = False


MODEL_KEYS = {
    "latent_dim": Key(int, 16),
    "encoder_hidden": Key(_ints, (256, 256)),
    "decoder_hidden": Key(_ints, (256,)),
    "decoder_kind": Key(str, "autoregressive"),
    "decoder_direct": Key(_bool, True),
    "prior_kind": Key(str, "standard"),
    "n_flows": Key(int, 2),
    "flow_hidden": Key(_ints, (64,)),
}

SCHEMAS: dict[str, dict[str, Key]] = {
    "train": {
        "train_images": Key(Path, None, True),
        "train_labels": Key(_optional_path, None),
        "output_dir": Key(Path, Path("runs")),
        "name": Key(str, "model"),
        "eta": Key(float, 0.0),
        "gamma": Key(float, 0.0),
        "learning_rate": Key(float, 0.001),
        "batch_size": Key(int, 100),
        "epochs": Key(int, 10),
        "seed": Key(int, 0),
        "free_bits_lambda": Key(float, 0.0),
        "polyak_alpha": Key(float, 0.999),
        "clip_norm": Key(float, 5.0),
        "dynamic_binarization": Key(_bool, True),
        "importance_samples": Key(int, 16),
        "log_eval_size": Key(int, 100),
        "checkpoint_every": Key(int, 0),
        **MODEL_KEYS,
    },
    "eval-nll": {
        "checkpoint": Key(Path, None, True),
        "images": Key(Path, None, True),
        "importance_samples": Key(int, 512),
        "limit": Key(int, 0),
        "seed": Key(int, 0),
        "binarize": Key(_bool, True),
    },
    "diagnose": {
        "checkpoint": Key(Path, None, True),
        "images": Key(Path, None, True),
        "importance_samples": Key(int, 64),
        "limit": Key(int, 0),
        "seed": Key(int, 0),
        "binarize": Key(_bool, True),
        "output": Key(_optional_path, None),
    },
    "cluster": {
        "checkpoint": Key(Path, None, True),
        "train_images": Key(Path, None, True),
        "train_labels": Key(Path, None, True),
        "eval_images": Key(_optional_path, None),
        "eval_labels": Key(_optional_path, None),
        "n_clusters": Key(_ints, (10,)),
        "seeds": Key(_ints, (0,)),
        "max_iter": Key(int, 300),
        "name": Key(str, "model"),
        "output": Key(_optional_path, None),
    },
    "classify": {
        "checkpoint": Key(Path, None, True),
        "train_images": Key(Path, None, True),
        "train_labels": Key(Path, None, True),
        "test_images": Key(Path, None, True),
        "test_labels": Key(Path, None, True),
        "method": Key(str, "both"),
        "k": Key(int, 10),
        "budgets": Key(_budgets, (100, 1000, None)),
        "seeds": Key(_ints, (0,)),
        "l2": Key(float, 1e-4),
        "iters": Key(int, 500),
        "name": Key(str, "model"),
        "output": Key(_optional_path, None),
    },
    "reconstruct": {
        "checkpoint": Key(Path, None, True),
        "checkpoint_b": Key(_optional_path, None),
        "images": Key(Path, None, True),
        "count": Key(int, 10),
        "seed": Key(int, 0),
        "output": Key(Path, Path("reconstructions.pgm")),
    },
    "sample": {
        "checkpoint": Key(Path, None, True),
        "count": Key(int, 16),
        "columns": Key(int, 8),
        "seed": Key(int, 0),
        "output": Key(Path, Path("samples.pgm")),
    },
    "verify-theorem": {
        "trials": Key(int, 50),
        "max_atoms": Key(int, 8),
        "seed": Key(int, 0),
        "tol": Key(float, 1e-10),
    },
    "synth-data": {
        "n_clusters": Key(int, 10),
        "side": Key(int, 16),
        "n_per_cluster": Key(int, 500),
        "flip_prob": Key(float, 0.05),
        "seed": Key(int, 0),
        "test_fraction": Key(float, 0.0),
        "output_dir": Key(Path, Path("data")),
        "prefix": Key(str, "synth"),
    },
}


def parse_config(verb: str, text: str, overrides: list[str]) -> dict[str, Any]:
    """Parse ``text`` (flat key = value lines) and ``key=value`` overrides against the verb schema."""
    schema = SCHEMAS[verb]
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = dict(parser["run"])
    if len(parser.sections()) > 1:
        raise ConfigError("config must be flat key = value lines without sections")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        raw[key.strip()] = value.strip()

    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) for {verb}: {', '.join(unknown)}")
    values = {}
    for name, key in schema.items():
        if name in raw:
            try:
                values[name] = key.parse(raw[name])
            except ValueError as exc:
                raise ConfigError(f"bad value for {name}: {exc}") from None
        elif key.required:
            raise ConfigError(f"missing required key {name!r} for {verb}")
        else:
            values[name] = key.default
    return values


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load(images: Path, labels: Path | None = None, limit: int = 0) -> Dataset:
    for p in (images, labels):
        if p is not None and not p.exists():
            raise ConfigError(f"no such file: {p}")
    ds = load_dataset(images, labels)
    if limit:
        ds = Dataset(ds.images[:limit], None if ds.labels is None else ds.labels[:limit], ds.split)
    return ds


def _checkpoint(path: Path) -> VaeModel:
    if not path.exists():
        raise ConfigError(f"no such checkpoint: {path}")
    return VaeModel.load(path)


def _binarized(ds: Dataset, cfg: dict, seed_offset: int = 7) -> np.ndarray:
    if not cfg.get("binarize", True):
        return ds.images
    return (np.random.default_rng([cfg["seed"], seed_offset]).random(ds.images.shape) < ds.images).astype(float)


def _reconstruct(model: VaeModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    z = model.encode(x).mean.data
    if model.config.decoder_kind == "factorized":
        return 1.0 / (1.0 + np.exp(-model.decode(z).data))
    return model.sample_autoregressive(z, rng)


def _decode_samples(model: VaeModel, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if model.config.decoder_kind == "factorized":
        return 1.0 / (1.0 + np.exp(-model.decode(z).data))
    return model.sample_autoregressive(z, rng)


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def cmd_train(cfg: dict) -> int:
    ds = _load(cfg["train_images"], cfg["train_labels"])
    mcfg = ModelConfig(ds.dim, **{k: cfg[k] for k in MODEL_KEYS})
    tcfg = TrainConfig(eta=cfg["eta"], gamma=cfg["gamma"], learning_rate=cfg["learning_rate"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
                       free_bits_lambda=cfg["free_bits_lambda"], polyak_alpha=cfg["polyak_alpha"],
                       clip_norm=cfg["clip_norm"], dynamic_binarization=cfg["dynamic_binarization"],
                       log_eval_size=cfg["log_eval_size"], log_importance_samples=cfg["importance_samples"])
    out: Path = cfg["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    stem = out / cfg["name"]
    metrics_path = stem.with_name(stem.name + ".metrics.csv")
    history = []

    def on_epoch(record, model):
        history.append(record)
        write_metrics_csv(metrics_path, history)
        print(f"epoch {record.epoch:3d}  elbo {record.elbo:9.3f}  kl {record.kl:7.3f}  "
              f"mpd {record.mpd:8.3f}  nll {record.nll_iw:9.3f}", flush=True)
        every = cfg["checkpoint_every"]
        if every and (record.epoch + 1) % every == 0:
            model.save(stem.with_name(f"{stem.name}.epoch{record.epoch + 1}.npz"))

    start = time.perf_counter()
    result = train(VaeModel.create(mcfg, cfg["seed"]), ds.images, tcfg, on_epoch)
    result.model.save(stem.with_name(stem.name + ".npz"))
    result.polyak_model.save(stem.with_name(stem.name + ".polyak.npz"))
    print(f"trained {len(result.step_losses)} steps in {time.perf_counter() - start:.1f}s; "
          f"wrote {stem}.npz, {stem}.polyak.npz and {metrics_path.name}")
    return EXIT_OK


def cmd_eval_nll(cfg: dict) -> int:
    model = _checkpoint(cfg["checkpoint"])
    ds = _load(cfg["images"], limit=cfg["limit"])
    x = _binarized(ds, cfg)
    rng = np.random.default_rng(cfg["seed"])
    est, se = [], []
    for start in range(0, len(x), 100):
        e, s = iw_nll_with_se(model, x[start:start + 100], cfg["importance_samples"], rng)
        est.append(e)
        se.append(s)
    est = np.concatenate(est)
    spread = est.std(ddof=1) / np.sqrt(len(est)) if len(est) > 1 else float("nan")
    print(f"nll_iw {est.mean():.4f} nats (S={cfg['importance_samples']}, n={len(est)}, "
          f"se over data {spread:.4f}, mean per-datum se {np.concatenate(se).mean():.4f})")
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    model = _checkpoint(cfg["checkpoint"])
    ds = _load(cfg["images"], limit=cfg["limit"])
    rec = diagnostics(model, _binarized(ds, cfg), cfg["importance_samples"], np.random.default_rng(cfg["seed"]))
    for field in ("re", "kl", "mpd", "std", "l_diverse", "l_smooth", "elbo", "nll_iw"):
        print(f"{field:10s} {getattr(rec, field):12.4f}")
    if cfg["output"] is not None:
        write_metrics_csv(cfg["output"], [rec])
    return EXIT_OK


def cmd_cluster(cfg: dict) -> int:
    model = _checkpoint(cfg["checkpoint"])
    train_ds = _load(cfg["train_images"], cfg["train_labels"])
    if (cfg["eval_images"] is None) != (cfg["eval_labels"] is None):
        raise ConfigError("eval_images and eval_labels go together")
    eval_ds = train_ds if cfg["eval_images"] is None else _load(cfg["eval_images"], cfg["eval_labels"])
    train_reps = extract_representations(model, train_ds.images)
    eval_reps = train_reps if eval_ds is train_ds else extract_representations(model, eval_ds.images)
    rows = []
    for n_clusters in cfg["n_clusters"]:
        for seed in cfg["seeds"]:
            km = kmeans(eval_reps, n_clusters, seed=seed, max_iter=cfg["max_iter"])
            acc = cluster_accuracy(km.heads, km.assignments, train_reps, train_ds.labels, eval_ds.labels)
            rows.append(ResultRow("cluster", cfg["name"], seed, f"K={n_clusters}", acc))
            print(f"K={n_clusters:3d} seed {seed}: accuracy {acc:.4f}")
    if cfg["output"] is not None:
        write_results_csv(cfg["output"], rows, append=True)
    return EXIT_OK


def cmd_classify(cfg: dict) -> int:
    if cfg["method"] not in ("knn", "logistic", "both"):
        raise ConfigError(f"method must be knn, logistic or both, not {cfg['method']!r}")
    model = _checkpoint(cfg["checkpoint"])
    train_ds = _load(cfg["train_images"], cfg["train_labels"])
    test_ds = _load(cfg["test_images"], cfg["test_labels"])
    train_reps = extract_representations(model, train_ds.images)
    test_reps = extract_representations(model, test_ds.images)
    methods = ("knn", "logistic") if cfg["method"] == "both" else (cfg["method"],)
    rows = []
    for budget in cfg["budgets"]:
        for seed in cfg["seeds"]:
            idx = stratified_subset(train_ds.labels, budget, seed)
            for method in methods:
                if method == "knn":
                    acc = knn_classify(train_reps[idx], train_ds.labels[idx], test_reps, test_ds.labels,
                                       min(cfg["k"], len(idx)))
                else:
                    acc = logistic_probe(train_reps[idx], train_ds.labels[idx], test_reps, test_ds.labels,
                                         cfg["l2"], cfg["iters"])
                label = "all" if budget is None else str(budget)
                rows.append(ResultRow(method, cfg["name"], seed, label, acc))
                print(f"{method:8s} budget {label:>5s} seed {seed}: accuracy {acc:.4f}")
    if cfg["output"] is not None:
        write_results_csv(cfg["output"], rows, append=True)
    return EXIT_OK


def cmd_reconstruct(cfg: dict) -> int:
    model = _checkpoint(cfg["checkpoint"])
    others = [model] + ([_checkpoint(cfg["checkpoint_b"])] if cfg["checkpoint_b"] else [])
    ds = _load(cfg["images"], limit=cfg["count"])
    rng = np.random.default_rng(cfg["seed"])
    x = (rng.random(ds.images.shape) < ds.images).astype(float)
    columns = [x] + [_reconstruct(m, x, rng) for m in others]
    # one row per datum: original | model A | model B
    tiles = np.stack(columns, axis=1).reshape(-1, ds.dim)
    write_image_grid(cfg["output"], tiles, len(columns))
    print(f"wrote {len(x)} x {len(columns)} grid to {cfg['output']}")
    return EXIT_OK


def cmd_sample(cfg: dict) -> int:
    model = _checkpoint(cfg["checkpoint"])
    rng = np.random.default_rng(cfg["seed"])
    z = model.sample_prior(cfg["count"], rng)
    write_image_grid(cfg["output"], _decode_samples(model, z, rng), cfg["columns"])
    print(f"wrote {cfg['count']} samples to {cfg['output']}")
    return EXIT_OK


def cmd_verify_theorem(cfg: dict) -> int:
    start = time.perf_counter()
    reports = run_random_trials(cfg["trials"], cfg["max_atoms"], cfg["seed"], cfg["tol"])
    print(f"{'trial':>5s} {'mpd':>12s} {'mi_kl':>12s} {'reverse_kl':>12s} {'gap':>10s}  ok")
    for i, r in enumerate(reports):
        print(f"{i:5d} {r.mpd_exact:12.8f} {r.mi_kl:12.8f} {r.reverse_kl:12.8f} {r.gap:10.2e}  "
              f"{'yes' if r.passed else 'NO'}")
    worst = max((r.gap for r in reports), default=0.0)
    print(f"max gap {worst:.3e} over {len(reports)} models in {time.perf_counter() - start:.3f}s")
    if not all(r.passed for r in reports):
        raise VerificationFailed(f"gap {worst:.3e} exceeds tolerance {cfg['tol']:g}")
    return EXIT_OK


def cmd_synth_data(cfg: dict) -> int:
    if not 0.0 <= cfg["test_fraction"] < 1.0:
        raise ConfigError("test_fraction must lie in [0, 1)")
    ds = synth_mixture(cfg["n_clusters"], cfg["side"], cfg["n_per_cluster"], cfg["flip_prob"], cfg["seed"])
    out: Path = cfg["output_dir"]
    out.mkdir(parents=True, exist_ok=True)
    n_test = int(round(cfg["test_fraction"] * len(ds)))
    side = cfg["side"]
    splits = {"train": slice(n_test, None)}
    if n_test:
        splits["test"] = slice(0, n_test)
    for split, sl in splits.items():
        images = np.round(ds.images[sl] * 255).astype(np.uint8).reshape(-1, side, side)
        write_idx(out / f"{cfg['prefix']}-{split}-images.idx", images)
        write_idx(out / f"{cfg['prefix']}-{split}-labels.idx", ds.labels[sl].astype(np.uint8))
        print(f"wrote {len(images)} {split} images to {out / (cfg['prefix'] + '-' + split + '-images.idx')}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval-nll": cmd_eval_nll,
    "diagnose": cmd_diagnose,
    "cluster": cmd_cluster,
    "classify": cmd_classify,
    "reconstruct": cmd_reconstruct,
    "sample": cmd_sample,
    "verify-theorem": cmd_verify_theorem,
    "synth-data": cmd_synth_data,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mpdvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb in COMMANDS:
        p = sub.add_parser(verb, help=f"{verb} (keys: {', '.join(SCHEMAS[verb])})")
        p.add_argument("-c", "--config", type=Path, help="flat key = value file")
        p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = ""
        if args.config is not None:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        cfg = parse_config(args.verb, text, args.overrides)
        return COMMANDS[args.verb](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ad.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
