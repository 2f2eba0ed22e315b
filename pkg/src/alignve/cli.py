"""Command-line entry point: ``alignve {train,eval,gradcheck,gen-toy,visualize}``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    DatasetError,
    ToyConfig,
    generate_toy_dataset,
    load_dataset,
    toy_config_dict,
)
from .encoder import EncoderConfig
from .model import AlignVE, ModelConfig, init_params
from .tensor import NonFiniteError, ShapeError, cross_entropy, finite_difference_check
from .text import EmbeddingFormatError, EmbeddingTable, load_embeddings, positional_encoding
from .train import TrainConfig, evaluate, train
from .visual import FeatureFormatError
from .viz import render_heatmaps

log = logging.getLogger("alignve")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-4
PATH_KEYS = ("embeddings", "train_manifest", "val_manifest", "test_manifest", "out_dir")
GRADCHECK_KEYS = ("d_p", "d_h", "n_tokens")
TINY_ENCODER = EncoderConfig(d=8, heads=2, layers=1)
DATA_ERRORS = (DatasetError, FeatureFormatError, EmbeddingFormatError, CheckpointError, ShapeError,
               ValueError, KeyError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="alignve", description="Alignment-based visual entailment.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--optimizer", choices=("sgd", "adam"))
        p.add_argument("--lr", type=float)
        p.add_argument("--pool-shape", help="pooling grid as HxW, e.g. 10x15")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("train", help="train a model"))
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="manifest to evaluate (default: test, then val)")
    common(sub.add_parser("gradcheck", help="finite-difference check of the full model"))
    common(sub.add_parser("gen-toy", help="write the synthetic toy dataset"))
    p = common(sub.add_parser("visualize", help="alignment heatmaps for one example"))
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--example-id", required=True)
    return parser


def parse_pool_shape(raw: str) -> tuple[int, int]:
    try:
        h, w = raw.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ValueError(f"--pool-shape must look like HxW, got {raw!r}") from None


def load_config(args) -> tuple[TrainConfig, dict, dict]:
    """Split the config file into training config, paths and extra keys, applying flag overrides."""
    raw = {}
    base = Path(".")
    if args.config is not None:
        raw = json.loads(args.config.read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
        base = args.config.parent
    paths = {k: base / raw.pop(k) for k in PATH_KEYS if k in raw}
    extra = {k: raw.pop(k) for k in (*GRADCHECK_KEYS, "toy") if k in raw}
    extra["encoder_given"] = "encoder" in raw
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.lr is not None:
        raw["lr"] = args.lr
    if args.optimizer is not None:
        raw["optimizer"] = "adam" if args.optimizer == "adam" else "sgd_momentum"
    if args.pool_shape is not None:
        raw["pool_shape"] = parse_pool_shape(args.pool_shape)
    if args.out is not None:
        paths["out_dir"] = args.out
    return TrainConfig.from_dict(raw), paths, extra


def _require(paths: dict, key: str) -> Path:
    if key not in paths:
        raise ValueError(f"config is missing {key!r}")
    return paths[key]


def _model_from_checkpoint(cfg: TrainConfig, table: EmbeddingTable, d_p: int, path: Path) -> AlignVE:
    model_cfg = cfg.model_config(d_p, table.dim)
    ckpt = load_checkpoint(path, model_cfg)
    model = AlignVE(model_cfg, init_params(model_cfg, np.random.default_rng(0)), table)
    model.params.load_arrays(ckpt.params)
    return model


def cmd_train(args) -> int:
    cfg, paths, _ = load_config(args)
    table = load_embeddings(_require(paths, "embeddings"))
    train_set = load_dataset(_require(paths, "train_manifest"))
    val_set = load_dataset(_require(paths, "val_manifest"))
    out = _require(paths, "out_dir")
    out.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict() | {k: str(v) for k, v in paths.items()}
    (out / "config.json").write_text(json.dumps(resolved, indent=2))
    result = train(cfg, train_set, val_set, table, out_dir=out)
    best = result.history[result.best_epoch - 1]
    print(f"best epoch {result.best_epoch}: val_accuracy={best['val_accuracy']:.4f} "
          f"val_loss={best['val_loss']:.4f}; wrote {out / 'best.avck'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, paths, _ = load_config(args)
    table = load_embeddings(_require(paths, "embeddings"))
    manifest = args.manifest or paths.get("test_manifest") or _require(paths, "val_manifest")
    dataset = load_dataset(manifest)
    if len(dataset) == 0:
        raise DatasetError(f"{manifest}: nothing to evaluate")
    model = _model_from_checkpoint(cfg, table, dataset[0].features.d_p, args.checkpoint)
    metrics = evaluate(model, dataset)
    text = json.dumps(metrics, indent=2)
    print(text)
    if "out_dir" in paths:
        paths["out_dir"].mkdir(parents=True, exist_ok=True)
        (paths["out_dir"] / "metrics.json").write_text(text)
    return EXIT_OK


def gradcheck_error(encoder: EncoderConfig, d_p: int = 12, d_h: int = 8, n_tokens: int = 5,
                    pool_shape=(10, 15), seed: int = 12345) -> float:
    """Max relative FD error of cross-entropy through the whole model, in float64."""
    rng = np.random.default_rng(seed)
    model_cfg = ModelConfig(d_p=d_p, d_h=d_h, encoder=encoder, pool_shape=pool_shape)
    params = init_params(model_cfg, rng, np.float64)
    table = EmbeddingTable({}, np.zeros((1, d_h), np.float32))
    model = AlignVE(model_cfg, params, table)
    f_p = rng.standard_normal((36, d_p))
    f_h = rng.standard_normal((n_tokens, d_h)) + positional_encoding(n_tokens, d_h)
    label = int(rng.integers(3))
    return finite_difference_check(lambda _: cross_entropy(model.forward_prepared(f_p, f_h).logits, label),
                                   params)


def cmd_gradcheck(args) -> int:
    cfg, _, extra = load_config(args)
    encoder = cfg.encoder if extra["encoder_given"] else TINY_ENCODER
    err = gradcheck_error(encoder, int(extra.get("d_p", 12)), int(extra.get("d_h", 8)),
                          int(extra.get("n_tokens", 5)), cfg.pool_shape, cfg.seed)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error: {err:.3e} ({'pass' if ok else 'FAIL'}, tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_gen_toy(args) -> int:
    _, paths, extra = load_config(args)
    out = _require(paths, "out_dir")
    toy_raw = dict(extra.get("toy", {}))
    if args.seed is not None:
        toy_raw["seed"] = args.seed
    for key in ("concept_rows", "tokens"):
        if key in toy_raw:
            toy_raw[key] = tuple(toy_raw[key])
    toy_cfg = ToyConfig(**toy_raw)
    toy = generate_toy_dataset(toy_cfg, out)
    run_cfg = {
        "embeddings": toy.embeddings.name,
        "train_manifest": toy.manifests["train"].name,
        "val_manifest": toy.manifests["val"].name,
        "test_manifest": toy.manifests["test"].name,
        "out_dir": "run",
        "lr": 1e-3,
        "max_epochs": 50,
        "encoder": {"d": 16, "heads": 2, "layers": 1},
        "toy": toy_config_dict(toy_cfg),
    }
    (out / "config.json").write_text(json.dumps(run_cfg, indent=2))
    print(f"wrote toy dataset to {out} ({3 * toy_cfg.per_class} examples); train with "
          f"`alignve train --config {out / 'config.json'}`")
    return EXIT_OK


def cmd_visualize(args) -> int:
    cfg, paths, _ = load_config(args)
    table = load_embeddings(_require(paths, "embeddings"))
    example = None
    for key in ("train_manifest", "val_manifest", "test_manifest"):
        if key in paths:
            try:
                example = load_dataset(paths[key]).find(args.example_id)
                break
            except KeyError:
                continue
    if example is None:
        raise KeyError(f"example {args.example_id!r} not found in any configured manifest")
    model = _model_from_checkpoint(cfg, table, example.features.d_p, args.checkpoint)
    out = _require(paths, "out_dir")
    written = render_heatmaps(model, example, out)
    print(f"wrote {len(written) - 1} heatmaps and {written[0].name} to {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "gen-toy": cmd_gen_toy, "visualize": cmd_visualize}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
