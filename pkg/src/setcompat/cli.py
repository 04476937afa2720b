"""Command-line surface.

One subcommand per pipeline stage; all randomness flows from a single
``--seed`` fanned out to named sub-seeds, so identical invocations give
byte-identical outputs. Metrics go to stdout, logs to stderr, files only
under ``--out``. Exit codes: 0 success, 1 usage or validation error,
2 internal failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import traceback
from typing import Optional, Sequence

import numpy as np

from . import data as ds
from . import evaluation as ev
from . import gradcheck, model, training
from .errors import EngineError

log = logging.getLogger("setcompat")


def derive_seed(master: int, label: str) -> int:
    """Deterministic named sub-seed so each random component is reproducible alone."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="setcompat",
        description="Set-compatibility learning engine over precomputed item features.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def cmd(name, help_text):
        p = sub.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
        return p

    p = cmd("gen-synthetic", "generate the style-clustered synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--styles", type=int, default=8)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--categories", type=int, default=6)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--min-size", type=int, default=2)
    p.add_argument("--max-size", type=int, default=8)
    p.add_argument("--train", type=int, default=5000, help="positive outfits in the train split")
    p.add_argument("--valid", type=int, default=1000)
    p.add_argument("--test", type=int, default=1000)

    p = cmd("build-vocab", "build a token vocabulary from manifest descriptions")
    p.add_argument("--manifest", action="append", required=True, help="manifest path (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", type=int, default=5000)
    p.add_argument("--min-count", type=int, default=2)

    p = cmd("train", "train the scorer and save the best checkpoint")
    p.add_argument("--features", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--projection-dim", type=int, default=1000)
    p.add_argument("--g-layers", default="512,512,256,256", help="comma-separated widths")
    p.add_argument("--f-layers", default="128,128,32", help="comma-separated widths")
    p.add_argument("--dropout-rate", type=float, default=0.35)
    p.add_argument("--vse", action="store_true", help="enable the text-augmented variant")
    p.add_argument("--vocab", help="vocabulary file (required with --vse)")
    p.add_argument("--text-dim", type=int, default=300)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=3)

    p = cmd("eval-compat", "AUC on a labeled manifest (negatives sampled if absent)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = cmd("eval-fitb", "fill-in-the-blank accuracy on a manifest's positives")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-size", type=int, default=3, help="smallest outfit eligible for a query")

    p = cmd("score", "print outfit_id<TAB>score for each manifest outfit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)

    p = cmd("embed", "export item compatibility embeddings (optionally a 2D projection)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pca", action="store_true", help="also write 2D coordinates as TSV")

    p = cmd("grad-check", "verify analytic gradients on a downscaled model")
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--projection-dim", type=int, default=8)
    p.add_argument("--g-layers", default="8,8")
    p.add_argument("--f-layers", default="4")
    p.add_argument("--outfit-size", type=int, default=3)
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    # pull --config out first so its values become parser defaults
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        parser.error("--config needs a path")
    path = argv[i + 1]
    if not os.path.isfile(path):
        parser.error(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            values = json.load(f)
        except json.JSONDecodeError as e:
            parser.error(f"config file is not valid JSON: {e}")
    if not isinstance(values, dict):
        parser.error("config file must hold a JSON object")
    rest = argv[:i] + argv[i + 2 :]
    flags: list[str] = []
    for key, value in values.items():
        flag = f"--{key.replace('_', '-')}"
        if isinstance(value, bool):
            if value:
                flags.append(flag)
        else:
            flags.extend([flag, str(value)])
    # config-derived flags first, explicit flags afterwards so they win
    if rest and not rest[0].startswith("-"):
        return [rest[0]] + flags + rest[1:]
    return flags + rest


def _require_files(*paths: Optional[str]) -> None:
    for path in paths:
        if path is not None and not os.path.isfile(path):
            raise EngineError(f"input file not found: {path}")


def _write_run_config(out_dir: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    with open(os.path.join(out_dir, "run-config.json"), "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_layers(text: str) -> tuple[int, ...]:
    try:
        layers = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise EngineError(f"bad layer list {text!r}; expected comma-separated integers") from None
    if not layers:
        raise EngineError(f"bad layer list {text!r}; at least one width required")
    return layers


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen_synthetic(args) -> int:
    out = _ensure_out(args.out)
    config = ds.SyntheticConfig(
        n_styles=args.styles,
        feature_dim=args.feature_dim,
        n_categories=args.categories,
        sigma=args.sigma,
        min_outfit_size=args.min_size,
        max_outfit_size=args.max_size,
        n_train=args.train,
        n_valid=args.valid,
        n_test=args.test,
        seed=derive_seed(args.seed, "synthetic"),
    )
    generated = ds.gen_synthetic(config)
    ds.write_features(generated.records, os.path.join(out, "features.frnf"))
    for split, outfits in generated.splits.items():
        ds.write_manifest(outfits, generated.meta, os.path.join(out, f"{split}.jsonl"))
    _write_run_config(out, args)
    print(
        f"generated {len(generated.records)} items; "
        + ", ".join(f"{s}={len(o)}" for s, o in generated.splits.items())
    )
    return 0


def _cmd_build_vocab(args) -> int:
    _require_files(*args.manifest)
    out = _ensure_out(args.out)
    texts: list[str] = []
    for path in args.manifest:
        _, meta = ds.load_manifest(path)
        texts.extend(" ".join(m.tokens) for m in meta.values() if m.tokens)
    vocab = ds.build_vocabulary(texts, max_size=args.max_size, min_count=args.min_count)
    vocab.save(os.path.join(out, "vocab.txt"))
    _write_run_config(out, args)
    print(f"vocabulary size {len(vocab)}")
    return 0


def _load_dataset(features_path, manifest_path, vocab=None):
    store = ds.read_features(features_path)
    outfits, meta = ds.load_manifest(manifest_path)
    items = ds.materialize_items(store, meta, vocab)
    return store, outfits, meta, items


def _with_negatives(outfits, rng):
    positives = [o for o in outfits if o.label == 1]
    negatives = [o for o in outfits if o.label == 0]
    if negatives:
        return outfits
    if not positives:
        raise EngineError("manifest holds no positive outfits")
    log.info("sampling %d negatives (one per positive)", len(positives))
    return positives + ds.sample_negatives(positives, positives, rng)


def _cmd_train(args) -> int:
    _require_files(args.features, args.train_manifest, args.valid_manifest, args.vocab)
    if args.vse and not args.vocab:
        raise EngineError("--vse requires --vocab")
    out = _ensure_out(args.out)
    vocab = ds.Vocabulary.load(args.vocab) if args.vse else None
    store = ds.read_features(args.features)
    model_config = model.ModelConfig(
        feature_dim=store.dim,
        projection_dim=args.projection_dim,
        g_layers=_parse_layers(args.g_layers),
        f_layers=_parse_layers(args.f_layers),
        dropout_rate=args.dropout_rate,
        vse_enabled=args.vse,
        vocab_size=len(vocab) if vocab else 0,
        text_projection_dim=args.text_dim,
    )
    splits = {}
    for split, path in (("train", args.train_manifest), ("valid", args.valid_manifest)):
        outfits, meta = ds.load_manifest(path)
        rng = np.random.default_rng(derive_seed(args.seed, f"negatives-{split}"))
        labeled = _with_negatives(outfits, rng)
        items = ds.materialize_items(store, meta, vocab)
        splits[split] = ds.labeled_outfits(labeled, items)
    train_config = training.TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=derive_seed(args.seed, "train"),
    )
    initial = model.init_params(
        model_config, np.random.default_rng(derive_seed(args.seed, "init"))
    )
    best, report = training.train(
        model_config, splits["train"], splits["valid"], train_config, initial_params=initial
    )
    training.save_checkpoint(best, train_config, vocab, os.path.join(out, "checkpoint.frnc"))
    with open(os.path.join(out, "metrics.jsonl"), "w", encoding="utf-8") as f:
        for row in report.metrics_rows():
            f.write(json.dumps(row, sort_keys=True) + "\n")
        f.write(
            json.dumps(
                {"best_epoch": report.best_epoch, "stopped_epoch": report.stopped_epoch},
                sort_keys=True,
            )
            + "\n"
        )
    _write_run_config(out, args)
    log.info("training wall time %.1fs", report.wall_time_s)
    print(
        f"stopped after epoch {report.stopped_epoch}; best epoch {report.best_epoch}; "
        f"valid loss {min(report.valid_loss):.4f}; valid auc {report.valid_auc[report.best_epoch - 1]:.4f}"
    )
    return 0


def _cmd_eval_compat(args) -> int:
    _require_files(args.checkpoint, args.features, args.manifest)
    out = _ensure_out(args.out)
    ckpt = training.load_checkpoint(args.checkpoint)
    store, outfits, meta, items = _load_dataset(args.features, args.manifest, ckpt.vocab)
    rng = np.random.default_rng(derive_seed(args.seed, "negatives-test"))
    labeled = ds.labeled_outfits(_with_negatives(outfits, rng), items)
    report = ev.eval_compat(ckpt.params, labeled)
    payload = dataclasses.asdict(report)
    with open(os.path.join(out, "compat-report.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_config(out, args)
    print(f"auc {report.auc:.4f} over {report.n_pos} positives / {report.n_neg} negatives")
    return 0


def _cmd_eval_fitb(args) -> int:
    _require_files(args.checkpoint, args.features, args.manifest)
    out = _ensure_out(args.out)
    ckpt = training.load_checkpoint(args.checkpoint)
    store, outfits, meta, items = _load_dataset(args.features, args.manifest, ckpt.vocab)
    positives = [o for o in outfits if o.label == 1]
    rng = np.random.default_rng(derive_seed(args.seed, "fitb"))
    queries = ds.build_fitb(positives, meta, rng, min_outfit_size=args.min_size)
    report = ev.eval_fitb(ckpt.params, queries, items)
    payload = dataclasses.asdict(report)
    with open(os.path.join(out, "fitb-report.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_run_config(out, args)
    print(
        f"fitb accuracy {report.accuracy:.4f} over {report.n_queries} queries "
        f"({report.n_ties} ties, {report.n_excluded} excluded)"
    )
    return 0


def _cmd_score(args) -> int:
    _require_files(args.checkpoint, args.features, args.manifest)
    ckpt = training.load_checkpoint(args.checkpoint)
    store, outfits, meta, items = _load_dataset(args.features, args.manifest, ckpt.vocab)
    for outfit in outfits:
        score = model.score_outfit(ckpt.params, [items[i] for i in outfit.item_ids])
        print(f"{outfit.outfit_id}\t{score.m_s:.6f}")
    return 0


def _cmd_embed(args) -> int:
    _require_files(args.checkpoint, args.features)
    out = _ensure_out(args.out)
    ckpt = training.load_checkpoint(args.checkpoint)
    store = ds.read_features(args.features)
    items = ds.materialize_items(store, {}, ckpt.vocab)
    ordered = [items[i] for i in store.ids]
    ev.export_embeddings(ckpt.params, ordered, os.path.join(out, "embeddings.frnf"))
    if args.pca:
        vectors = np.asarray([model.embed_item(ckpt.params, it) for it in ordered])
        result = ev.pca2d(vectors)
        with open(os.path.join(out, "coords.tsv"), "w", encoding="utf-8") as f:
            for item_id, (x, y) in zip(store.ids, result.coords):
                f.write(f"{item_id}\t{x:.10g}\t{y:.10g}\n")
        if result.rank_deficient:
            log.warning("pca: input is rank deficient; second axis zeroed")
    _write_run_config(out, args)
    print(f"exported {len(ordered)} embeddings (dim {ckpt.params.config.projection_dim})")
    return 0


def _cmd_grad_check(args) -> int:
    config = model.ModelConfig(
        feature_dim=args.feature_dim,
        projection_dim=args.projection_dim,
        g_layers=_parse_layers(args.g_layers),
        f_layers=_parse_layers(args.f_layers),
        dropout_rate=0.35,
    )
    rng = np.random.default_rng(derive_seed(args.seed, "grad-check"))
    params = model.init_params(config, rng, dtype=np.float64)
    items = [
        model.ItemInput(f"it{i}", rng.normal(size=args.feature_dim))
        for i in range(args.outfit_size)
    ]
    batch = [(items, 1), (items, 0)]
    report = gradcheck.grad_check(params, batch, h=args.step, tol=args.tol)
    print(
        f"checked {report.n_checked} parameter scalars; "
        f"max relative error {report.max_rel_error:.3e} (tol {report.tol:g})"
    )
    for failure in report.failures[:20]:
        print(
            f"FAIL {failure.name}{list(failure.index)}: "
            f"analytic {failure.analytic:.6e} vs numeric {failure.numeric:.6e}",
            file=sys.stderr,
        )
    if not report.passed:
        print(f"gradient check failed at {len(report.failures)} scalars", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


_COMMANDS = {
    "gen-synthetic": _cmd_gen_synthetic,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "eval-compat": _cmd_eval_compat,
    "eval-fitb": _cmd_eval_fitb,
    "score": _cmd_score,
    "embed": _cmd_embed,
    "grad-check": _cmd_grad_check,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s")
    parser = _build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (EngineError, OSError) as e:
        print(f"setcompat: error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc(file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
