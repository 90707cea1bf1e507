"""Command-line entry point: ``p2g <command> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import config as cfgmod
from .backbone import Vocabulary, pretrain
from .checkpoint import (
    CheckpointError, VocabularyMismatch, load_backbone, load_model, save_backbone, save_model,
)
from .data import CorpusError, generate_corpus, read_corpus, write_corpus
from .gradcheck import gradient_check
from .model import AblationFlags
from .training import ABLATIONS, METRIC_COLUMNS, NaNLossError, evaluate, train

log = logging.getLogger("p2g")

COMMANDS = ("generate", "pretrain", "train", "eval", "ablate", "sweep", "gradcheck")
PATH_FLAGS = ("train", "dev", "test", "backbone", "checkpoint", "out")

EXIT_OK, EXIT_INPUT, EXIT_USAGE, EXIT_NAN, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _require(cfg: dict, key: str) -> Path:
    value = cfg[key]
    if not value:
        raise cfgmod.ConfigError(f"{key} is required for this command")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{key}: {path}")
    return path


def _corpus(cfg: dict, split: str, required: bool = True):
    if not required and not cfg[f"paths.{split}"]:
        return None
    return read_corpus(_require(cfg, f"paths.{split}"))


def cmd_generate(cfg: dict, out: Path) -> int:
    for split in ("train", "dev", "test"):
        gen = cfgmod.generator_config(cfg, split)
        path = out / f"{split}.jsonl"
        write_corpus(path, generate_corpus(gen))
        log.info("wrote %d instances to %s", gen.instance_count, path)
    return EXIT_OK


def cmd_pretrain(cfg: dict, out: Path) -> int:
    corpus = _corpus(cfg, "train")
    dev = _corpus(cfg, "dev", required=False)
    test = _corpus(cfg, "test", required=False)
    vocab = Vocabulary.from_corpus(corpus + (dev or []) + (test or []))
    pcfg = cfgmod.pretrain_config(cfg)
    model, rows = pretrain(corpus, vocab, cfgmod.backbone_config(cfg), pcfg, heldout=dev)
    save_backbone(out / "backbone.pt", model, vocab)
    write_csv(out / "pretrain_loss.csv", rows, ("step", "split", "loss"))
    (out / "vocab.json").write_text(json.dumps({"hash": vocab.hash, "tokens": vocab.tokens}, indent=1))
    return EXIT_OK


def _train_run(cfg: dict, run_cfg=None):
    backbone, vocab = load_backbone(_require(cfg, "paths.backbone"))
    corpus = _corpus(cfg, "train")
    dev = _corpus(cfg, "dev", required=False) or []
    return train(corpus, dev, run_cfg or cfgmod.run_config(cfg), vocab, backbone)


def cmd_train(cfg: dict, out: Path) -> int:
    state, rows = _train_run(cfg)
    save_model(out / "model.pt", state.model, state.config,
               extra={"best_step": state.best_step, "steps": state.step})
    write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    return EXIT_OK


def _eval_set(cfg: dict, vocab: Optional[Vocabulary] = None):
    data = _corpus(cfg, "test", required=False) or _corpus(cfg, "dev")
    if vocab is not None:
        unknown = sorted(set(Vocabulary.from_corpus(data).tokens) - set(vocab.tokens))
        if unknown:
            raise VocabularyMismatch(f"vocabulary mismatch: {len(unknown)} corpus token(s) missing from the "
                                     f"checkpoint vocabulary {vocab.hash}, e.g. {unknown[:3]}")
    return data


def cmd_eval(cfg: dict, out: Path) -> int:
    model, run_cfg = load_model(_require(cfg, "paths.checkpoint"), cfg["eval.vocab_hash"] or None)
    data = _eval_set(cfg, model.vocab)
    res = evaluate(model, data, cfg["eval.n"], seed=cfg["seed"], zero_variance=cfg["eval.zero_variance"],
                   batch_size=run_cfg.eval_batch_size)
    summary = {"accuracy": res.accuracy, "mean_loss": res.mean_loss, "n": cfg["eval.n"],
               "instances": len(data), "seed": cfg["seed"], "ablation_flags": run_cfg.flags.label(),
               "vocab_hash": model.vocab.hash}
    (out / "accuracy.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    rows = [{"index": r["index"], "gold": r["gold"], "pred": r["pred"],
             "correct": int(r["gold"] == r["pred"]),
             "scores": ";".join(f"{s:.6f}" for s in r["scores"])} for r in res.records]
    write_csv(out / "per_instance.csv", rows, ("index", "gold", "pred", "correct", "scores"))
    print(f"accuracy {res.accuracy:.4f} over {len(data)} instances (n={cfg['eval.n']})")
    return EXIT_OK


def _metric_row(step, split, res, n, flags, seed):
    return {"step": step, "split": split, "accuracy": res.accuracy, "mean_loss": res.mean_loss,
            "n": n, "ablation_flags": flags, "seed": seed, "wall_clock_ms": 0}


def cmd_ablate(cfg: dict, out: Path) -> int:
    base = cfgmod.run_config(cfg)
    if cfg["ablate.steps"]:
        base = dataclasses.replace(base, steps=cfg["ablate.steps"])
    split = "test" if cfg["paths.test"] else "dev"
    data = _eval_set(cfg)
    rows = []
    for name, flag_names in ABLATIONS:
        run_cfg = dataclasses.replace(base, flags=AblationFlags.from_names(flag_names))
        state, _ = _train_run(cfg, run_cfg)
        res = evaluate(state.model, data, cfg["eval.n"], seed=cfg["seed"],
                       batch_size=run_cfg.eval_batch_size)
        rows.append({"variant": name, **_metric_row(state.step, split, res, cfg["eval.n"],
                                                    run_cfg.flags.label(), cfg["seed"])})
        log.info("ablation %s accuracy %.4f", name, res.accuracy)
    write_csv(out / "ablation.csv", rows, ("variant",) + METRIC_COLUMNS)
    return EXIT_OK


def cmd_sweep(cfg: dict, out: Path) -> int:
    split = "test" if cfg["paths.test"] else "dev"
    data = _eval_set(cfg)
    rows = []
    if cfg["sweep.over"] == "n":
        model, run_cfg = load_model(_require(cfg, "paths.checkpoint"), cfg["eval.vocab_hash"] or None)
        _eval_set(cfg, model.vocab)
        for n in cfg["sweep.n_values"]:
            res = evaluate(model, data, int(n), seed=cfg["seed"], batch_size=run_cfg.eval_batch_size)
            rows.append({"parameter": "n", "value": n,
                         **_metric_row(0, split, res, int(n), run_cfg.flags.label(), cfg["seed"])})
    elif cfg["sweep.over"] == "lambda":
        base = cfgmod.run_config(cfg)
        for lam in cfg["sweep.lambda_values"]:
            run_cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, lam=float(lam)))
            state, _ = _train_run(cfg, run_cfg)
            res = evaluate(state.model, data, cfg["eval.n"], seed=cfg["seed"],
                           batch_size=run_cfg.eval_batch_size)
            rows.append({"parameter": "lambda", "value": float(lam),
                         **_metric_row(state.step, split, res, cfg["eval.n"], run_cfg.flags.label(),
                                       cfg["seed"])})
    else:
        raise cfgmod.ConfigError(f"sweep.over must be 'n' or 'lambda', got {cfg['sweep.over']!r}")
    write_csv(out / "sweep.csv", rows, ("parameter", "value") + METRIC_COLUMNS)
    return EXIT_OK


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    report = gradient_check(seed=cfg["seed"], per_family=cfg["gradcheck.per_family"],
                            step=cfg["gradcheck.step"], tolerance=cfg["gradcheck.tolerance"])
    for line in report.lines():
        print(line)
    payload = dataclasses.asdict(report)
    payload["seconds"] = round(payload["seconds"], 3)
    (out / "gradcheck.json").write_text(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


HANDLERS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2g", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML file of dotted keys (e.g. a config.resolved.yaml)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--seed", type=int)
    for name in PATH_FLAGS:
        parser.add_argument(f"--{name}", help=f"sets paths.{name}")
    parser.add_argument("--expect-vocab", help="sets eval.vocab_hash")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    extra = {f"paths.{n}": getattr(args, n) for n in PATH_FLAGS if getattr(args, n) is not None}
    if args.seed is not None:
        extra["seed"] = args.seed
    if args.expect_vocab is not None:
        extra["eval.vocab_hash"] = args.expect_vocab
    try:
        cfg = cfgmod.resolve(args.config, args.overrides, extra)
        out = Path(cfg["paths.out"])
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.write_snapshot(cfg, args.command, out / "config.resolved.yaml")
        return HANDLERS[args.command](cfg, out)
    except FileNotFoundError as exc:
        print(f"error[missing-file]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CorpusError, CheckpointError) as exc:
        print(f"error[input]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NaNLossError as exc:
        print(f"error[nan]: {exc}", file=sys.stderr)
        return EXIT_NAN
    except (cfgmod.ConfigError, TypeError, ValueError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
