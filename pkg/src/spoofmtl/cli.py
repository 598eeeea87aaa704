"""``spoofmtl`` command-line entry point.

Subcommands: gen-data, train, score, eval, gradcheck, describe-model.
Config files are JSON objects; ``--override key=value`` is applied on top,
then ``--seed`` / ``--variant`` / ``--warmup-ckpt``.  Every command that
writes to ``--out`` also writes ``config.json`` there with the resolved
settings.  Failures exit with status 1 and one ``error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .datagen import SPLITS, SynthSpec, generate_corpus, load_corpus, read_protocol, read_segment_labels
from .evaluation import evaluate_scores, write_report
from .gradsuite import run_suite
from .model import VARIANTS, ModelConfig, build_model, load_bundle
from .objective import read_scores, write_scores
from .training import TrainConfig, coerce_override, save_result, score_utterances, train

log = logging.getLogger("spoofmtl")


class CommandError(Exception):
    pass


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CommandError(f"{path}: config must be a JSON object")
    return data


def _apply_overrides(cls, values: dict, overrides: Sequence[str]) -> dict:
    values = dict(values)
    for item in overrides or ():
        if "=" not in item:
            raise CommandError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = coerce_override(cls, key.strip(), raw.strip())
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CommandError(f"unknown config key(s): {', '.join(unknown)}")
    return values


def _snapshot(out: Path, command: str, values: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": values}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _need(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise CommandError(f"--{name.replace('_', '-')} is required for {args.command}")
    return value


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    values = _apply_overrides(SynthSpec, _read_config(args.config), args.override)
    if args.seed is not None:
        values["seed"] = args.seed
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    spec = SynthSpec(**values)
    out = Path(_need(args, "out"))
    trials = generate_corpus(spec, out)
    _snapshot(out, "gen-data", spec.to_dict())
    log.info("event=gen-data trials=%d out=%s", len(trials), out)


def _train_config(args) -> TrainConfig:
    values = _apply_overrides(TrainConfig, _read_config(args.config), args.override)
    for flag, key in (("seed", "seed"), ("variant", "variant"), ("warmup_ckpt", "warmup_checkpoint")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    return TrainConfig.from_dict(values)


def cmd_train(args) -> None:
    cfg = _train_config(args)
    out = Path(_need(args, "out"))
    corpus = load_corpus(_need(args, "data"), ("train", "dev"))
    log.info("event=train-start variant=%s seed=%d train=%d dev=%d",
             cfg.variant, cfg.seed, len(corpus["train"]), len(corpus["dev"]))
    _snapshot(out, "train", cfg.to_dict())
    result = train(cfg, corpus)
    save_result(out / "model.ckpt", result)
    result.record.write_csv(out / "run_record.csv")
    log.info("event=train-done best_epoch=%d best_dev_loss=%.6f checkpoint=%s",
             result.record.best_epoch, result.record.best_dev_loss, out / "model.ckpt")


def cmd_score(args) -> None:
    bundle = load_bundle(_need(args, "ckpt"))
    split = args.split or "eval"
    corpus = load_corpus(_need(args, "data"), (split,))
    out = Path(_need(args, "out"))
    _snapshot(out, "score", {"ckpt": str(args.ckpt), "data": str(args.data), "split": split,
                             "variant": bundle.variant})
    records = score_utterances(bundle, corpus[split])
    path = out / f"scores_{split}.txt"
    write_scores(path, records)
    log.info("event=score variant=%s split=%s trials=%d scores=%s", bundle.variant, split, len(records), path)


def cmd_eval(args) -> None:
    data = Path(_need(args, "data"))
    records = read_scores(_need(args, "scores"))
    report = evaluate_scores(records, read_protocol(data / "protocol.txt"),
                             read_segment_labels(data / "segment_labels.txt"), args.split)
    out = Path(_need(args, "out"))
    _snapshot(out, "eval", {"scores": str(args.scores), "data": str(data), "split": args.split})
    write_report(out / "report.json", report, out / "report.csv")
    log.info("event=eval utt_eer=%.6f seg_eer=%.6f report=%s", report.utt_eer, report.seg_eer, out / "report.json")
    print(f"utt_eer={report.utt_eer:.6f} seg_eer={report.seg_eer:.6f}")


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds)
    results = run_suite(seeds)
    lines = [f"{'operator':<22} {'max_rel_error':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.worst_error:>14.3e}  {'pass' if r.passed else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _snapshot(out, "gradcheck", {"seeds": args.seeds})
        (out / "gradcheck.txt").write_text(text)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CommandError(f"gradient check failed for {', '.join(failed)}")
    return 0


def cmd_describe(args) -> None:
    values = _apply_overrides(TrainConfig, _read_config(args.config), args.override)
    model_cfg = ModelConfig(**{k: v for k, v in values.items() if k in {f.name for f in dataclasses.fields(ModelConfig)}})
    variant = args.variant or values.get("variant", "Seg")
    if variant not in VARIANTS:
        raise CommandError(f"unknown variant {variant!r}")
    base = {"UttBW": "Utt", "SegBW": "Seg"}.get(variant)
    if base is not None:
        bundle = build_model(variant, model_cfg, warmup_checkpoint=build_model(base, model_cfg))
    else:
        bundle = build_model(variant, model_cfg)
    text = bundle.describe()
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _snapshot(out, "describe-model", {"variant": variant, "model": model_cfg.to_dict()})
        (out / "layers.txt").write_text(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "score": cmd_score,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "describe-model": cmd_describe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spoofmtl", description="Partial-spoof detection toolkit")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--warmup-ckpt", dest="warmup_ckpt")
        p.add_argument("--out", help="output directory")
        p.add_argument("--split", choices=SPLITS)
        p.add_argument("--data", help="corpus directory")
        p.add_argument("--ckpt", help="model checkpoint")
        p.add_argument("--scores", help="score file")
        if name == "gradcheck":
            p.add_argument("--seeds", type=int, default=5, help="random seeds per operator")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s level=%(levelname)s %(message)s", force=True)
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - reported as a single line
        msg = " ".join(str(exc).split())
        print(f"error: command={args.command} type={type(exc).__name__} message={msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
