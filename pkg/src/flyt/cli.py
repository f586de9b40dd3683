"""Command-line entry point.

Exit status: 0 on success, 1 when ``gradcheck`` finds a mismatch, 2 for usage
errors and unusable inputs, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import storage
from .data import SyntheticPoolSpec, generate_downstream, generate_pool
from .exceptions import FormatError, InvalidInputError, NumericalError
from .gradcheck import gradcheck_report
from .mixing import ScoreTable, aggregate_sum, apply_mixer, in_weighted, mixer_init, train_mixer
from .sampling import hcs_sample, nocap_sample, repetition_histogram, scs_sample, threshold_select
from .training import TrainConfig, score_pool, train_flyt

log = logging.getLogger("flyt")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of flag values; explicit flags win")
    p.add_argument("--output", "-o", help="output file or directory")
    p.add_argument("--threads", type=int, help="cap on internal threads")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def _train_flags(p):
    d = TrainConfig()
    p.add_argument("--pool", required=True, help="binary pool file")
    p.add_argument("--downstream", required=True, help="downstream .npz file")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--downstream-batch-size", type=int, default=d.downstream_batch_size)
    p.add_argument("--scoring-lr", type=float, default=d.scoring_lr)
    p.add_argument("--reference-lr", type=float, default=d.reference_lr)
    p.add_argument("--warmup-steps", type=int, default=d.warmup_steps)
    p.add_argument("--schedule", choices=("cosine", "constant"), default=d.schedule)
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default=d.optimizer)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--loss", dest="downstream_loss", choices=("ce", "ce_temperature", "clip"), default=d.downstream_loss)
    p.add_argument("--d-emb", type=int, default=d.d_emb)
    p.add_argument("--chunk-size", type=int, default=None)
    p.add_argument("--reference-init", help="reference model checkpoint (JSON) to start from")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="flyt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flyt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-pool", parents=[common], help="generate a synthetic pool and downstream task")
    p.add_argument("--size", type=int, default=20000)
    p.add_argument("--d-in", type=int, default=16)
    p.add_argument("--corruption", type=float, default=0.3)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--downstream-size", type=int, default=2000)
    p.add_argument("--templates-per-class", type=int, default=4)

    p = sub.add_parser("train-flyt", parents=[common], help="train a scoring model on pool features")
    _train_flags(p)
    p.add_argument("--scorer", choices=("gated_mlp", "linear"), default="gated_mlp")

    p = sub.add_parser("train-mixer", parents=[common], help="train a linear mixer over score columns")
    _train_flags(p)
    p.add_argument("--scores", required=True, help="score table CSV")
    p.add_argument("--columns", help="comma-separated subset of columns to mix")

    p = sub.add_parser("mix-baseline", parents=[common], help="aggregate score columns without training")
    p.add_argument("--scores", required=True)
    p.add_argument("--mode", choices=("sum", "std-sum", "in-weighted"), required=True)
    p.add_argument("--ratio", type=float, default=8.0)
    p.add_argument("--accuracies", help="comma-separated accuracy per column (in-weighted mode)")

    p = sub.add_parser("sample", parents=[common], help="build a manifest from a score column")
    p.add_argument("--scores", required=True)
    p.add_argument("--column")
    p.add_argument("--method", choices=("scs", "hcs", "nocap", "threshold"), required=True)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--beta", type=int, default=10)
    p.add_argument("--N", dest="n", type=int, help="manifest size (default: table size)")
    p.add_argument("--G", dest="g", type=int, default=100_000)
    p.add_argument("--p", dest="fraction", type=float, default=0.2)
    p.add_argument("--histogram", help="also write the repetition histogram JSON here")

    p = sub.add_parser("stats", parents=[common], help="repetition histogram of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ground-truth", help="uid,corrupt CSV; adds the corrupt fraction of the manifest")

    p = sub.add_parser("gradcheck", parents=[common], help="check meta-gradients against finite differences")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--scorer", choices=("linear", "gated_mlp"), default="linear")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        with open(known.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"cannot read config {known.config}: {err}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    for subparser in parser._subparsers._group_actions[0].choices.values():
        dests = {a.dest for a in subparser._actions}
        subparser.set_defaults(**{k: v for k, v in cfg.items() if k in dests})
        for action in subparser._actions:
            if action.dest in cfg:
                action.required = False


def _effective(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}


def _require_output(args):
    if not args.output:
        raise UsageError("--output is required for this command")
    return Path(args.output)


def _out_dir(args) -> Path:
    out = _require_output(args)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _meta_sidecar(path: Path, meta: dict):
    storage.write_json(meta, path.with_name(path.name + ".meta.json"))


def _train_config(args, scorer) -> TrainConfig:
    return TrainConfig(
        steps=args.steps, batch_size=args.batch_size, downstream_batch_size=args.downstream_batch_size,
        scoring_lr=args.scoring_lr, reference_lr=args.reference_lr, warmup_steps=args.warmup_steps,
        schedule=args.schedule, optimizer=args.optimizer, weight_decay=args.weight_decay,
        downstream_loss=args.downstream_loss, scorer=scorer, d_emb=args.d_emb, chunk_size=args.chunk_size,
        data_seed=args.seed, template_seed=args.seed + 1, init_seed=args.seed + 2,
    )


def cmd_gen_pool(args, meta):
    out = _out_dir(args)
    spec = SyntheticPoolSpec(args.size, args.d_in, args.corruption, args.classes, args.noise, args.seed)
    pool, corrupt = generate_pool(spec)
    storage.write_pool(pool, out / "pool.bin")
    storage.write_ground_truth(pool.uids, corrupt, out / "ground_truth.csv")
    storage.write_downstream(generate_downstream(spec, args.downstream_size, args.templates_per_class),
                             out / "downstream.npz")
    storage.write_json(meta, out / "meta.json")


def _load_training_inputs(args):
    pool = storage.read_pool(args.pool)
    downstream = storage.read_downstream(args.downstream)
    reference = storage.load_reference(args.reference_init) if args.reference_init else None
    return pool, downstream, reference


def cmd_train_flyt(args, meta):
    out = _out_dir(args)
    pool, downstream, reference = _load_training_inputs(args)
    config = _train_config(args, args.scorer)
    meta = dict(meta, train_config=config.to_dict())
    result = train_flyt(config, pool, downstream, reference=reference)
    storage.save_scoring(result.scoring, out / "scoring.json", meta)
    storage.save_reference(result.reference, out / "reference.json", meta)
    storage.write_log(result.log, out / "train_log.jsonl")
    storage.write_score_table(score_pool(result.scoring, pool), out / "scores.csv")
    storage.write_json(meta, out / "meta.json")


def cmd_train_mixer(args, meta):
    out = _out_dir(args)
    pool, downstream, reference = _load_training_inputs(args)
    table = storage.read_score_table(args.scores)
    names = table.names if not args.columns else [c.strip() for c in args.columns.split(",")]
    scoring = mixer_init(table, names)
    config = _train_config(args, "linear")
    meta = dict(meta, train_config=config.to_dict())
    result = train_mixer(table, pool, downstream, config, scoring=scoring, reference=reference)
    storage.save_scoring(result.scoring, out / "scoring.json", meta)
    storage.save_reference(result.reference, out / "reference.json", meta)
    storage.write_log(result.log, out / "train_log.jsonl")
    storage.write_score_table(apply_mixer(result.scoring, table), out / "scores.csv")
    storage.write_json(meta, out / "meta.json")


def cmd_mix_baseline(args, meta):
    out = _require_output(args)
    table = storage.read_score_table(args.scores)
    extra = {}
    if args.mode == "sum":
        result = aggregate_sum(table)
    elif args.mode == "std-sum":
        result = aggregate_sum(table, standardized=True)
    else:
        if not args.accuracies:
            raise UsageError("--accuracies is required for in-weighted mode")
        try:
            acc = [float(a) for a in args.accuracies.split(",")]
        except ValueError:
            raise UsageError(f"cannot parse --accuracies {args.accuracies!r}") from None
        result, weights = in_weighted(table, acc, args.ratio, return_weights=True)
        extra["weights"] = dict(zip(table.names, weights.tolist()))
    storage.write_score_table(result, out)
    _meta_sidecar(out, dict(meta, **extra))


def cmd_sample(args, meta):
    out = _require_output(args)
    table = storage.read_score_table(args.scores)
    n = len(table) if args.n is None else args.n
    if args.method == "scs":
        manifest = scs_sample(table, args.alpha, n, args.g, args.seed, args.column)
    elif args.method == "hcs":
        manifest = hcs_sample(table, args.beta, n, args.seed, args.column)
    elif args.method == "nocap":
        manifest = nocap_sample(table, n, args.seed, args.column)
    else:
        manifest = threshold_select(table, args.fraction, args.column)
    storage.write_manifest(manifest, out)
    _meta_sidecar(out, meta)
    if args.histogram:
        Path(args.histogram).write_text(storage.histogram_to_json(repetition_histogram(manifest)) + "\n")


def cmd_stats(args, meta):
    manifest = storage.read_manifest(args.manifest)
    hist = repetition_histogram(manifest)
    text = storage.histogram_to_json(hist)
    if args.ground_truth:
        uids, corrupt = storage.read_ground_truth(args.ground_truth)
        flag = dict(zip(uids, corrupt))
        missing = [u for u in manifest.uids if u not in flag]
        if missing:
            raise UsageError(f"manifest uid {missing[0]!r} not in ground truth")
        frac = float(np.mean([flag[u] for u in manifest.uids])) if len(manifest) else 0.0
        log.info("corrupt fraction %.6f over %d entries", frac, len(manifest))
        print(json.dumps({"corrupt_fraction": frac, "size": len(manifest)}))
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)


def cmd_gradcheck(args, meta):
    report = gradcheck_report(seeds=range(args.seed, args.seed + args.seeds), scorer=args.scorer,
                              step=args.step, tolerance=args.tolerance)
    report["meta"] = meta
    if args.output:
        storage.write_json(report, args.output)
    print(json.dumps({"passed": report["passed"], "max_relative_error": report["max_relative_error"]}))
    return 0 if report["passed"] else 1


COMMANDS = {
    "gen-pool": cmd_gen_pool,
    "train-flyt": cmd_train_flyt,
    "train-mixer": cmd_train_mixer,
    "mix-baseline": cmd_mix_baseline,
    "sample": cmd_sample,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as err:
        print(f"flyt: error: {err}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    effective = _effective(args)
    print(json.dumps(effective, sort_keys=True, default=str), file=sys.stderr)
    meta = storage.run_meta(effective)
    try:
        return COMMANDS[args.command](args, meta) or 0
    except NumericalError as err:
        print(f"flyt: numerical failure in {err.stage}: {err}", file=sys.stderr)
        return 3
    except (UsageError, InvalidInputError, FormatError, FileNotFoundError, IsADirectoryError) as err:
        print(f"flyt: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
