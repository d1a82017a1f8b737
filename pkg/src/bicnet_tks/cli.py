"""Command line entry point.

Machine-readable JSON goes to stdout, human logs to stderr. Exit codes:
0 success, 1 configuration error, 2 input/data error, 3 gradient
verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import cost_fraction, count_flops, count_params, format_table, full_report
from .bicnet import build_model, split_segment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, preset
from .gradcheck import DEFAULT_TOLERANCE, GradCheckError, STANDARD_CHECKS, run_suite
from .images import resize_bilinear, save_pgm
from .synthdata import SynthDataset, generate_dataset, sample_segment
from .tensor import ConfigError, InputError
from .traineval import (
    Classifier,
    NonFiniteLossError,
    evaluate_retrieval,
    extract_split_features,
    train,
)


def log(message: str):
    print(message, file=sys.stderr)


def emit(payload: dict):
    print(json.dumps(payload, indent=2, sort_keys=True))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # config errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"error: {message}\n")


def _add_config_options(sub):
    sub.add_argument("--config", help="run-config JSON file")
    sub.add_argument("--preset", choices=("resnet50", "mini"), help="built-in configuration")
    sub.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub.add_argument("--print-config", action="store_true",
                     help="print the effective config JSON and exit")
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (execution is deterministic regardless)")


def _resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("pass either --config or --preset, not both")
    if args.config:
        cfg = RunConfig.from_file(args.config)
    else:
        cfg = preset(args.preset or "mini")
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None):
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    cfg.validate()
    return cfg


def _maybe_print_config(args, cfg: RunConfig) -> bool:
    if args.print_config:
        print(cfg.to_json())
        return True
    return False


def _parse_res(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ConfigError(f"bad resolution '{text}', expected HxW like 256x128") from e


def _model_rng(seed: int):
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    res = _parse_res(args.res)
    log(f"generating {args.ids} identities x {args.cams} cameras x {args.len} frames at {res}")
    dataset = generate_dataset(args.ids, args.cams, args.len, args.seed, args.out, resolution=res)
    emit({
        "root": str(args.out),
        "num_identities": args.ids,
        "num_tracklets": len(dataset.tracklets),
        "resolution": list(res),
        "seed": args.seed,
    })
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    data_root = args.data or cfg.data.root
    dataset = SynthDataset.load(data_root)
    rng = _model_rng(cfg.seed)
    model = build_model(cfg.model, rng=rng)
    classifier = Classifier(model.feature_dim, len(dataset.identity_ids()), rng=rng)
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.jsonl")
    log(f"training for {args.epochs or cfg.train.epochs} epochs on {data_root}")
    with open(metrics_path, "w") as fh:
        history = train(model, classifier, dataset, cfg, log_stream=fh, epochs=args.epochs)
    checkpoint_dir = os.path.join(args.out, "checkpoint")
    save_checkpoint(checkpoint_dir, {"model": model, "classifier": classifier})
    emit({
        "epochs": len(history),
        "final": history[-1],
        "metrics_file": metrics_path,
        "checkpoint": checkpoint_dir,
    })
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    dataset = SynthDataset.load(args.data or cfg.data.root)
    model = build_model(cfg.model, rng=_model_rng(cfg.seed))
    if args.checkpoint:
        load_checkpoint(args.checkpoint, {"model": model}, strict=False)
    model.eval()
    log("extracting query/gallery features")
    q_feats, q_labels, g_feats, g_labels = extract_split_features(model, dataset)
    result = evaluate_retrieval(q_feats, q_labels, g_feats, g_labels)
    emit(result.to_dict())
    return 0


def cmd_flops(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    model_cfg = cfg.model
    if args.res:
        report = count_flops(model_cfg, _parse_res(args.res))
    else:
        report = full_report(model_cfg, alpha=args.alpha)
    if args.table:
        print(format_table(report, model_cfg))
    else:
        payload = report.to_dict()
        payload["cost_fraction"] = cost_fraction(args.alpha if args.alpha is not None else model_cfg.alpha)
        emit(payload)
    return 0


def cmd_params(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    report = count_params(cfg.model)
    if args.table:
        print(format_table(report, cfg.model))
    else:
        emit(report.to_dict())
    return 0


def cmd_gradcheck(args) -> int:
    if args.all or not args.checks:
        names = None
    else:
        names = [n.strip() for n in args.checks.split(",")]
    log(f"running gradient checks (seed {args.seed})")
    results = run_suite(seed=args.seed, names=names, tolerance=args.tolerance)
    emit(results)
    if all(entry["ok"] for entry in results.values()):
        return 0
    log("gradient verification FAILED")
    return 3


def cmd_attn_dump(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    dataset = SynthDataset.load(args.data or cfg.data.root)
    model = build_model(cfg.model, rng=_model_rng(cfg.seed))
    if args.checkpoint:
        load_checkpoint(args.checkpoint, {"model": model}, strict=False)
    model.eval()
    if not 0 <= args.tracklet < len(dataset.tracklets):
        raise InputError(f"tracklet index {args.tracklet} out of range")
    track = dataset.tracklets[args.tracklet]
    rng = np.random.default_rng(cfg.seed)
    seg = sample_segment(dataset.frames(track), cfg.model.segment_len,
                         cfg.train.sample_stride, rng)
    seg = resize_bilinear(seg, *cfg.model.big_res)
    _, _, diag = model.forward(split_segment(seg, cfg.model.alpha))

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "attention.csv")
    files = []
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "branch", "h", "w", "value"])
        for branch, maps in sorted(diag.attention.items()):
            for amap in maps:
                values = amap.values.data
                name = f"attn_{branch}_frame{amap.frame_index}.pgm"
                save_pgm(os.path.join(args.out, name), values)
                files.append(name)
                for (h, w), value in np.ndenumerate(values):
                    writer.writerow([amap.frame_index, branch, h, w, f"{value:.8e}"])
    emit({"out": args.out, "csv": csv_path, "pgm_files": files, "tracklet": args.tracklet})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="bicnet-tks", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("gen-data", help="generate the synthetic dataset")
    sub.add_argument("--ids", type=int, default=20)
    sub.add_argument("--cams", type=int, default=2)
    sub.add_argument("--len", type=int, default=64)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True)
    sub.add_argument("--res", default="64x32")
    sub.set_defaults(func=cmd_gen_data)

    sub = subs.add_parser("train", help="train on a generated dataset")
    _add_config_options(sub)
    sub.add_argument("--data", help="dataset root (defaults to the config's data.root)")
    sub.add_argument("--out", default="runs/train")
    sub.add_argument("--epochs", type=int, default=None)
    sub.set_defaults(func=cmd_train)

    sub = subs.add_parser("eval", help="retrieval evaluation on the query/gallery split")
    _add_config_options(sub)
    sub.add_argument("--data")
    sub.add_argument("--checkpoint")
    sub.set_defaults(func=cmd_eval)

    sub = subs.add_parser("flops", help="static FLOPs report")
    _add_config_options(sub)
    sub.add_argument("--res", help="price one frame through the backbone at HxW")
    sub.add_argument("--alpha", type=int, default=None)
    sub.add_argument("--table", action="store_true")
    sub.set_defaults(func=cmd_flops)

    sub = subs.add_parser("params", help="static parameter-count report")
    _add_config_options(sub)
    sub.add_argument("--table", action="store_true")
    sub.set_defaults(func=cmd_params)

    sub = subs.add_parser("gradcheck", help="finite-difference verification suite")
    sub.add_argument("--all", action="store_true")
    sub.add_argument("--checks", help=f"comma list from: {', '.join(STANDARD_CHECKS)}")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    sub.set_defaults(func=cmd_gradcheck)

    sub = subs.add_parser("attn-dump", help="dump attention maps as PGM + CSV")
    _add_config_options(sub)
    sub.add_argument("--data")
    sub.add_argument("--checkpoint")
    sub.add_argument("--tracklet", type=int, default=0)
    sub.add_argument("--out", default="runs/attn")
    sub.set_defaults(func=cmd_attn_dump)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        log(f"configuration error: {e}")
        return 1
    except InputError as e:
        log(f"input error: {e}")
        return 2
    except GradCheckError as e:
        log(f"gradient verification failure: {e}")
        return 3
    except NonFiniteLossError as e:
        log(f"training aborted: {e}")
        log(f"diagnostic state: {json.dumps(e.state, sort_keys=True)}")
        return 2
    except OSError as e:
        log(f"i/o error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
