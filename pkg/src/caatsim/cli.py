"""Command-line surface: train, infer, perfmodel, commstats.

Exit codes: 0 success, 1 runtime failure (training divergence), 2 usage
or configuration error. Every run writes its resolved configuration
before any compute starts, and every artifact except the timestamped
run manifest is a pure function of flags plus seed, so rerunning a
command overwrites its outputs byte-identically.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from dataclasses import fields

import numpy as np

from caatsim import perf
from caatsim.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from caatsim.collectives import CommLedger
from caatsim.inference import greedy_generate, logical_device_inference, ranked_logits
from caatsim.training import DivergenceError, TrainConfig, metrics_csv, run_training

__all__ = ["main"]

_TRAIN_FLAGS = {
    # flag/config-file key -> TrainConfig field
    "p": "p",
    "tp": "tp",
    "layers": "layers",
    "hidden": "hidden",
    "heads": "heads",
    "seq_len": "seq_len",
    "batch": "batch",
    "steps": "steps",
    "lr": "lr",
    "seed": "seed",
    "placement": "placement",
    "scale_private": "scale_private",
    "accum": "accum",
    "mask": "mask",
    "data": "data",
    "synthetic": "synthetic",
    "out": "out",
    "eval_every": "eval_every",
    "vocab": "vocab",
    "synthetic_len": "synthetic_len",
    "weight_decay": "weight_decay",
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (DivergenceError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="caatsim",
        description="Simulated tensor-parallel transformer training with "
        "partial channel-reduce collectives",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="run a training experiment")
    tr.add_argument("--config", help="key=value config file; flags override it")
    tr.add_argument("--p", type=float)
    tr.add_argument("--tp", type=int, help="tensor-parallel rank count")
    tr.add_argument("--layers", type=int)
    tr.add_argument("--hidden", type=int)
    tr.add_argument("--heads", type=int)
    tr.add_argument("--seq-len", type=int, dest="seq_len")
    tr.add_argument("--batch", type=int)
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--placement", choices=["g", "h"])
    tr.add_argument("--scale-private", choices=["on", "off"], dest="scale_private")
    tr.add_argument("--accum", choices=["full64", "emulated16"])
    tr.add_argument("--mask", choices=["none", "topk", "random"])
    tr.add_argument("--data", help="path to a byte-level corpus")
    tr.add_argument("--synthetic", action="store_true", default=None,
                    help="train on seeded uniform tokens instead of a corpus")
    tr.add_argument("--out", help="output directory (required)")
    tr.add_argument("--eval-every", type=int, dest="eval_every")
    tr.add_argument("--vocab", type=int)
    tr.add_argument("--synthetic-len", type=int, dest="synthetic_len")
    tr.add_argument("--weight-decay", type=float, dest="weight_decay")
    tr.set_defaults(func=cmd_train)

    inf = sub.add_parser("infer", help="greedy generation from a checkpoint")
    inf.add_argument("--ckpt", required=True, help="checkpoint directory")
    inf.add_argument("--prompt-bytes", default="the ", dest="prompt_bytes")
    inf.add_argument("--max-new", type=int, default=32, dest="max_new")
    inf.add_argument("--ranked", action="store_true",
                     help="simulate the multi-rank execution instead of "
                     "logical-device inference")
    inf.add_argument("--check-logical", action="store_true", dest="check_logical",
                     help="compare logical-device against multi-rank execution")
    inf.set_defaults(func=cmd_infer)

    pm = sub.add_parser("perfmodel", help="analytic compute/communication model")
    pm.add_argument("--h", type=float, required=True, help="hidden size")
    pm.add_argument("--s", type=float, required=True, help="sequence length")
    pm.add_argument("--r", type=float, required=True, help="tensor-parallel dimension")
    pm.add_argument("--C", type=float, required=True, dest="c",
                    help="compute capacity in FLOPs per communicated element")
    pm.add_argument("--p", type=float, help="synchronization factor")
    pm.add_argument("--sweep", action="store_true", help="sweep p from 0 to 1")
    pm.add_argument("--csv", help="write the sweep to this file")
    pm.set_defaults(func=cmd_perfmodel)

    cs = sub.add_parser("commstats", help="communication totals and reductions")
    cs.add_argument("--run", help="training output directory to analyze")
    cs.add_argument("--p", type=float, help="analytic-only synchronization factor")
    cs.set_defaults(func=cmd_commstats)
    return parser


def cmd_train(args) -> int:
    settings: dict = {}
    if args.config:
        settings.update(_read_kv_file(args.config))
    for key in _TRAIN_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if "seed" not in settings and os.environ.get("CAAT_SEED"):
        settings["seed"] = int(os.environ["CAAT_SEED"])
    if "scale_private" in settings and isinstance(settings["scale_private"], str):
        settings["scale_private"] = settings["scale_private"] == "on"
    out_dir = settings.pop("out", None)
    if out_dir is None:
        raise ValueError("train needs --out DIR")
    if "data" not in settings and not settings.get("synthetic"):
        raise ValueError("train needs --data PATH or --synthetic")

    unknown = set(settings) - set(_TRAIN_FLAGS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    config = TrainConfig(**{_TRAIN_FLAGS[k]: v for k, v in settings.items()}, out=out_dir)
    config.validate()

    os.makedirs(out_dir, exist_ok=True)
    resolved = _resolved_config_text(config)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
        f.write(resolved)
    run_id = hashlib.sha256(resolved.encode()).hexdigest()[:12]
    with open(os.path.join(out_dir, "run.txt"), "w", encoding="utf-8") as f:
        f.write(f"run_id={run_id}\nout={out_dir}\nstarted_unix={time.time()!r}\n")

    result = run_training(config)

    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(metrics_csv(result.rows))
    with open(os.path.join(out_dir, "ledger.csv"), "w", encoding="utf-8") as f:
        f.write(result.ledger.to_csv())
    save_checkpoint(
        result.model, result.opt_state, config.steps, config,
        os.path.join(out_dir, "checkpoint"),
    )
    print(f"run {run_id}: final val_loss={result.final_val_loss!r}")
    return 0


def cmd_infer(args) -> int:
    if not os.path.isdir(args.ckpt):
        raise CheckpointError(f"checkpoint directory {args.ckpt!r} not found")
    model, _, _, config = load_checkpoint(args.ckpt)
    prompt = np.frombuffer(args.prompt_bytes.encode("utf-8"), dtype=np.uint8)
    prompt = prompt.astype(np.int64)
    if prompt.size == 0:
        raise ValueError("empty prompt")
    if prompt.max() >= model.vocab:
        raise ValueError(f"prompt byte exceeds vocab {model.vocab}")
    window = prompt[-model.max_seq :].reshape(1, -1)
    if args.check_logical:
        ledger = CommLedger()
        ranked = ranked_logits(model, window, ledger)
        logical_ledger = CommLedger()
        logical = logical_device_inference(model, window, logical_ledger)
        diff = float(np.max(np.abs(ranked - logical)))
        print(f"max_diff={0 if diff == 0.0 else diff!r}")
        print(f"ranked_comm_elems={ledger.elements()}")
        print(f"logical_comm_elems={logical_ledger.elements()}")
        return 0
    out = greedy_generate(model, prompt, args.max_new, logical=not args.ranked)
    print(" ".join(str(t) for t in out))
    return 0


def cmd_perfmodel(args) -> int:
    if args.sweep or args.csv:
        csv = perf.sweep_csv(args.h, args.s, args.r, args.c)
        if args.csv:
            with open(args.csv, "w", encoding="utf-8") as f:
                f.write(csv)
        else:
            print(csv, end="")
        return 0
    if args.p is None:
        raise ValueError("perfmodel needs --p or --sweep")
    g = perf.gemm_ops(args.h, args.s, args.r)
    print(f"G={g!r}")
    print(f"P={perf.payload(args.h, args.s, args.p)!r}")
    print(f"T={perf.total_time(args.h, args.s, args.r, args.c, args.p)!r}")
    print(f"speedup={perf.speedup(args.h, args.s, args.r, args.c, args.p)!r}")
    print(f"p_star={perf.optimal_p(args.h, args.s, args.r, args.c)!r}")
    return 0


def cmd_commstats(args) -> int:
    if args.run is None:
        if args.p is None:
            raise ValueError("commstats needs --run DIR or --p")
        caat, mask = perf.mask_comm_reduction(args.p)
        print(f"analytic_caat_reduction={caat!r}")
        print(f"analytic_mask_reduction={mask!r}")
        return 0

    config = _read_kv_file(os.path.join(args.run, "config.txt"))
    ledger_rows = _read_ledger_csv(os.path.join(args.run, "ledger.csv"))
    h = int(config["hidden"])
    p = float(config["p"])
    masked = config.get("mask", "none") != "none"
    c = int(np.floor(h * p)) if not masked else h
    keep = int(np.floor(h * p))

    def total(kind, pass_=None):
        return sum(
            elems for k, pa, _, elems, _ in ledger_rows
            if k == kind and (pass_ is None or pa == pass_)
        )

    if masked:
        rs, ag = total("reduce_scatter"), total("all_gather")
        bwd_ar = total("all_reduce", "backward")
        measured = rs + ag + bwd_ar
        baseline = (rs // keep) * h + ag + bwd_ar if keep else 2 * ag + bwd_ar
    else:
        measured = total("partial_reduce")
        if c:
            baseline = (measured // c) * h
        else:
            # p=0 logs nothing per layer reduce; the head all-reduce moves
            # 2*T*h per step, and the p=1 layer traffic would be twice
            # that per layer (two sync points, 2*T*h each)
            baseline = 2 * int(config["layers"]) * total("all_reduce", "forward")
    reduction = 0.0 if baseline == 0 else 1.0 - measured / baseline
    caat, mask = perf.mask_comm_reduction(p)
    print(f"tp_reduce_elements={measured}")
    print(f"baseline_elements={baseline}")
    print(f"measured_reduction={reduction!r}")
    print(f"analytic_caat_reduction={caat!r}")
    print(f"analytic_mask_reduction={mask!r}")
    print(f"total_elements={sum(r[3] for r in ledger_rows)}")
    # bytes view converts each row at its recorded wire width
    print(f"total_bytes={sum(elems * bits // 8 for _, _, bits, elems, _ in ledger_rows)}")
    return 0


def _resolved_config_text(config: TrainConfig) -> str:
    lines = []
    for f_ in fields(TrainConfig):
        lines.append(f"{f_.name}={getattr(config, f_.name)}")
    return "\n".join(lines) + "\n"


def _read_kv_file(path: str) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed line {line!r}")
            out[key.strip().replace("-", "_")] = _coerce(value.strip())
    return out


def _read_ledger_csv(path: str) -> list[tuple]:
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "kind,pass,precision,elements_per_rank,calls":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            kind, pass_, bits, elems, calls = line.strip().split(",")
            rows.append((kind, pass_, int(bits), int(elems), int(calls)))
    return rows


def _coerce(value: str):
    if value == "None":
        return None
    if value in ("True", "true", "on"):
        return True
    if value in ("False", "false", "off"):
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value


if __name__ == "__main__":
    sys.exit(main())
