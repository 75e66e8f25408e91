"""Command-line entry point (``malt``).

Metric CSV schema (``metrics.csv`` and the per-run files written by ``ablate``)::

    run,segment,psnr,mse,recall,n_params,memory_bytes

one row per (run, segment index) in increasing segment order. PSNR is in dB
(``inf`` for an exact match), recall is the cue-colour accuracy of the recall
probe (``nan`` for drift runs), memory_bytes is the conditioning-memory size
after the previous segment. Wall-clock timings go to ``timing.json``.

``ablate`` also writes ``ablation.csv`` with one row per (mode, seed)::

    run,seed,mode,robust,recall,gap,first_psnr,last_psnr

where the columns that do not apply to the probe are ``nan``.

Frame grids are binary PPM (P6) images, one row per video and one column per
frame.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..diffusion import MEMORY_MODES, MemoryBudgetError
from ..numerics import ContractError, ShapeError
from ..sampling import ConfigurationError
from . import checkpoint as ckpt
from . import experiments as ex
from .config import RunConfig, load_config
from .metrics import MetricsRecord, write_metrics_csv
from .plots import plot_bars, plot_curves

EXIT_USAGE = 2
ABLATION_FIELDS = ("run", "seed", "mode", "robust", "recall", "gap", "first_psnr", "last_psnr")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return v


def _common(p: argparse.ArgumentParser, needs_ckpt: bool = False):
    p.add_argument("--config", type=Path, help="run config (JSON); defaults to the built-in probe preset")
    p.add_argument("--seed", type=_u64, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    if needs_ckpt:
        p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint from `train`")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="malt", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-codec", help="fit the latent codec on probe videos")
    _common(p)

    p = sub.add_parser("train", help="train the memory-conditioned denoiser")
    _common(p)
    p.add_argument("--codec", type=Path, help="codec checkpoint (trained into OUT/codec if omitted)")
    p.add_argument("--steps", type=int, help="stop after this many global steps (resumable)")
    p.add_argument("--no-resume", action="store_true", help="ignore an existing OUT/model.ckpt")

    p = sub.add_parser("sample", help="generate long videos from scratch")
    _common(p, needs_ckpt=True)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--segments", type=int, default=None, help="defaults to the training N")

    p = sub.add_parser("predict", help="continue ground-truth prefixes and score them")
    _common(p, needs_ckpt=True)

    p = sub.add_parser("ablate", help="train and evaluate several memory modes")
    _common(p)
    p.add_argument("--modes", default=",".join(MEMORY_MODES),
                   help="comma-separated subset of " + ",".join(MEMORY_MODES))
    p.add_argument("--robust", choices=("on", "off", "both"), default=None,
                   help="robust-training switch (default: as in the config)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed or config seed)")
    p.add_argument("--codec", type=Path)

    p = sub.add_parser("curve", help="per-segment error propagation of drift rollouts")
    _common(p)
    p.add_argument("--checkpoint", type=Path, action="append", required=True,
                   help="repeatable; one curve per checkpoint")

    p = sub.add_parser("inspect", help="describe a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return replace(cfg, out=str(args.out))


def _from_checkpoint(args):
    cfg_arg = _config(args) if args.config else None
    cfg, model, _, codec, step = ex.load_model(args.checkpoint, cfg_arg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg, model, codec, step


def _log(msg: str):
    print(msg, flush=True)


def cmd_train_codec(args):
    cfg = _config(args)
    _, info = ex.run_train_codec(cfg, args.out, _log)
    (args.out / "config.json").write_text(cfg.to_json())


def _codec_for(args, cfg):
    if getattr(args, "codec", None):
        return ex.load_codec(args.codec, cfg)
    path = args.out / "codec" / "codec.ckpt"
    if path.exists():
        return ex.load_codec(path, cfg)
    return ex.run_train_codec(cfg, args.out / "codec", _log)[0]


def cmd_train(args):
    cfg = _config(args)
    codec = _codec_for(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.json").write_text(cfg.to_json())
    _, hist = ex.run_train(cfg, codec, args.out, steps=args.steps, resume=not args.no_resume, log=_log)
    _log(f"wrote {args.out / 'model.ckpt'} ({len(hist)} steps)")


def cmd_sample(args):
    cfg, model, codec, _ = _from_checkpoint(args)
    n_seg = args.segments or cfg.probe.N
    if args.videos < 1 or n_seg < 1:
        raise UsageError("--videos and --segments must be >= 1")
    args.out.mkdir(parents=True, exist_ok=True)
    frames = ex.sample_run(cfg, model, codec, args.videos, n_seg, args.out)
    mem = ex.memory_bytes_per_segment(cfg, model, n_seg)
    L = cfg.probe.L
    recs = [MetricsRecord(cfg.name, s + 1, mse=float(np.mean(frames[:, s * L:(s + 1) * L])),
                          n_params=model.num_parameters(), memory_bytes=mem.get(s, 0))
            for s in range(n_seg)]
    write_metrics_csv(args.out / "metrics.csv", recs)
    _log(f"wrote {args.out / 'samples.ppm'}")


def cmd_predict(args):
    cfg, model, codec, _ = _from_checkpoint(args)
    records, detail = ex.evaluate(cfg, model, codec)
    ex.write_eval(args.out, cfg, records, detail)
    if cfg.dataset == "recall":
        _log(f"recall accuracy {detail['recall']:.3f}")
    else:
        plot_curves({cfg.name: detail["rows"]}, args.out / "curve.png")
        _log(f"first-to-last PSNR gap {detail['gap']:.3f} dB")


def _parse_list(text: str, conv=str) -> list:
    return [conv(x) for x in text.split(",") if x.strip()]


def cmd_ablate(args):
    cfg = _config(args)
    modes = _parse_list(args.modes)
    bad = [m for m in modes if m not in MEMORY_MODES]
    if bad or not modes:
        raise UsageError(f"unknown modes {bad}; choose from {MEMORY_MODES}")
    robust = {"on": [True], "off": [False], "both": [True, False], None: [cfg.ablation.robust]}[args.robust]
    seeds = _parse_list(args.seeds, _u64) if args.seeds else [cfg.seed]
    codec = ex.load_codec(args.codec, cfg) if args.codec else _codec_for(args, cfg)
    results = ex.run_ablation(cfg, [(m, r) for m in modes for r in robust], args.out, codec, seeds, log=_log)
    key = "recall" if cfg.dataset == "recall" else "gap"
    with open(args.out / "ablation.csv", "w") as fh:
        fh.write(",".join(ABLATION_FIELDS) + "\n")
        for tag, runs in results.items():
            for r in runs:
                vals = [r.get(k, float("nan")) for k in ("recall", "gap", "first_psnr", "last_psnr")]
                fh.write(f"{tag},{r['seed']},{r['mode']},{int(r['robust'])},{','.join(map(repr, vals))}\n")
    means = {tag: float(np.mean([r[key] for r in runs])) for tag, runs in results.items()}
    plot_bars(means, args.out / "ablation.png", key, f"{cfg.dataset} probe")
    if cfg.dataset == "drift":
        plot_curves({f"{t}-seed{r['seed']}": r["rows"] for t, runs in results.items() for r in runs},
                    args.out / "curves.png")
    for tag, v in means.items():
        _log(f"{tag}: mean {key} {v:.4f}")


def cmd_curve(args):
    curves = {}
    rows = []
    for i, path in enumerate(args.checkpoint):
        cfg, model, _, codec, _ = ex.load_model(path)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        cfg = replace(cfg, dataset="drift")
        c = ex.evaluate_drift(cfg, model, codec)
        name = f"{i}:{cfg.name}"
        curves[name] = c["rows"]
        rows += [MetricsRecord(name, r["segment"], r["psnr"], r["mse"], n_params=model.num_parameters())
                 for r in c["rows"]]
        _log(f"{name}: gap {c['gap']:.3f} dB (first {c['first_psnr']:.2f}, last {c['last_psnr']:.2f})")
    args.out.mkdir(parents=True, exist_ok=True)
    rows.sort(key=lambda r: r.segment)
    write_metrics_csv(args.out / "curve.csv", rows)
    plot_curves(curves, args.out / "curve.png")


def cmd_inspect(args):
    header, tensors = ckpt.load(args.checkpoint)
    info = {"header": header,
            "tensors": {k: list(v.shape) for k, v in sorted(tensors.items())},
            "n_values": int(sum(v.size for v in tensors.values()))}
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "inspect.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    print(json.dumps({"kind": header.get("kind"), "step": header.get("step"),
                      "n_tensors": len(tensors), "n_values": info["n_values"]}))


COMMANDS = {"train-codec": cmd_train_codec, "train": cmd_train, "sample": cmd_sample,
            "predict": cmd_predict, "ablate": cmd_ablate, "curve": cmd_curve, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as e:
        print(f"malt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ckpt.CheckpointError, ContractError, ShapeError, MemoryBudgetError, FloatingPointError,
            OSError) as e:
        print(f"malt {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
