"""Pipelines behind the CLI: codec and model training, evaluation, ablations.

Every random draw is keyed off ``RunConfig.seed`` (or ``codec_train.seed``)
through :class:`SeededRng` streams, so a run is a pure function of its config.
Wall-clock numbers are the only exception and are written to ``timing.json``
rather than to CSVs or checkpoints.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..codec import LatentCodec, train_codec
from ..diffusion import KV_CACHE, make_optimizer, make_schedule, training_step
from ..model import MALTDenoiser, memory_nbytes
from ..numerics import SeededRng
from ..sampling import ConfigurationError, check_compatible, generate_long_video, video_prediction
from . import checkpoint as ckpt
from .config import RunConfig
from .datasets import (
    ProbeConfig,
    gen_dataset_drift_probe,
    gen_dataset_recall_probe,
    read_cue,
    render_drift,
)
from .images import frame_grid, write_ppm
from .metrics import MetricsRecord, error_propagation_curve, per_segment_metrics, write_metrics_csv
from .plots import plot_loss

# stream keys under the run seed
_TRAIN_DATA, _EVAL_DATA, _INIT, _BATCH, _SAMPLE = 1, 2, 3, 4, 5


# -- data --------------------------------------------------------------------------------------

def probe_videos(cfg: RunConfig, split: str, n: int | None = None, n_segments: int | None = None,
                 dataset: str | None = None) -> dict:
    dataset = dataset or cfg.dataset
    key = _TRAIN_DATA if split == "train" else _EVAL_DATA
    n = cfg.probe.n_examples if n is None else n
    pc = replace(cfg.probe, n_examples=n)
    rng = SeededRng(cfg.seed, key)
    if dataset == "recall":
        return gen_dataset_recall_probe(pc, rng)
    return gen_dataset_drift_probe(pc, rng, n_segments)


def codec_corpus(cfg: RunConfig) -> np.ndarray:
    """Segment-length chunks from both probes, seeded by ``codec_train.seed``."""
    ct = cfg.codec_train
    pc = replace(cfg.probe, n_examples=ct.n_examples)
    rec = gen_dataset_recall_probe(pc, SeededRng(ct.seed, 11))["video"]
    dr = gen_dataset_drift_probe(pc, SeededRng(ct.seed, 12), cfg.probe.N)["video"]
    L, shp = cfg.probe.L, rec.shape[2:]
    return np.concatenate([rec.reshape(-1, L, *shp), dr.reshape(-1, L, *shp)])


def encode_videos(codec: LatentCodec, videos: np.ndarray, batch: int = 64) -> np.ndarray:
    """(n, N·L, H, W, 3) -> (n, N, l, h, w, c)."""
    out = []
    for i in range(0, len(videos), batch):
        out.append(np.stack(codec.encode_long_video(videos[i:i + batch]), axis=1))
    return np.concatenate(out)


# -- cache -------------------------------------------------------------------------------------

def _source_digest() -> str:
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def cache_key(kind: str, payload: dict) -> str:
    """Digest of the payload and the package source, so stale results are never reused."""
    text = json.dumps({"kind": kind, "payload": payload, "source": _source_digest()}, sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- codec -------------------------------------------------------------------------------------

def codec_header(cfg: RunConfig) -> dict:
    return {"kind": "codec", "codec": cfg.codec.to_dict(), "codec_train": cfg.to_dict()["codec_train"],
            "probe": cfg.probe.to_dict()}


def run_train_codec(cfg: RunConfig, out: Path, log=print) -> tuple[LatentCodec, dict]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = codec_corpus(cfg)
    ct = cfg.codec_train
    t0 = time.perf_counter()
    codec, history = train_codec(data, cfg.codec, SeededRng(ct.seed, 13), steps=ct.steps, lr=ct.lr,
                                 batch_size=ct.batch_size)
    elapsed = time.perf_counter() - t0
    held = {}
    for name in ("recall", "drift"):
        v = probe_videos(replace(cfg, seed=ct.seed + 10_000), "eval", n=64, dataset=name,
                         n_segments=cfg.probe.N)["video"]
        held[name] = codec.reconstruction_mse(v.reshape(-1, cfg.probe.L, *v.shape[2:]))
    header = codec_header(cfg)
    header["step"] = ct.steps
    ckpt.save(out / "codec.ckpt", header, ckpt.prefixed("codec", codec.state_dict()))
    with open(out / "codec_loss.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(history))
    with open(out / "codec_heldout.csv", "w") as fh:
        fh.write("probe,mse\n")
        fh.writelines(f"{k},{v!r}\n" for k, v in held.items())
    plot_loss(history, out / "codec_loss.png", "codec reconstruction loss")
    _write_timing(out, {"train_codec_seconds": elapsed})
    log(f"codec: {ct.steps} steps in {elapsed:.0f}s, held-out MSE " +
        ", ".join(f"{k} {v:.4f}" for k, v in held.items()))
    return codec, {"history": history, "heldout": held, "seconds": elapsed}


def load_codec(path, cfg: RunConfig | None = None) -> LatentCodec:
    header, tensors = ckpt.load(path)
    state = ckpt.strip("codec", tensors)
    if not state:
        raise ckpt.CheckpointError(f"{path} holds no codec tensors")
    from ..codec import CodecConfig
    cc = CodecConfig(**header["codec"]) if "codec" in header else CodecConfig(**header["config"]["codec"])
    if cfg is not None and cc != cfg.codec:
        raise ConfigurationError(f"checkpoint codec {cc} differs from configured {cfg.codec}")
    codec = LatentCodec(cc, SeededRng(0))
    codec.load_state_dict(state)
    return codec


def get_codec(cfg: RunConfig, cache_dir: Path | None, log=print) -> LatentCodec:
    """Train the codec once per (codec config, source) and reuse it from ``cache_dir``."""
    if cache_dir is None:
        return run_train_codec(cfg, Path(cfg.out) / "codec", log)[0]
    d = Path(cache_dir) / f"codec-{cache_key('codec', codec_header(cfg))}"
    if (d / "codec.ckpt").exists():
        return load_codec(d / "codec.ckpt", cfg)
    return run_train_codec(cfg, d, log)[0]


# -- model training ------------------------------------------------------------------------------

def build_model(cfg: RunConfig) -> MALTDenoiser:
    return MALTDenoiser(cfg.model, SeededRng(cfg.seed, _INIT))


def identity(cfg: RunConfig) -> dict:
    """Config as stored in checkpoints and cache keys; the output directory is not part of a run's identity."""
    d = cfg.to_dict()
    d.pop("out", None)
    return d


def model_header(cfg: RunConfig, step: int) -> dict:
    return {"kind": "model", "config": identity(cfg), "step": step}


def save_model(path, cfg: RunConfig, model, opt, codec, step: int) -> Path:
    tensors = {**ckpt.prefixed("model", model.state_dict()), **ckpt.prefixed("opt", opt.state_dict()),
               **ckpt.prefixed("codec", codec.state_dict())}
    return ckpt.save(path, model_header(cfg, step), tensors)


def load_model(path, cfg: RunConfig | None = None):
    """Returns ``(cfg, model, opt, codec, step)``; config mismatches fail before any compute."""
    header, tensors = ckpt.load(path)
    if header.get("kind") != "model":
        raise ConfigurationError(f"{path} is not a model checkpoint (kind={header.get('kind')!r})")
    saved = RunConfig.from_dict(header["config"])
    if cfg is None:
        cfg = saved
    elif saved.model != cfg.model:
        raise ConfigurationError(f"checkpoint model config {saved.model} differs from configured {cfg.model}")
    model = build_model(cfg)
    model.load_state_dict(ckpt.strip("model", tensors))
    opt = make_optimizer(model, cfg.effective_train())
    opt.load_state_dict(ckpt.strip("opt", tensors))
    codec = LatentCodec(saved.codec, SeededRng(0))
    codec.load_state_dict(ckpt.strip("codec", tensors))
    check_compatible(model, codec)
    return cfg, model, opt, codec, int(header["step"])


def train_latents(cfg: RunConfig, codec: LatentCodec) -> np.ndarray:
    return encode_videos(codec, probe_videos(cfg, "train", n_segments=cfg.probe.N)["video"])


def run_train(cfg: RunConfig, codec: LatentCodec, out: Path, steps: int | None = None,
              resume: bool = True, checkpoint_every: int = 500, log=print):
    """Train (or resume) the denoiser; writes ``model.ckpt``, ``loss.csv`` and ``loss.png``.

    ``steps`` stops at that global step count while the learning-rate schedule
    still follows the configured budget, which is how resuming is tested.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.effective_train()
    path = out / "model.ckpt"
    if resume and path.exists():
        _, model, opt, _, start = load_model(path, cfg)
        history = _read_losses(out / "loss.csv")[:start]
    else:
        model = build_model(cfg)
        opt = make_optimizer(model, tc)
        start, history = 0, []
    check_compatible(model, codec)
    latents = train_latents(cfg, codec)
    schedule = make_schedule(cfg.model.timesteps)
    stop = tc.steps if steps is None else min(steps, tc.steps)
    t0 = time.perf_counter()
    for step in range(start, stop):
        idx = SeededRng(cfg.seed, _BATCH, step).integers(0, len(latents), size=tc.batch_size)
        rec = training_step(model, opt, latents[idx], None, tc, schedule, step, budget=tc.steps)
        history.append(rec["loss"])
        done = step + 1
        if done % checkpoint_every == 0 and done != stop:
            save_model(path, cfg, model, opt, codec, done)
            _write_losses(out / "loss.csv", history)
        if done % max(tc.steps // 10, 1) == 0:
            log(f"[{cfg.name}] step {done}/{tc.steps} loss {np.mean(history[-50:]):.4f}")
    save_model(path, cfg, model, opt, codec, max(stop, start))
    _write_losses(out / "loss.csv", history)
    elapsed = time.perf_counter() - t0
    if history:
        plot_loss(history, out / "loss.png", f"{cfg.name} v-prediction loss")
    _write_timing(out, {"train_seconds": elapsed, "steps_run": max(stop - start, 0)})
    return model, history


def _write_losses(path, history):
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{i + 1},{v!r}\n" for i, v in enumerate(history))


def _read_losses(path) -> list[float]:
    if not Path(path).exists():
        return []
    lines = Path(path).read_text().splitlines()[1:]
    return [float(x.split(",")[1]) for x in lines]


def _write_timing(out: Path, values: dict):
    path = Path(out) / "timing.json"
    old = json.loads(path.read_text()) if path.exists() else {}
    old.update(values)
    path.write_text(json.dumps(old, indent=2, sort_keys=True))


# -- evaluation ----------------------------------------------------------------------------------

def _sampler_kw(cfg: RunConfig) -> dict:
    tc = cfg.effective_train()
    s = cfg.sampling
    return {"M": s.M, "guidance": s.guidance, "solver": s.solver, "alpha_corr": tc.alpha_corr,
            "mode": tc.memory_mode, "kv_cap": tc.kv_cap}


def _batched_prediction(cfg, model, codec, prefix, n_future, rng, batch=32):
    schedule = make_schedule(cfg.model.timesteps)
    outs = []
    for b, i in enumerate(range(0, len(prefix), batch)):
        frames, _ = video_prediction(model, codec, prefix[i:i + batch], n_future, schedule, rng.spawn(b),
                                     **_sampler_kw(cfg))
        outs.append(frames)
    return np.concatenate(outs)


def evaluate_recall(cfg: RunConfig, model, codec) -> dict:
    """Condition on the first N-1 ground-truth segments, sample segment N, read the cue colour."""
    pc: ProbeConfig = cfg.probe
    data = probe_videos(cfg, "eval", n=cfg.eval.n_eval, dataset="recall")
    video, L, N = data["video"], pc.L, pc.N
    pred = _batched_prediction(cfg, model, codec, video[:, :(N - 1) * L], 1,
                               SeededRng(cfg.seed, _SAMPLE, 1))
    truth = video[:, (N - 1) * L:]
    cue = read_cue(pred, pc)
    acc = float(np.mean(cue == data["color"]))
    seg = per_segment_metrics(pred, truth, L)[0]
    return {"recall": acc, "psnr": seg["psnr"], "mse": seg["mse"], "segment": N,
            "blank_rate": float(np.mean(cue == -1)), "pred": pred, "truth": truth}


def evaluate_drift(cfg: RunConfig, model, codec) -> dict:
    """Roll out ``rollout_factor·N`` segments from a short ground-truth prefix; per-segment PSNR curve."""
    pc = cfg.probe
    P = cfg.eval.prefix_segments
    total = cfg.eval.rollout_factor * pc.N
    data = probe_videos(cfg, "eval", n=cfg.eval.n_eval, dataset="drift", n_segments=P)
    truth = render_drift(data["states"], pc, P * pc.L, (total - P) * pc.L)
    pred = _batched_prediction(cfg, model, codec, data["video"], total - P,
                               SeededRng(cfg.seed, _SAMPLE, 2))
    curve = error_propagation_curve(pred, truth, pc.L)
    for r in curve["rows"]:
        r["segment"] += P
    curve.update(pred=pred, truth=truth)
    return curve


def evaluate(cfg: RunConfig, model, codec) -> tuple[list[MetricsRecord], dict]:
    n_params = model.num_parameters()
    mem = memory_bytes_per_segment(cfg, model)
    if cfg.dataset == "recall":
        r = evaluate_recall(cfg, model, codec)
        return [MetricsRecord(cfg.name, r["segment"], r["psnr"], r["mse"], r["recall"], n_params=n_params,
                              memory_bytes=mem.get(r["segment"] - 1, 0))], r
    c = evaluate_drift(cfg, model, codec)
    recs = [MetricsRecord(cfg.name, row["segment"], row["psnr"], row["mse"], n_params=n_params,
                          memory_bytes=mem.get(row["segment"] - 1, 0)) for row in c["rows"]]
    return recs, c


def memory_bytes_per_segment(cfg: RunConfig, model, n_max: int | None = None) -> dict[int, int]:
    """Conditioning-memory size after absorbing ``n`` segments, for n = 1..n_max."""
    from ..sampling import update_memory
    tc = cfg.effective_train()
    n_max = n_max or cfg.eval.rollout_factor * cfg.probe.N
    z = np.zeros((1, *cfg.model.segment_shape))
    out, memory = {}, None
    for n in range(1, n_max + 1):
        if tc.memory_mode == KV_CACHE and n > tc.kv_cap:
            break
        memory = update_memory(model, z, memory, None, tc.memory_mode, tc.kv_cap)
        out[n] = memory_nbytes(memory)
    return out


def write_eval(out: Path, cfg: RunConfig, records: list[MetricsRecord], detail: dict) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", records)
    k = min(4, len(detail["pred"]))
    write_ppm(out / "prediction.ppm", frame_grid(detail["pred"][:k]))
    write_ppm(out / "truth.ppm", frame_grid(detail["truth"][:k]))
    return out / "metrics.csv"


# -- ablations -------------------------------------------------------------------------------------

def run_single(cfg: RunConfig, codec: LatentCodec, out: Path, log=print) -> tuple[list[MetricsRecord], dict]:
    """Train one configuration (resuming if possible), evaluate it and write its artifacts."""
    out = Path(out)
    model, _ = run_train(cfg, codec, out, log=log)
    t0 = time.perf_counter()
    records, detail = evaluate(cfg, model, codec)
    _write_timing(out, {"eval_seconds": time.perf_counter() - t0})
    write_eval(out, cfg, records, detail)
    (out / "config.json").write_text(cfg.to_json())
    return records, detail


def run_ablation(base: RunConfig, modes, out: Path, codec: LatentCodec | None = None,
                 seeds=None, cache_dir: Path | None = None, log=print) -> dict:
    """Train and evaluate every (mode, seed) pair; one metrics CSV per pair.

    ``modes`` holds memory-mode names or ``(mode, robust)`` pairs.
    """
    out = Path(out)
    codec = codec or get_codec(base, cache_dir, log)
    seeds = [base.seed] if seeds is None else list(seeds)
    results = {}
    for m in modes:
        mode, robust = (m, None) if isinstance(m, str) else m
        for seed in seeds:
            cfg = replace(base.with_ablation(mode, robust), seed=seed)
            tag = cfg.ablation.tag
            run_dir = out / f"{tag}-seed{seed}"
            if cache_dir is not None:
                run_dir = Path(cache_dir) / f"{base.dataset}-{tag}-seed{seed}-{cache_key('run', identity(cfg))}"
            if (run_dir / "metrics.csv").exists() and (run_dir / "summary.json").exists():
                summary = json.loads((run_dir / "summary.json").read_text())
            else:
                records, detail = run_single(cfg, codec, run_dir, log)
                summary = _summary(cfg, records, detail)
                (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
            results.setdefault(tag, []).append(summary)
    return results


def _summary(cfg: RunConfig, records: list[MetricsRecord], detail: dict) -> dict:
    s = {"name": cfg.name, "seed": cfg.seed, "mode": cfg.ablation.mode, "robust": cfg.ablation.robust,
         "rows": [r.row() for r in records]}
    if cfg.dataset == "recall":
        s["recall"] = detail["recall"]
        s["blank_rate"] = detail["blank_rate"]
    else:
        s["gap"] = detail["gap"]
        s["first_psnr"] = detail["first_psnr"]
        s["last_psnr"] = detail["last_psnr"]
    return s


def sample_run(cfg: RunConfig, model, codec, n_videos: int, n_segments: int, out: Path) -> np.ndarray:
    """Unconditional long-video sampling; writes ``samples.ckpt`` and ``samples.ppm``."""
    schedule = make_schedule(cfg.model.timesteps)
    kw = _sampler_kw(cfg)
    frames, segs = generate_long_video(model, codec, n_segments, schedule, SeededRng(cfg.seed, _SAMPLE, 0),
                                       batch=n_videos, **kw)
    out = Path(out)
    ckpt.save(out / "samples.ckpt", {"kind": "samples", "config": identity(cfg), "step": 0},
              {"frames": frames, "latents": np.stack(segs, axis=1)})
    write_ppm(out / "samples.ppm", frame_grid(frames))
    return frames
