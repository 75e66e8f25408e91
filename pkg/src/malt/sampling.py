"""Segment-by-segment autoregressive sampling.

Each segment starts from correlated noise at ``t = T``, is denoised with the
model conditioned on the memory of everything generated so far, and is then
absorbed into the memory at ``t = 0`` before the next segment begins.
"""

from __future__ import annotations

import numpy as np

from .codec import LatentCodec
from .diffusion import (
    RECURRENT,
    DiffusionSchedule,
    absorb_segment,
    conditioning_memory,
    eps_from_v,
    sample_correlated_noise,
    z0_from_v,
)
from .model import MALTDenoiser
from .numerics import ContractError, SeededRng, ShapeError, Tensor, no_grad


class ConfigurationError(ValueError):
    """Incompatible component configurations (detected before any compute)."""


def timestep_grid(T: int, M: int) -> np.ndarray:
    """``M + 1`` integer timesteps from ``T`` down to 0 with uniform stride."""
    if M < 1:
        raise ContractError(f"need at least one sampling step, got M={M}")
    return np.round(np.linspace(T, 0, M + 1)).astype(np.int64)


def ddim_step(z_t, v_pred, t: int, t_next: int, schedule: DiffusionSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_next`` using a v-prediction."""
    if t_next == t:
        return np.array(z_t, copy=True)
    if not (schedule.T >= t > t_next >= 0):
        raise ContractError(f"DDIM needs T >= t > t_next >= 0, got t={t}, t_next={t_next}")
    z0 = z0_from_v(z_t, v_pred, t, schedule)
    eps = eps_from_v(z_t, v_pred, t, schedule)
    ab = schedule.alphas_bar[t_next]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def euler_step(z, increment, t_i: float, t_next: float):
    """z + (t_next - t_i) * increment"""
    return z + (t_next - t_i) * increment


def noise_level(t, schedule: DiffusionSchedule):
    """sigma(t) = sqrt((1 - ab_t) / ab_t): the variance-exploding noise scale."""
    ab = schedule.ab(t)
    return np.sqrt((1.0 - ab) / ab)


def _velocity(model: MALTDenoiser, z, t: int, memory, cond, guidance: float):
    B = z.shape[0]
    tt = np.full(B, t)
    v_c, _ = model(Tensor(z), tt, memory, cond)
    if guidance == 1.0:
        return v_c.data
    v_u, _ = model(Tensor(z), tt, memory, None)
    return v_u.data + guidance * (v_c.data - v_u.data)


def sample_segment(model: MALTDenoiser, memory, cond, schedule: DiffusionSchedule, rng: SeededRng,
                   M: int = 50, guidance: float = 1.0, batch: int = 1, alpha_corr: float = 1.0,
                   solver: str = "ddim") -> np.ndarray:
    """Denoise one latent segment batch (B, l, h, w, c) from pure noise.

    ``solver="euler"`` integrates ``d(z/sqrt(ab))/d sigma = eps_hat`` with
    explicit Euler steps over the same timestep grid.
    """
    grid = timestep_grid(schedule.T, M)
    mem = conditioning_memory(model, memory, batch)
    if cond is not None:
        cond = np.broadcast_to(np.asarray(cond), (batch,))
    z = sample_correlated_noise((batch, *model.cfg.segment_shape), alpha_corr, rng)
    with no_grad():
        for t, t_next in zip(grid[:-1], grid[1:]):
            v = _velocity(model, z, int(t), mem, cond, guidance)
            if solver == "ddim":
                z = ddim_step(z, v, int(t), int(t_next), schedule)
            elif solver == "euler":
                xbar = z / np.sqrt(schedule.alphas_bar[t])
                eps = eps_from_v(z, v, int(t), schedule)
                xbar = euler_step(xbar, eps, noise_level(int(t), schedule), noise_level(int(t_next), schedule))
                z = xbar * np.sqrt(schedule.alphas_bar[t_next])
            else:
                raise ValueError(f"unknown solver {solver!r}")
    return z


def update_memory(model: MALTDenoiser, z_generated, memory, cond, mode: str = RECURRENT,
                  kv_cap: int | None = None):
    """Absorb a finished segment; no noise augmentation at inference."""
    with no_grad():
        return absorb_segment(model, memory, np.asarray(z_generated), cond, mode, kv_cap=kv_cap)


def check_compatible(model: MALTDenoiser, codec: LatentCodec | None):
    if codec is None:
        return
    cc, mc = codec.cfg, model.cfg
    if (cc.l, cc.h, cc.w, cc.c) != mc.segment_shape:
        raise ConfigurationError(
            f"codec latent segment {(cc.l, cc.h, cc.w, cc.c)} != model input {mc.segment_shape}")


def generate_latents(model: MALTDenoiser, n_segments: int, schedule: DiffusionSchedule, rng: SeededRng,
                     cond=None, M: int = 50, guidance: float = 1.0, batch: int = 1,
                     alpha_corr: float = 1.0, mode: str = RECURRENT, memory=None,
                     solver: str = "ddim", kv_cap: int | None = None, first_index: int = 0):
    """Generate ``n_segments`` latent segments after an optional starting memory.

    Segment ``k`` uses noise stream ``rng.spawn(first_index + k)`` so the output
    for segment ``k`` does not depend on how later segments are seeded.
    Returns ``(segments, memory)``.
    """
    if n_segments < 0:
        raise ContractError("n_segments must be >= 0")
    segs = []
    for k in range(n_segments):
        z = sample_segment(model, memory, cond, schedule, rng.spawn(first_index + k), M, guidance, batch,
                           alpha_corr, solver)
        segs.append(z)
        memory = update_memory(model, z, memory, cond, mode, kv_cap)
    return segs, memory


def generate_long_video(model: MALTDenoiser, codec: LatentCodec, N: int, schedule: DiffusionSchedule,
                        rng: SeededRng, cond=None, M: int = 50, guidance: float = 1.0, batch: int = 1,
                        alpha_corr: float = 1.0, mode: str = RECURRENT, solver: str = "ddim",
                        kv_cap: int | None = None):
    """Sample ``N`` segments and decode them; returns ``(frames (B, N·L, H, W, C), latents)``."""
    check_compatible(model, codec)
    if N < 1:
        raise ContractError("N must be >= 1")
    segs, _ = generate_latents(model, N, schedule, rng, cond, M, guidance, batch, alpha_corr, mode,
                               solver=solver, kv_cap=kv_cap)
    return codec.decode_segments(segs), segs


def prefix_memory(model: MALTDenoiser, prefix_latents, cond=None, mode: str = RECURRENT,
                  kv_cap: int | None = None):
    """Chain ``update_memory`` over ground-truth prefix segments."""
    memory = None
    for z in prefix_latents:
        memory = update_memory(model, z, memory, cond, mode, kv_cap)
    return memory


def video_prediction(model: MALTDenoiser, codec: LatentCodec, prefix_frames, n_future: int,
                     schedule: DiffusionSchedule, rng: SeededRng, cond=None, M: int = 50,
                     guidance: float = 1.0, alpha_corr: float = 1.0, mode: str = RECURRENT,
                     solver: str = "ddim", kv_cap: int | None = None):
    """Predict ``n_future`` segments after ``prefix_frames`` (B, P·L, H, W, C).

    The prefix reaches the generator only through the memory. Returns
    ``(frames (B, n_future·L, H, W, C), memory_after_prefix)``.
    """
    check_compatible(model, codec)
    x = np.asarray(prefix_frames, dtype=np.float64)
    if x.ndim != 5:
        raise ShapeError(f"prefix must be (B, frames, H, W, C), got {x.shape}")
    if x.shape[1] % codec.cfg.L:
        raise ShapeError(f"prefix of {x.shape[1]} frames is not a whole number of {codec.cfg.L}-frame segments")
    prefix = codec.encode_long_video(x)
    memory = prefix_memory(model, prefix, cond, mode, kv_cap)
    B = x.shape[0]
    if n_future == 0:
        return np.zeros((B, 0, *x.shape[2:])), memory
    segs, _ = generate_latents(model, n_future, schedule, rng, cond, M, guidance, B, alpha_corr, mode,
                               memory=memory, solver=solver, kv_cap=kv_cap, first_index=len(prefix))
    return codec.decode_segments(segs), memory
