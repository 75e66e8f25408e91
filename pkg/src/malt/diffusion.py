"""Blockwise diffusion training with recurrent memory.

One training example is a stack of ``N`` clean latent segments. A segment
index ``n`` is drawn from P(n), the first ``n`` segments are absorbed into
memory (only the last absorption carries gradient), and the model is trained
to predict ``v`` for segment ``n+1`` given that memory.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import MALTDenoiser, init_memory
from .numerics import ContractError, SeededRng, Tensor, concat, no_grad, stop_grad
from .optim import AdamW, cosine_lr

RECURRENT = "recurrent"
LAST_ONLY = "last_only"
KV_CACHE = "kv_cache"
MEMORY_MODES = (RECURRENT, LAST_ONLY, KV_CACHE)


class MemoryBudgetError(RuntimeError):
    """kv-cache context grew past its configured cap."""


# -- schedule ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray        # betas[t-1] is beta_t for t = 1..T
    alphas_bar: np.ndarray   # alphas_bar[t] for t = 0..T, alphas_bar[0] = 1

    def ab(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ContractError(f"timestep out of range [0, {self.T}]: {t}")
        return self.alphas_bar[t]


def make_schedule(T: int = 1000, beta_0: float = 1e-4, beta_T: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule; ``betas[-1] == beta_T`` exactly."""
    if not (0 < beta_0 < beta_T < 1) or T < 2:
        raise ContractError(f"need 0 < beta_0 < beta_T < 1 and T >= 2, got {beta_0}, {beta_T}, T={T}")
    betas = np.linspace(beta_0, beta_T, T)
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return DiffusionSchedule(T, betas, alphas_bar)


def _coef(t, schedule, ndim: int):
    ab = schedule.ab(t)
    ab = np.asarray(ab, dtype=np.float64).reshape(np.shape(ab) + (1,) * (ndim - np.ndim(ab)))
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def q_sample(z0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps; ``t`` scalar or per leading batch entry."""
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise ContractError(f"z0 {z0.shape} and eps {eps.shape} differ")
    a, s = _coef(t, schedule, z0.ndim)
    return a * z0 + s * eps


def v_target(z0, eps, t, schedule: DiffusionSchedule) -> np.ndarray:
    z0, eps = np.asarray(z0), np.asarray(eps)
    a, s = _coef(t, schedule, z0.ndim)
    return a * eps - s * z0


def z0_from_v(z_t, v, t, schedule: DiffusionSchedule):
    a, s = _coef(t, schedule, np.ndim(z_t))
    return a * z_t - s * v


def eps_from_v(z_t, v, t, schedule: DiffusionSchedule):
    a, s = _coef(t, schedule, np.ndim(z_t))
    return s * z_t + a * v


def v_from_eps(z_t, eps, t, schedule: DiffusionSchedule):
    a, s = _coef(t, schedule, np.ndim(z_t))
    # z0 = (z_t - s eps) / a ; v = a eps - s z0
    return a * eps - s * (z_t - s * eps) / a


# -- priors --------------------------------------------------------------------------------

def sample_correlated_noise(shape, alpha_corr: float, rng: SeededRng) -> np.ndarray:
    """Frame-correlated Gaussian noise for latents shaped (..., l, h, w, c).

    Each frame is ``(alpha·base + own) / sqrt(1 + alpha²)`` with ``base`` shared
    across the ``l`` frames, so marginals stay N(0, 1) and two frames correlate
    with ``alpha² / (1 + alpha²)``.
    """
    if alpha_corr < 0:
        raise ContractError(f"alpha_corr must be >= 0, got {alpha_corr}")
    shape = tuple(shape)
    own = rng.normal(shape)
    if alpha_corr == 0:
        return own
    base_shape = shape[:-4] + (1,) + shape[-3:]
    base = rng.normal(base_shape)
    return (alpha_corr * base + own) / math.sqrt(1.0 + alpha_corr ** 2)


def segment_index_probs(N: int) -> np.ndarray:
    """P(n=0) = 1/2, P(n=k) = 1/(2(N-1)) for 0 < k < N."""
    if N < 1:
        raise ContractError("N must be >= 1")
    if N == 1:
        return np.array([1.0])
    p = np.full(N, 1.0 / (2 * (N - 1)))
    p[0] = 0.5
    return p


def sample_segment_index(N: int, rng: SeededRng, size=None):
    return rng.choice(segment_index_probs(N), size=size)


# -- memory bookkeeping ------------------------------------------------------------------------

def absorb_segment(model: MALTDenoiser, memory, z, cond, mode: str = RECURRENT,
                   detach_prev: bool = True, kv_cap: int | None = None):
    """Fold one clean segment into the memory according to ``mode``.

    ``memory`` is None before the first segment. For ``kv_cache`` the memory is
    the uncompressed concatenation of every absorbed segment's states.
    """
    z = Tensor(z) if not isinstance(z, Tensor) else z
    if mode == RECURRENT:
        prev = memory
        if prev is not None and not detach_prev:
            _, hidden = model.forward(z, 0, prev, cond, hidden_only=True)
            return hidden
        return model.encode_memory(z, prev, cond)
    if mode == LAST_ONLY:
        return model.encode_memory(z, None, cond)
    if mode == KV_CACHE:
        states = model.encode_memory(z, memory, cond)
        if memory is None:
            out = states
        else:
            out = [concat([stop_grad(m) if detach_prev else m, s], axis=2) for m, s in zip(memory, states)]
        n_seg = out[0].shape[2] // model.cfg.t_tokens
        if kv_cap is not None and n_seg > kv_cap:
            raise MemoryBudgetError(f"kv-cache holds {n_seg} segments, cap is {kv_cap}")
        return out
    raise ValueError(f"unknown memory mode {mode!r}")


def conditioning_memory(model: MALTDenoiser, memory, batch: int):
    return init_memory(model.cfg, batch) if memory is None else memory


def rollout_memory(model: MALTDenoiser, segments, sigma_mem: float, cond, rng: SeededRng,
                   mode: str = RECURRENT, stop_grad_prev: bool = True, step_models=None,
                   kv_cap: int | None = None):
    """Noisy memory after absorbing ``segments`` (B, n, l, h, w, c).

    Fresh noise ``N(0, sigma_mem²)`` is added to every segment before it is
    absorbed. With ``stop_grad_prev`` only the last absorption is on the tape.
    ``step_models`` optionally supplies a distinct model per step (used to audit
    where gradient flows).
    """
    if sigma_mem < 0:
        raise ContractError(f"sigma_mem must be >= 0, got {sigma_mem}")
    segments = np.asarray(segments)
    B, n = segments.shape[:2]
    if n == 0:
        return init_memory(model.cfg, B)
    start = n - 1 if mode == LAST_ONLY else 0
    memory = None
    for i in range(start, n):
        z = segments[:, i]
        if sigma_mem > 0:
            z = z + sigma_mem * rng.spawn(i).normal(z.shape)
        m = step_models[i] if step_models is not None else model
        last = i == n - 1
        if stop_grad_prev and not last:
            with no_grad():
                memory = absorb_segment(m, memory, z, cond, mode, kv_cap=kv_cap)
        else:
            memory = absorb_segment(m, memory, z, cond, mode, detach_prev=stop_grad_prev, kv_cap=kv_cap)
    return memory


# -- training ----------------------------------------------------------------------------------

@dataclass
class TrainConfig:
    N: int = 4
    sigma_mem: float = 0.1
    alpha_corr: float = 1.0
    p_uncond: float = 0.1
    lr: float = 5e-4
    weight_decay: float = 0.0
    batch_size: int = 16
    steps: int = 5000
    seed: int = 0
    memory_mode: str = RECURRENT
    kv_cap: int = 16
    grad_clip: float | None = 1.0

    def __post_init__(self):
        if self.sigma_mem < 0:
            raise ContractError("sigma_mem must be >= 0")
        if self.alpha_corr < 0:
            raise ContractError("alpha_corr must be >= 0")
        if self.memory_mode not in MEMORY_MODES:
            raise ContractError(f"memory_mode must be one of {MEMORY_MODES}")
        if self.N < 1:
            raise ContractError("N must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: MALTDenoiser, cfg: TrainConfig) -> AdamW:
    return AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)


def diffusion_loss(model: MALTDenoiser, segments, cond, cfg: TrainConfig,
                   schedule: DiffusionSchedule, rng: SeededRng, n=None):
    """Build the v-prediction loss for one batch; returns ``(loss, n)``."""
    segments = np.asarray(segments, dtype=np.float64)
    B, N = segments.shape[:2]
    if N < cfg.N:
        raise ContractError(f"batch holds {N} segments, config needs N={cfg.N}")
    if n is None:
        n = sample_segment_index(cfg.N, rng.spawn(1), size=B)
    n = np.broadcast_to(np.asarray(n), (B,))
    if cond is None:
        cond = np.full(B, -1)
    cond = np.asarray(cond).copy()
    if cfg.p_uncond > 0:
        cond[rng.spawn(2).uniform(B) < cfg.p_uncond] = -1
    t = rng.spawn(3).integers(1, schedule.T + 1, size=B)
    eps = sample_correlated_noise(segments.shape[:1] + segments.shape[2:], cfg.alpha_corr, rng.spawn(4))

    order, mems = [], []
    for k in np.unique(n):
        idx = np.nonzero(n == k)[0]
        order.append(idx)
        mems.append(rollout_memory(model, segments[idx, :k], cfg.sigma_mem, cond[idx],
                                   rng.spawn(5, int(k)), cfg.memory_mode, kv_cap=cfg.kv_cap))
    perm = np.concatenate(order)
    z0 = segments[perm, n[perm]]
    tp, ep = t[perm], eps[perm]
    z_t = q_sample(z0, tp, ep, schedule)
    target = v_target(z0, ep, tp, schedule)
    cp = cond[perm]
    if len({m[0].shape for m in mems}) == 1:
        memory = [concat([m[layer] for m in mems], axis=0) for layer in range(model.cfg.depth)]
        v_pred, _ = model(Tensor(z_t), tp, memory, cp)
        diff = v_pred - target
        return (diff * diff).mean(), n
    # kv-cache memories differ in length across groups: one forward per group
    total, start = None, 0
    for idx, m in zip(order, mems):
        sl = slice(start, start + len(idx))
        start += len(idx)
        v_pred, _ = model(Tensor(z_t[sl]), tp[sl], m, cp[sl])
        diff = v_pred - target[sl]
        part = (diff * diff).sum()
        total = part if total is None else total + part
    return total * (1.0 / target.size), n


def training_step(model: MALTDenoiser, opt: AdamW, segments, cond, cfg: TrainConfig,
                  schedule: DiffusionSchedule, step: int, budget: int | None = None) -> dict:
    """One optimizer step; randomness is a pure function of ``(cfg.seed, step)``."""
    rng = SeededRng(cfg.seed).spawn(1000, step)
    loss, n = diffusion_loss(model, segments, cond, cfg, schedule, rng)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value} at step {step} (seed {cfg.seed})")
    lr = cosine_lr(step, budget or cfg.steps, cfg.lr)
    opt.step(loss, lr=lr)
    return {"step": step, "loss": value, "lr": lr,
            "n_hist": np.bincount(n, minlength=cfg.N).tolist()}
