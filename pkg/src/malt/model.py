"""Memory-augmented latent diffusion transformer.

Token layout inside the network is ``(B, Lt, S, C')``: ``Lt = l/p_l`` temporal
tokens, ``S = (h/p_s)(w/p_s)`` spatial tokens, ``C'`` channels. Memory states
use the per-location layout ``(B, S, Lm, C')`` so that memory attention is a
batch of independent temporal attentions, one per spatial location.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import LayerNorm, Linear, Module
from .numerics import (
    ContractError,
    SeededRng,
    ShapeError,
    Tensor,
    as_tensor,
    concat,
    gelu,
    layer_norm,
    no_grad,
    silu,
    softmax,
    stop_grad,
)

SPATIAL = "spatial"
SPATIOTEMPORAL = "spatiotemporal"


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    p_l: int = 1
    p_s: int = 2
    l: int = 4
    h: int = 8
    w: int = 8
    c: int = 8
    num_classes: int = 0
    lora_rank: int = 8
    mlp_ratio: int = 4
    timesteps: int = 1000
    window_layout: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.l % self.p_l or self.h % self.p_s or self.w % self.p_s:
            raise ShapeError(
                f"latent ({self.l},{self.h},{self.w}) not divisible by patch ({self.p_l},{self.p_s},{self.p_s})")
        if self.width % self.heads:
            raise ShapeError(f"width {self.width} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ShapeError("depth must be >= 1")
        layout = tuple(self.window_layout) or tuple(
            SPATIAL if i % 2 == 0 else SPATIOTEMPORAL for i in range(self.depth))
        if len(layout) != self.depth or any(k not in (SPATIAL, SPATIOTEMPORAL) for k in layout):
            raise ShapeError(f"bad window layout {layout} for depth {self.depth}")
        object.__setattr__(self, "window_layout", layout)

    @property
    def t_tokens(self) -> int:
        return self.l // self.p_l

    @property
    def s_tokens(self) -> int:
        return (self.h // self.p_s) * (self.w // self.p_s)

    @property
    def n_tokens(self) -> int:
        return self.t_tokens * self.s_tokens

    @property
    def patch_dim(self) -> int:
        return self.p_l * self.p_s * self.p_s * self.c

    @property
    def memory_shape(self) -> tuple[int, int, int]:
        return (self.s_tokens, self.t_tokens, self.width)

    @property
    def segment_shape(self) -> tuple[int, int, int, int]:
        return (self.l, self.h, self.w, self.c)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_layout"] = list(self.window_layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["window_layout"] = tuple(d.get("window_layout", ()))
        return cls(**d)


# -- patchify ----------------------------------------------------------------------

def patchify(z, p_l: int, p_s: int):
    """(..., l, h, w, c) -> (..., l·h·w/(p_l·p_s²), p_l·p_s²·c), tokens ordered (t, y, x)."""
    l, h, w, c = z.shape[-4:]
    if l % p_l or h % p_s or w % p_s:
        raise ShapeError(f"latent {(l, h, w)} not divisible by patch ({p_l},{p_s},{p_s})")
    lead = z.shape[:-4]
    k = len(lead)
    z = z.reshape(*lead, l // p_l, p_l, h // p_s, p_s, w // p_s, p_s, c)
    axes = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    z = z.permute(axes) if isinstance(z, Tensor) else z.transpose(axes)
    return z.reshape(*lead, (l // p_l) * (h // p_s) * (w // p_s), p_l * p_s * p_s * c)


def unpatchify(tokens, p_l: int, p_s: int, shape):
    l, h, w, c = shape
    lead = tokens.shape[:-2]
    k = len(lead)
    if tokens.shape[-2:] != ((l // p_l) * (h // p_s) * (w // p_s), p_l * p_s * p_s * c):
        raise ShapeError(f"tokens {tokens.shape} do not match segment {shape} with patch ({p_l},{p_s})")
    z = tokens.reshape(*lead, l // p_l, h // p_s, w // p_s, p_l, p_s, p_s, c)
    axes = list(range(k)) + [k + i for i in (0, 3, 1, 4, 2, 5, 6)]
    z = z.permute(axes) if isinstance(z, Tensor) else z.transpose(axes)
    return z.reshape(*lead, l, h, w, c)


# -- embeddings ----------------------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb


def _heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, C) -> (..., H, L, C/H)"""
    *lead, L, C = x.shape
    x = x.reshape(*lead, L, heads, C // heads)
    k = len(lead)
    return x.permute(*range(k), k + 1, k, k + 2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    k = len(lead)
    return x.permute(*range(k), k + 1, k, k + 2).reshape(*lead, L, H * dh)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, bias=None, return_weights: bool = False):
    """Multi-head scaled dot-product attention over the second-to-last axis."""
    qh, kh, vh = _heads(q, heads), _heads(k, heads), _heads(v, heads)
    logits = (qh @ kh.transpose(-1, -2)) * (1.0 / math.sqrt(qh.shape[-1]))
    if bias is not None:
        logits = logits + bias
    a = softmax(logits, axis=-1)
    out = _merge_heads(a @ vh)
    return (out, a) if return_weights else out


class MemoryAttention(Module):
    """Cross-attention from the current per-location token states to [memory, current].

    Relative positional bias ``b[Δ]`` is indexed by the temporal offset between
    query and key in the concatenated sequence, clipped to ``±2·Lt``.
    """

    def __init__(self, width: int, heads: int, t_tokens: int, rng: SeededRng):
        super().__init__()
        self.heads = heads
        self.t_tokens = t_tokens
        self.q = self.child("q", Linear(width, width, rng.spawn(0)))
        self.k = self.child("k", Linear(width, width, rng.spawn(1)))
        self.v = self.child("v", Linear(width, width, rng.spawn(2)))
        self.o = self.child("o", Linear(width, width, rng.spawn(3), init="zeros"))
        self.rel_bias = self.param("rel_bias", np.zeros(4 * t_tokens + 1))

    def bias_index(self, n_query: int, n_mem: int) -> np.ndarray:
        qpos = n_mem + np.arange(n_query)
        kpos = np.arange(n_mem + n_query)
        delta = qpos[:, None] - kpos[None, :]
        r = 2 * self.t_tokens
        return np.clip(delta, -r, r) + r

    def __call__(self, state: Tensor, memory, return_weights: bool = False):
        """``state``: (B, S, Lt, C'); ``memory``: (B, S, Lm, C') -> (B, S, Lt, C')."""
        memory = as_tensor(memory)
        if memory.ndim != 4 or memory.shape[0] != state.shape[0] or memory.shape[1] != state.shape[1] \
                or memory.shape[3] != state.shape[3]:
            raise ShapeError(f"memory shape {memory.shape} incompatible with state {state.shape}")
        kv = concat([memory, state], axis=2)
        bias = self.rel_bias[self.bias_index(state.shape[2], memory.shape[2])]
        res = attend(self.q(state), self.k(kv), self.v(kv), self.heads, bias, return_weights)
        if return_weights:
            out, a = res
            return self.o(out), a
        return self.o(res)


class Block(Module):
    def __init__(self, cfg: ModelConfig, kind: str, rng: SeededRng):
        super().__init__()
        W = cfg.width
        self.cfg = cfg
        self.kind = kind
        self.mem_norm = self.child("mem_norm", LayerNorm(W))
        self.mem_attn = self.child("mem_attn", MemoryAttention(W, cfg.heads, cfg.t_tokens, rng.spawn(0)))
        self.qkv = self.child("qkv", Linear(W, 3 * W, rng.spawn(1)))
        self.proj = self.child("proj", Linear(W, W, rng.spawn(2)))
        self.fc1 = self.child("fc1", Linear(W, cfg.mlp_ratio * W, rng.spawn(3)))
        self.fc2 = self.child("fc2", Linear(cfg.mlp_ratio * W, W, rng.spawn(4)))
        # low-rank per-block delta on the shared modulation MLP; B starts at zero
        self.lora_a = self.param("lora_a", rng.spawn(5).normal((W, cfg.lora_rank)) / math.sqrt(W))
        self.lora_b = self.param("lora_b", np.zeros((cfg.lora_rank, 6 * W)))
        self.mod_bias = self.param("mod_bias", np.zeros(6 * W))

    def hidden(self, x: Tensor) -> Tensor:
        """Memory-attention input for this block, (B, S, Lt, C')."""
        return self.mem_norm(x).permute(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory, se: Tensor, shared_mod: Tensor):
        B, Lt, S, W = x.shape
        hs = self.hidden(x)
        x = x + self.mem_attn(hs, memory).permute(0, 2, 1, 3)

        mod = shared_mod + (se @ self.lora_a) @ self.lora_b + self.mod_bias
        mod = mod.reshape(B, 1, 1, 6 * W)
        sh1, sc1, g1, sh2, sc2, g2 = [mod[..., i * W:(i + 1) * W] for i in range(6)]

        y = layer_norm(x) * (sc1 + 1.0) + sh1
        if self.kind == SPATIOTEMPORAL:
            y = y.reshape(B, 1, Lt * S, W)
        q, k, v = [self.qkv(y)[..., i * W:(i + 1) * W] for i in range(3)]
        a = self.proj(attend(q, k, v, self.cfg.heads)).reshape(B, Lt, S, W)
        x = x + g1 * a

        y = layer_norm(x) * (sc2 + 1.0) + sh2
        x = x + g2 * self.fc2(gelu(self.fc1(y)))
        return x, hs


class MALTDenoiser(Module):
    """v-prediction denoiser conditioned on a recurrent memory and a class label."""

    def __init__(self, cfg: ModelConfig, rng: SeededRng):
        super().__init__()
        self.cfg = cfg
        W = cfg.width
        self.embed = self.child("embed", Linear(cfg.patch_dim, W, rng.spawn(0)))
        self.pos = self.param("pos", rng.spawn(1).normal((cfg.t_tokens, cfg.s_tokens, W)) * 0.02)
        self.t_fc1 = self.child("t_fc1", Linear(W, W, rng.spawn(2)))
        self.t_fc2 = self.child("t_fc2", Linear(W, W, rng.spawn(3)))
        # last row is the learned "unconditional" embedding
        self.class_emb = self.param("class_emb", rng.spawn(4).normal((cfg.num_classes + 1, W)) * 0.02)
        self.shared_mod = self.child("shared_mod", Linear(W, 6 * W, rng.spawn(5), init="zeros"))
        self.blocks = [self.child(f"block{i}", Block(cfg, kind, rng.spawn(10 + i)))
                       for i, kind in enumerate(cfg.window_layout)]
        self.final_mod = self.child("final_mod", Linear(W, 2 * W, rng.spawn(6), init="zeros"))
        self.final_norm = self.child("final_norm", LayerNorm(W, affine=False))
        self.out = self.child("out", Linear(W, cfg.patch_dim, rng.spawn(7), init="small"))

    # -- memory helpers ---------------------------------------------------------------
    def init_memory(self, batch: int = 1) -> list[Tensor]:
        return init_memory(self.cfg, batch)

    def _check_memory(self, memory, batch: int):
        cfg = self.cfg
        if len(memory) != cfg.depth:
            raise ShapeError(f"memory has {len(memory)} layers, model depth is {cfg.depth}")
        for m in memory:
            shp = m.shape
            if len(shp) != 4 or shp[0] != batch or shp[1] != cfg.s_tokens or shp[3] != cfg.width:
                raise ShapeError(f"memory layer shape {shp} incompatible with (B={batch}, {cfg.memory_shape})")

    # -- conditioning ---------------------------------------------------------------------
    def _cond_vec(self, t, cond, batch: int) -> Tensor:
        cfg = self.cfg
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        if np.any(t < 0) or np.any(t > cfg.timesteps):
            raise ContractError(f"timestep out of range [0, {cfg.timesteps}]: {t}")
        temb = Tensor(timestep_embedding(t, cfg.width))
        temb = self.t_fc2(silu(self.t_fc1(temb)))
        if cond is None:
            idx = np.full(batch, cfg.num_classes)
        else:
            idx = np.broadcast_to(np.asarray(cond), (batch,)).astype(np.int64)
            idx = np.where(idx < 0, cfg.num_classes, idx)
            if np.any(idx > cfg.num_classes):
                raise ContractError(f"class index out of range: {idx}")
        return temb + self.class_emb[idx]

    def _embed(self, z_t) -> Tensor:
        cfg = self.cfg
        z_t = as_tensor(z_t)
        if z_t.ndim != 5 or z_t.shape[1:] != cfg.segment_shape:
            raise ShapeError(f"expected latent batch (B, {cfg.segment_shape}), got {z_t.shape}")
        B = z_t.shape[0]
        tok = self.embed(patchify(z_t, cfg.p_l, cfg.p_s))
        return tok.reshape(B, cfg.t_tokens, cfg.s_tokens, cfg.width) + self.pos

    def forward(self, z_t, t, memory, cond=None, hidden_only: bool = False):
        """Returns ``(v_prediction, hidden)``; ``hidden`` is the new per-layer memory.

        With ``hidden_only`` the output head and the last block's sublayers are
        skipped and ``v_prediction`` is None.
        """
        cfg = self.cfg
        x = self._embed(z_t)
        B = x.shape[0]
        if memory is None:
            memory = self.init_memory(B)
        self._check_memory(memory, B)
        e = self._cond_vec(t, cond, B)
        se = silu(e)
        shared = self.shared_mod(se)
        hidden = []
        for i, blk in enumerate(self.blocks):
            if hidden_only and i == len(self.blocks) - 1:
                hidden.append(blk.hidden(x))
                return None, hidden
            x, hs = blk(x, memory[i], se, shared)
            hidden.append(hs)
        fm = self.final_mod(se).reshape(B, 1, 1, 2 * cfg.width)
        shift, scale = fm[..., :cfg.width], fm[..., cfg.width:]
        y = self.final_norm(x) * (scale + 1.0) + shift
        tokens = self.out(y).reshape(B, cfg.n_tokens, cfg.patch_dim)
        return unpatchify(tokens, cfg.p_l, cfg.p_s, cfg.segment_shape), hidden

    __call__ = forward

    def encode_memory(self, z_clean, prev, cond=None) -> list[Tensor]:
        """Absorb a clean segment (t=0) into memory; ``prev`` is gradient-blocked."""
        B = as_tensor(z_clean).shape[0]
        if prev is None:
            prev = self.init_memory(B)
        prev = [stop_grad(m) for m in prev]
        _, hidden = self.forward(z_clean, 0, prev, cond, hidden_only=True)
        return hidden


def init_memory(cfg: ModelConfig, batch: int = 1) -> list[Tensor]:
    """All-zero memory, one (B, S, Lt, C') state per block."""
    return [Tensor(np.zeros((batch, *cfg.memory_shape))) for _ in range(cfg.depth)]


def memory_nbytes(memory) -> int:
    return int(sum(np.asarray(m.data if isinstance(m, Tensor) else m).nbytes for m in memory))


# -- cost model ------------------------------------------------------------------------

def attention_cost_model(L_tokens: int, H_tokens: int, W_tokens: int, width: int = 1) -> dict[str, float]:
    """Multiply-add flop estimates for the attention core (logits + weighted sum).

    Memory attention: per spatial location, ``L`` queries against ``2L`` keys.
    Full attention: all ``L·H·W`` tokens against each other.
    """
    if min(L_tokens, H_tokens, W_tokens, width) < 1:
        raise ContractError("token extents must be positive")
    hw = H_tokens * W_tokens
    memory = 2.0 * 2.0 * L_tokens * (2 * L_tokens) * width * hw
    n = L_tokens * hw
    full = 2.0 * 2.0 * n * n * width
    return {"memory_attention": memory, "full_attention": full}


def _attention_inputs(L_tokens: int, S: int, width: int, rng: SeededRng):
    q = Tensor(rng.normal((1, S, L_tokens, width)))
    kv = Tensor(rng.normal((1, S, 2 * L_tokens, width)))
    return q, kv


def measure_memory_attention_time(L_tokens: int, H_tokens: int, W_tokens: int, width: int = 16,
                                  heads: int = 1, repeats: int = 5, seed: int = 0) -> float:
    """Best-of-``repeats`` wall-clock seconds for one memory-attention core evaluation."""
    q, kv = _attention_inputs(L_tokens, H_tokens * W_tokens, width, SeededRng(seed))
    best = float("inf")
    with no_grad():
        attend(q, kv, kv, heads)
        for _ in range(repeats):
            t0 = time.perf_counter()
            attend(q, kv, kv, heads)
            best = min(best, time.perf_counter() - t0)
    return best


def measure_cost_ratios(L_tokens: int = 16, H_tokens: int = 16, W_tokens: int = 16, width: int = 32,
                        heads: int = 1, trials: int = 15, seed: int = 0) -> dict[str, float]:
    """Measured time ratios when the temporal or the spatial token count doubles.

    The three shapes are timed back to back within each trial and the median of
    the per-trial ratios is returned, which cancels slow drifts in machine load.
    Sizes should exceed the CPU caches or the ratios reflect cache effects.
    """
    rng = SeededRng(seed)
    S = H_tokens * W_tokens
    shapes = {"base": (L_tokens, S), "temporal": (2 * L_tokens, S), "spatial": (L_tokens, 2 * S)}
    inputs = {k: _attention_inputs(L, s, width, rng.spawn(i)) for i, (k, (L, s)) in enumerate(shapes.items())}
    ratios = {"temporal": [], "spatial": []}
    with no_grad():
        for q, kv in inputs.values():
            attend(q, kv, kv, heads)
        for _ in range(trials):
            t = {}
            for k, (q, kv) in inputs.items():
                t0 = time.perf_counter()
                attend(q, kv, kv, heads)
                t[k] = time.perf_counter() - t0
            ratios["temporal"].append(t["temporal"] / t["base"])
            ratios["spatial"].append(t["spatial"] / t["base"])
    return {k: float(np.median(v)) for k, v in ratios.items()}
