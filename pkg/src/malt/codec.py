"""Chunked latent video codec.

Encoder: space-time patches of ``d_l x d_s x d_s`` pixels are embedded linearly,
mixed by residual MLP blocks and projected to ``c`` latent channels. The
decoder mirrors it. Patches never see each other, so chunks (and in fact
patches) are independent. Latents are standardised per channel with
statistics fitted at the end of training.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn import LayerNorm, Linear, Module, ResidualMLP
from .numerics import ContractError, SeededRng, ShapeError, Tensor, no_grad
from .optim import AdamW, cosine_lr


@dataclass(frozen=True)
class CodecConfig:
    d_s: int = 4
    d_l: int = 4
    c: int = 8
    m: int = 1
    L: int = 16
    H: int = 32
    W: int = 32
    C_in: int = 3
    hidden: int = 64
    blocks: int = 2

    def __post_init__(self):
        for name in ("d_s", "d_l", "c", "m", "L", "H", "W", "C_in", "hidden"):
            if getattr(self, name) < 1:
                raise ShapeError(f"CodecConfig.{name} must be >= 1")
        if self.H % self.d_s or self.W % self.d_s:
            raise ShapeError(f"frame {self.H}x{self.W} not divisible by d_s={self.d_s}")
        if self.L % self.d_l:
            raise ShapeError(f"segment length L={self.L} not divisible by d_l={self.d_l}")

    @property
    def l(self) -> int:
        return self.L // self.d_l

    @property
    def h(self) -> int:
        return self.H // self.d_s

    @property
    def w(self) -> int:
        return self.W // self.d_s

    @property
    def segment_shape(self) -> tuple[int, int, int, int]:
        return (self.l, self.h, self.w, self.c)

    @property
    def chunk_frames(self) -> int:
        return self.m * self.L

    @property
    def patch_dim(self) -> int:
        return self.d_l * self.d_s * self.d_s * self.C_in

    def to_dict(self) -> dict:
        return asdict(self)


def _to_patches(x: np.ndarray | Tensor, cfg: CodecConfig):
    """(..., F, H, W, C) -> (..., F/d_l, H/d_s, W/d_s, d_l*d_s*d_s*C)."""
    lead = x.shape[:-4]
    F = x.shape[-4]
    k = len(lead)
    x = x.reshape(*lead, F // cfg.d_l, cfg.d_l, cfg.h, cfg.d_s, cfg.w, cfg.d_s, cfg.C_in)
    axes = list(range(k)) + [k + i for i in (0, 2, 4, 1, 3, 5, 6)]
    x = x.permute(axes) if isinstance(x, Tensor) else x.transpose(axes)
    return x.reshape(*lead, F // cfg.d_l, cfg.h, cfg.w, cfg.patch_dim)


def _from_patches(p, cfg: CodecConfig):
    lead = p.shape[:-4]
    lt = p.shape[-4]
    k = len(lead)
    p = p.reshape(*lead, lt, cfg.h, cfg.w, cfg.d_l, cfg.d_s, cfg.d_s, cfg.C_in)
    axes = list(range(k)) + [k + i for i in (0, 3, 1, 4, 2, 5, 6)]
    p = p.permute(axes) if isinstance(p, Tensor) else p.transpose(axes)
    return p.reshape(*lead, lt * cfg.d_l, cfg.H, cfg.W, cfg.C_in)


class LatentCodec(Module):
    def __init__(self, cfg: CodecConfig, rng: SeededRng):
        super().__init__()
        self.cfg = cfg
        hid = cfg.hidden
        self.enc_in = self.child("enc_in", Linear(cfg.patch_dim, hid, rng.spawn(0)))
        self.enc_blocks = [self.child(f"enc_block{i}", ResidualMLP(hid, 2 * hid, rng.spawn(1, i)))
                           for i in range(cfg.blocks)]
        self.enc_norm = self.child("enc_norm", LayerNorm(hid))
        self.enc_out = self.child("enc_out", Linear(hid, cfg.c, rng.spawn(2)))
        self.dec_in = self.child("dec_in", Linear(cfg.c, hid, rng.spawn(3)))
        self.dec_blocks = [self.child(f"dec_block{i}", ResidualMLP(hid, 2 * hid, rng.spawn(4, i)))
                           for i in range(cfg.blocks)]
        self.dec_norm = self.child("dec_norm", LayerNorm(hid))
        self.dec_out = self.child("dec_out", Linear(hid, cfg.patch_dim, rng.spawn(5)))
        # latent standardisation; fitted by train_codec, not trained by gradient
        self.latent_mean = np.zeros(cfg.c)
        self.latent_std = np.ones(cfg.c)

    def state_dict(self):
        state = super().state_dict()
        state["latent_mean"] = self.latent_mean.copy()
        state["latent_std"] = self.latent_std.copy()
        return state

    def load_state_dict(self, state):
        state = dict(state)
        self.latent_mean = np.asarray(state.pop("latent_mean"), dtype=np.float64).copy()
        self.latent_std = np.asarray(state.pop("latent_std"), dtype=np.float64).copy()
        super().load_state_dict(state)

    # -- shape checks ------------------------------------------------------------
    def _check_video(self, x, frames: int | None = None):
        cfg = self.cfg
        if x.ndim < 4 or x.shape[-3:] != (cfg.H, cfg.W, cfg.C_in):
            raise ShapeError(f"expected (..., F, {cfg.H}, {cfg.W}, {cfg.C_in}) video, got {x.shape}")
        if frames is not None and x.shape[-4] != frames:
            raise ShapeError(f"expected {frames} frames per chunk, got {x.shape[-4]}")

    def _check_latent(self, z):
        cfg = self.cfg
        if z.ndim < 4 or z.shape[-3:] != (cfg.h, cfg.w, cfg.c) or z.shape[-4] != cfg.m * cfg.l:
            raise ShapeError(f"expected (..., {cfg.m * cfg.l}, {cfg.h}, {cfg.w}, {cfg.c}) latent, got {z.shape}")

    # -- differentiable paths (used by training) ------------------------------------
    def encode_raw(self, x: Tensor) -> Tensor:
        """Unstandardised latents for any whole number of segments."""
        cfg = self.cfg
        self._check_video(x)
        if x.shape[-4] % cfg.d_l:
            raise ShapeError(f"{x.shape[-4]} frames not divisible by d_l={cfg.d_l}")
        p = _to_patches(x - 0.5, cfg)
        hdn = self.enc_in(p)
        for blk in self.enc_blocks:
            hdn = blk(hdn)
        return self.enc_out(self.enc_norm(hdn))

    def decode_raw(self, z: Tensor) -> Tensor:
        hdn = self.dec_in(z)
        for blk in self.dec_blocks:
            hdn = blk(hdn)
        p = self.dec_out(self.dec_norm(hdn))
        return _from_patches(p, self.cfg) + 0.5

    # -- public contract ---------------------------------------------------------------
    def encode(self, chunk) -> np.ndarray:
        """(…, m·L, H, W, C_in) pixels -> (…, m·l, h, w, c) standardised latents."""
        x = np.asarray(chunk.data if isinstance(chunk, Tensor) else chunk, dtype=np.float64)
        self._check_video(x, self.cfg.chunk_frames)
        with no_grad():
            z = self.encode_raw(Tensor(x)).data
        return (z - self.latent_mean) / self.latent_std

    def decode(self, latent) -> np.ndarray:
        """Inverse of :meth:`encode`; output clamped to [0, 1]."""
        z = np.asarray(latent.data if isinstance(latent, Tensor) else latent, dtype=np.float64)
        self._check_latent(z)
        with no_grad():
            x = self.decode_raw(Tensor(z * self.latent_std + self.latent_mean)).data
        return np.clip(x, 0.0, 1.0)

    def encode_long_video(self, video) -> list[np.ndarray]:
        """Encode ``S = N·L`` frames chunk by chunk and return N latent segments."""
        cfg = self.cfg
        x = np.asarray(video, dtype=np.float64)
        self._check_video(x)
        S = x.shape[-4]
        if S % cfg.L:
            raise ShapeError(f"video length {S} is not a whole number of {cfg.L}-frame segments")
        n_seg = S // cfg.L
        if n_seg % cfg.m:
            raise ShapeError(f"{n_seg} segments not divisible into chunks of m={cfg.m}")
        segs = []
        for i in range(n_seg // cfg.m):
            z = self.encode(x[..., i * cfg.chunk_frames:(i + 1) * cfg.chunk_frames, :, :, :])
            segs.extend(np.split(z, cfg.m, axis=-4))
        return segs

    def decode_segments(self, segments) -> np.ndarray:
        """Decode a list of latent segments back to a frame sequence (chunkwise)."""
        cfg = self.cfg
        if len(segments) % cfg.m:
            raise ShapeError(f"{len(segments)} segments not divisible into chunks of m={cfg.m}")
        frames = []
        for i in range(0, len(segments), cfg.m):
            frames.append(self.decode(np.concatenate(segments[i:i + cfg.m], axis=-4)))
        return np.concatenate(frames, axis=-4)

    def reconstruction_mse(self, chunks: np.ndarray) -> float:
        rec = self.decode(self.encode(chunks))
        return float(np.mean((rec - chunks) ** 2))


def train_codec(
    dataset: np.ndarray,
    cfg: CodecConfig,
    rng: SeededRng,
    steps: int = 1500,
    lr: float = 2e-3,
    batch_size: int = 16,
    weight_decay: float = 0.0,
    codec: LatentCodec | None = None,
) -> tuple[LatentCodec, list[float]]:
    """Fit the codec with pixel MSE on chunks of shape (n, m·L, H, W, C_in).

    Returns the trained codec (with fitted latent statistics) and the per-step
    loss history.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 5 or len(data) == 0:
        raise ContractError("train_codec needs a non-empty dataset of shape (n, m·L, H, W, C_in)")
    if codec is None:
        codec = LatentCodec(cfg, rng.spawn(0))
    codec._check_video(data[0], cfg.chunk_frames)
    params = codec.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    history = []
    for step in range(steps):
        srng = rng.spawn(1, step)
        idx = srng.integers(0, len(data), size=min(batch_size, len(data)))
        x = Tensor(data[idx])
        rec = codec.decode_raw(codec.encode_raw(x))
        diff = rec - x
        loss = (diff * diff).mean()
        opt.step(loss, lr=cosine_lr(step, steps, lr))
        history.append(loss.item())
    with no_grad():
        z = np.concatenate([codec.encode_raw(Tensor(data[i:i + 32])).data for i in range(0, len(data), 32)])
    flat = z.reshape(-1, cfg.c)
    codec.latent_mean = flat.mean(axis=0)
    codec.latent_std = flat.std(axis=0) + 1e-8
    return codec, history
