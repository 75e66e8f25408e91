"""Synthetic long-video probes.

recall probe
    Segment 1 shows a coloured cue in the top-left quadrant. The cue is absent
    in segments 2..N-1 while a distractor square bounces along the bottom rows.
    In segment N the cue reappears in the same place with the same colour, so
    the colour is the only dependency reaching further back than one segment.

drift probe
    Two square sprites bounce off the frame walls with integer positions and
    unit velocities. Frame ``k`` has a closed form in the initial state, so
    rollouts of any length can be scored against exact ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..numerics import SeededRng

CUE_COLORS = np.array([
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.2, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
])
DISTRACTOR_COLOR = np.array([0.8, 0.8, 0.8])
SPRITE_COLORS = np.array([
    [0.9, 0.3, 0.1],
    [0.1, 0.8, 0.3],
    [0.2, 0.4, 0.9],
    [0.9, 0.9, 0.2],
])


class DatasetConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    H: int = 16
    W: int = 16
    L: int = 8
    N: int = 4
    n_colors: int = 4
    sprite: int = 4
    n_examples: int = 256

    def to_dict(self) -> dict:
        return asdict(self)


def _bounce(p0: np.ndarray, v: np.ndarray, k: np.ndarray, span: int) -> np.ndarray:
    """Position after ``k`` unit steps with reflection on [0, span] (closed form)."""
    if span == 0:
        return np.zeros_like(p0 + v * k)
    period = 2 * span
    q = np.mod(p0 + v * k, period)
    return np.where(q <= span, q, period - q)


# -- recall probe ----------------------------------------------------------------------------

def cue_box(cfg: ProbeConfig) -> tuple[slice, slice]:
    return slice(0, cfg.H // 2), slice(0, cfg.W // 2)


def distractor_rows(cfg: ProbeConfig) -> slice:
    top = cfg.H // 2 + (cfg.H // 2 - cfg.sprite) // 2
    return slice(top, top + cfg.sprite)


def gen_dataset_recall_probe(cfg: ProbeConfig, rng: SeededRng) -> dict:
    """Returns ``{"video": (n, N·L, H, W, 3), "color": (n,), "x0": (n,), "v": (n,)}``."""
    if cfg.H < 16 or cfg.W < 16:
        raise DatasetConfigError("recall probe needs frames of at least 16x16")
    if cfg.N < 3:
        raise DatasetConfigError("recall probe needs N >= 3 so the cue can disappear")
    if cfg.sprite > cfg.H // 2 or cfg.sprite > cfg.W:
        raise DatasetConfigError("distractor does not fit beside the cue region")
    if not 2 <= cfg.n_colors <= len(CUE_COLORS):
        raise DatasetConfigError(f"n_colors must be in [2, {len(CUE_COLORS)}]")
    n, S = cfg.n_examples, cfg.N * cfg.L
    color = rng.spawn(0).integers(0, cfg.n_colors, size=n)
    x0 = rng.spawn(1).integers(0, cfg.W - cfg.sprite + 1, size=n)
    v = np.where(rng.spawn(2).uniform(n) < 0.5, -1, 1)
    video = np.zeros((n, S, cfg.H, cfg.W, 3))
    rows = distractor_rows(cfg)
    cy, cx = cue_box(cfg)
    k = np.arange(S)
    for i in range(n):
        xs = _bounce(x0[i], v[i], k, cfg.W - cfg.sprite)
        for f, x in enumerate(xs):
            video[i, f, rows, x:x + cfg.sprite] = DISTRACTOR_COLOR
        video[i, :cfg.L, cy, cx] = CUE_COLORS[color[i]]
        video[i, (cfg.N - 1) * cfg.L:, cy, cx] = CUE_COLORS[color[i]]
    return {"video": video, "color": color, "x0": x0, "v": v}


def read_cue(frames: np.ndarray, cfg: ProbeConfig) -> np.ndarray:
    """Classify the cue region of (..., F, H, W, 3) frames: colour index, or -1 if blank."""
    cy, cx = cue_box(cfg)
    mean_rgb = frames[..., cy, cx, :].mean(axis=(-4, -3, -2))
    palette = np.concatenate([np.zeros((1, 3)), CUE_COLORS[:cfg.n_colors]])
    d = ((mean_rgb[..., None, :] - palette) ** 2).sum(-1)
    return d.argmin(-1) - 1


def recall_accuracy(predicted_last: np.ndarray, colors: np.ndarray, cfg: ProbeConfig) -> float:
    """Fraction of examples whose final-segment cue matches the first-segment colour."""
    return float(np.mean(read_cue(predicted_last, cfg) == np.asarray(colors)))


def oracle_recall_predictions(data: dict, cfg: ProbeConfig, rng: SeededRng, sees_first: bool) -> np.ndarray:
    """Final-segment predictions of two hand-written predictors.

    With ``sees_first`` the oracle copies the colour it reads in segment 1;
    otherwise it only sees segment N-1 (which holds no cue) and must guess.
    """
    video = data["video"]
    n = len(video)
    L, N = cfg.L, cfg.N
    if sees_first:
        guess = read_cue(video[:, :L], cfg)
    else:
        seen = read_cue(video[:, (N - 2) * L:(N - 1) * L], cfg)
        assert np.all(seen == -1)
        guess = rng.integers(0, cfg.n_colors, size=n)
    out = np.zeros((n, L, cfg.H, cfg.W, 3))
    cy, cx = cue_box(cfg)
    out[:, :, cy, cx] = CUE_COLORS[guess][:, None, None, None, :]
    return out


# -- drift probe ---------------------------------------------------------------------------

def drift_initial_states(cfg: ProbeConfig, rng: SeededRng, n: int, n_sprites: int = 2) -> np.ndarray:
    """Integer states (n, n_sprites, 5): y, x, vy, vx, colour index."""
    span_y, span_x = cfg.H - cfg.sprite, cfg.W - cfg.sprite
    st = np.zeros((n, n_sprites, 5), dtype=np.int64)
    st[..., 0] = rng.spawn(0).integers(0, span_y + 1, size=(n, n_sprites))
    st[..., 1] = rng.spawn(1).integers(0, span_x + 1, size=(n, n_sprites))
    st[..., 2] = np.where(rng.spawn(2).uniform((n, n_sprites)) < 0.5, -1, 1)
    st[..., 3] = np.where(rng.spawn(3).uniform((n, n_sprites)) < 0.5, -1, 1)
    for i in range(n):
        st[i, :, 4] = rng.spawn(4, i).permutation(len(SPRITE_COLORS))[:n_sprites]
    return st


def render_drift(states: np.ndarray, cfg: ProbeConfig, start: int, length: int) -> np.ndarray:
    """Frames ``start .. start+length-1`` of every trajectory, (n, length, H, W, 3)."""
    n, n_sprites, _ = states.shape
    out = np.zeros((n, length, cfg.H, cfg.W, 3))
    k = np.arange(start, start + length)
    s = cfg.sprite
    for i in range(n):
        for j in range(n_sprites):
            y0, x0, vy, vx, col = states[i, j]
            ys = _bounce(y0, vy, k, cfg.H - s)
            xs = _bounce(x0, vx, k, cfg.W - s)
            for f in range(length):
                out[i, f, ys[f]:ys[f] + s, xs[f]:xs[f] + s] = SPRITE_COLORS[col]
    return out


def gen_dataset_drift_probe(cfg: ProbeConfig, rng: SeededRng, n_segments: int | None = None) -> dict:
    """Returns ``{"video": (n, n_segments·L, H, W, 3), "states": (n, 2, 5)}``."""
    n_segments = cfg.N if n_segments is None else n_segments
    states = drift_initial_states(cfg, rng, cfg.n_examples)
    return {"video": render_drift(states, cfg, 0, n_segments * cfg.L), "states": states}


# -- 1-D toy -------------------------------------------------------------------------------------

def gen_dataset_toy1d(rng: SeededRng, n: int = 256, N: int = 3, l: int = 4, w: int = 4) -> np.ndarray:
    """Travelling sine waves laid out as latent segments (n, N, l, 1, w, 1).

    Amplitude and phase are random per example; the wave advances one sample
    per frame, so each segment continues the previous one.
    """
    amp = 0.5 + rng.spawn(0).uniform((n, 1, 1))
    phase = 2 * np.pi * rng.spawn(1).uniform((n, 1, 1))
    frames = np.arange(N * l)[None, :, None]
    xs = np.arange(w)[None, None, :]
    wave = amp * np.sin(2 * np.pi * (xs - frames) / 8.0 + phase)
    return wave.reshape(n, N, l, 1, w, 1)
