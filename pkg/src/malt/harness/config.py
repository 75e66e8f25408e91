"""Run configuration: one JSON document holds every tunable of a run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..codec import CodecConfig
from ..diffusion import MEMORY_MODES, RECURRENT, TrainConfig
from ..model import ModelConfig
from ..numerics import ContractError
from ..sampling import ConfigurationError
from .datasets import ProbeConfig

DATASETS = ("recall", "drift")


@dataclass(frozen=True)
class AblationMode:
    """Memory mode plus the robust-training switch (noisy memory and correlated prior together)."""

    mode: str = RECURRENT
    robust: bool = True

    def __post_init__(self):
        if self.mode not in MEMORY_MODES:
            raise ConfigurationError(f"memory mode must be one of {MEMORY_MODES}, got {self.mode!r}")

    @property
    def tag(self) -> str:
        return f"{self.mode}{'' if self.robust else '-nonrobust'}"


@dataclass(frozen=True)
class CodecTrainConfig:
    steps: int = 2500
    lr: float = 2e-3
    batch_size: int = 32
    n_examples: int = 384
    seed: int = 0


@dataclass(frozen=True)
class SamplingConfig:
    M: int = 50
    guidance: float = 1.0
    solver: str = "ddim"

    def __post_init__(self):
        if self.solver not in ("ddim", "euler"):
            raise ConfigurationError(f"solver must be 'ddim' or 'euler', got {self.solver!r}")
        if self.M < 1:
            raise ConfigurationError("M must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    n_eval: int = 64
    prefix_segments: int = 1      # drift rollouts start from this many ground-truth segments
    rollout_factor: int = 3       # drift rollouts span rollout_factor * N segments in total


_SECTIONS = {
    "probe": ProbeConfig,
    "codec": CodecConfig,
    "codec_train": CodecTrainConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sampling": SamplingConfig,
    "ablation": AblationMode,
    "eval": EvalConfig,
}

# Noise levels used when the robust switch is on; off forces both to zero.
ROBUST_SIGMA_MEM = 0.1
ROBUST_ALPHA_CORR = 1.0


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    dataset: str = "recall"
    seed: int = 0
    out: str = "runs"
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    codec: CodecConfig = field(default_factory=lambda: CodecConfig(H=16, W=16, L=8, c=16, hidden=96))
    codec_train: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(depth=4, width=64, heads=4, p_l=1, p_s=2,
                                                                   l=2, h=4, w=4, c=16))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2500, lr=1e-3, batch_size=16))
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    ablation: AblationMode = field(default_factory=AblationMode)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        cc, mc = self.codec, self.model
        if (cc.H, cc.W, cc.L) != (self.probe.H, self.probe.W, self.probe.L):
            raise ConfigurationError(
                f"codec frames {(cc.H, cc.W, cc.L)} differ from probe frames "
                f"{(self.probe.H, self.probe.W, self.probe.L)}")
        if cc.m != 1:
            raise ConfigurationError("the harness encodes one segment per chunk (codec.m must be 1)")
        if (cc.l, cc.h, cc.w, cc.c) != mc.segment_shape:
            raise ConfigurationError(
                f"codec latent segment {(cc.l, cc.h, cc.w, cc.c)} != model input {mc.segment_shape}")
        if self.train.N != self.probe.N:
            raise ConfigurationError(f"train.N={self.train.N} differs from probe.N={self.probe.N}")

    # -- derived views -----------------------------------------------------------------------

    def effective_train(self) -> TrainConfig:
        """TrainConfig with the ablation mode, robust switch and run seed applied."""
        robust = self.ablation.robust
        return replace(self.train,
                       memory_mode=self.ablation.mode,
                       sigma_mem=ROBUST_SIGMA_MEM if robust else 0.0,
                       alpha_corr=ROBUST_ALPHA_CORR if robust else 0.0,
                       seed=self.seed)

    def with_ablation(self, mode: str, robust: bool | None = None) -> "RunConfig":
        robust = self.ablation.robust if robust is None else robust
        ab = AblationMode(mode, robust)
        return replace(self, ablation=ab, name=f"{self.name}-{ab.tag}")

    def to_dict(self) -> dict:
        d = {"name": self.name, "dataset": self.dataset, "seed": self.seed, "out": self.out}
        for key in _SECTIONS:
            d[key] = asdict(getattr(self, key))
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        base = cls()
        unknown = set(d) - {"name", "dataset", "seed", "out", *_SECTIONS}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: d[k] for k in ("name", "dataset", "seed", "out") if k in d}
        for key, typ in _SECTIONS.items():
            sub = dict(d.get(key, {}))
            allowed = {f.name for f in fields(typ)}
            bad = set(sub) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in '{key}': {sorted(bad)}")
            merged = {**asdict(getattr(base, key)), **sub}
            if key == "model":
                # an unspecified layout is re-derived from the (possibly new) depth
                merged["window_layout"] = tuple(sub.get("window_layout", ()))
            try:
                kw[key] = typ(**merged)
            except (TypeError, ValueError, ContractError) as e:
                raise ConfigurationError(f"invalid '{key}' section: {e}") from None
        if "model" not in d or not {"l", "h", "w", "c"} & set(d["model"]):
            # latent geometry follows the codec unless spelled out
            c = kw.get("codec", base.codec)
            kw["model"] = replace(kw.get("model", base.model), l=c.l, h=c.h, w=c.w, c=c.c)
        if "train" not in d or "N" not in d.get("train", {}):
            p = kw.get("probe", base.probe)
            kw["train"] = replace(kw.get("train", base.train), N=p.N)
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return RunConfig.from_dict(d)
