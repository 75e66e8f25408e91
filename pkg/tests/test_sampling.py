import numpy as np
import pytest

from conftest import TINY
from malt.codec import CodecConfig, LatentCodec
from malt.diffusion import make_schedule
from malt.numerics import ContractError, SeededRng, ShapeError
from malt.sampling import (
    ConfigurationError,
    check_compatible,
    generate_latents,
    generate_long_video,
    sample_segment,
    timestep_grid,
    video_prediction,
)
from oracles import GaussianDenoiser

S = make_schedule()
CODEC_CFG = CodecConfig(H=8, W=8, L=4, d_s=2, d_l=2, c=3, hidden=8, m=1)


@pytest.fixture(scope="module")
def codec():
    return LatentCodec(CODEC_CFG, SeededRng(0))


def _endpoint(oracle, M, solver, seed=0, B=64):
    z = sample_segment(oracle, None, None, S, SeededRng(seed), M=M, batch=B, alpha_corr=0.0, solver=solver)
    zT = SeededRng(seed).normal((B, 1, 1, 1, 1))
    return np.max(np.abs(z - oracle.flow_endpoint(zT)))


def test_timestep_grid():
    g = timestep_grid(1000, 50)
    assert len(g) == 51 and g[0] == 1000 and g[-1] == 0
    assert np.all(np.diff(g) == -20)
    assert np.all(np.diff(timestep_grid(1000, 7)) < 0)
    with pytest.raises(ContractError):
        timestep_grid(1000, 0)


def test_ddim_exact_for_point_mass():
    """With a degenerate data distribution the denoiser is exact and DDIM lands on it."""
    oracle = GaussianDenoiser(0.7, 0.0)
    z = sample_segment(oracle, None, None, S, SeededRng(1), M=10, batch=8, alpha_corr=0.0)
    assert np.max(np.abs(z - 0.7)) < 1e-12


def test_euler_first_order():
    oracle = GaussianDenoiser(0.5, 0.5)
    errs = [_endpoint(oracle, M, "euler") for M in (50, 100, 200)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(1.7 <= r <= 2.3 for r in ratios), ratios


def test_ddim_equals_euler_in_ve_coordinates():
    oracle = GaussianDenoiser(-0.3, 1.5)
    a = sample_segment(oracle, None, None, S, SeededRng(2), M=20, batch=4, alpha_corr=0.0, solver="ddim")
    b = sample_segment(oracle, None, None, S, SeededRng(2), M=20, batch=4, alpha_corr=0.0, solver="euler")
    assert np.max(np.abs(a - b)) < 1e-10


def test_ddim_error_shrinks_with_steps():
    oracle = GaussianDenoiser(0.5, 0.5)
    errs = [_endpoint(oracle, M, "ddim") for M in (10, 50, 250, 1000)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_unknown_solver():
    with pytest.raises(ValueError):
        sample_segment(GaussianDenoiser(0, 1), None, None, S, SeededRng(0), M=2, solver="heun")


def test_guidance_one_skips_unconditional_pass():
    oracle = GaussianDenoiser(0.0, 1.0)
    sample_segment(oracle, None, np.array([1]), S, SeededRng(0), M=5, batch=1, alpha_corr=0.0)
    assert oracle.calls == 5
    sample_segment(oracle, None, np.array([1]), S, SeededRng(0), M=5, batch=1, alpha_corr=0.0, guidance=2.0)
    assert oracle.calls == 15


def test_generation_deterministic_and_prefix_stable(tiny_model):
    a, _ = generate_latents(tiny_model, 3, S, SeededRng(4), M=4, batch=2)
    b, _ = generate_latents(tiny_model, 3, S, SeededRng(4), M=4, batch=2)
    c, _ = generate_latents(tiny_model, 2, S, SeededRng(4), M=4, batch=2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(np.array_equal(x, y) for x, y in zip(a[:2], c))


def test_prediction_depends_on_prefix_only_through_memory(tiny_model, codec):
    rng = np.random.default_rng(0)
    prefix = rng.random((2, 8, 8, 8, 3))
    out1, mem1 = video_prediction(tiny_model, codec, prefix, 1, S, SeededRng(5), M=4)
    out2, _ = video_prediction(tiny_model, codec, prefix, 1, S, SeededRng(5), M=4)
    assert out1.shape == (2, 4, 8, 8, 3)
    assert np.array_equal(out1, out2)
    # same memory, different prefix pixels -> same prediction
    direct, _ = generate_latents(tiny_model, 1, S, SeededRng(5), M=4, batch=2, memory=mem1, first_index=2)
    assert np.array_equal(codec.decode_segments(direct), out1)
    # changing the first segment changes the memory and the prediction
    alt = prefix.copy()
    alt[:, :4] = 1.0 - alt[:, :4]
    out3, _ = video_prediction(tiny_model, codec, alt, 1, S, SeededRng(5), M=4)
    assert not np.array_equal(out1, out3)


def test_prediction_n_future_zero(tiny_model, codec):
    out, mem = video_prediction(tiny_model, codec, np.zeros((1, 4, 8, 8, 3)), 0, S, SeededRng(0))
    assert out.shape == (1, 0, 8, 8, 3)
    assert len(mem) == TINY.depth


def test_prediction_shape_errors(tiny_model, codec):
    with pytest.raises(ShapeError):
        video_prediction(tiny_model, codec, np.zeros((1, 6, 8, 8, 3)), 1, S, SeededRng(0))
    with pytest.raises(ShapeError):
        video_prediction(tiny_model, codec, np.zeros((6, 8, 8, 3)), 1, S, SeededRng(0))


def test_long_video(tiny_model, codec):
    frames, segs = generate_long_video(tiny_model, codec, 2, S, SeededRng(1), M=3, batch=1)
    assert frames.shape == (1, 8, 8, 8, 3) and len(segs) == 2
    assert frames.min() >= 0 and frames.max() <= 1
    with pytest.raises(ContractError):
        generate_long_video(tiny_model, codec, 0, S, SeededRng(1))


def test_incompatible_codec(tiny_model):
    bad = LatentCodec(CodecConfig(H=8, W=8, L=4, d_s=2, d_l=2, c=4, hidden=8, m=1), SeededRng(0))
    with pytest.raises(ConfigurationError):
        check_compatible(tiny_model, bad)
    with pytest.raises(ConfigurationError):
        video_prediction(tiny_model, bad, np.zeros((1, 4, 8, 8, 3)), 1, S, SeededRng(0))
