import numpy as np
import pytest
from scipy import stats

from conftest import TINY, perturb_zero_init
from malt.diffusion import (
    KV_CACHE,
    LAST_ONLY,
    RECURRENT,
    MemoryBudgetError,
    TrainConfig,
    diffusion_loss,
    eps_from_v,
    make_optimizer,
    make_schedule,
    q_sample,
    rollout_memory,
    sample_correlated_noise,
    sample_segment_index,
    segment_index_probs,
    training_step,
    v_from_eps,
    v_target,
    z0_from_v,
)
from malt.model import MALTDenoiser, memory_nbytes
from malt.numerics import ContractError, SeededRng, backward
from malt.sampling import ddim_step

S = make_schedule()


def _segs(B=4, N=4, seed=0):
    return SeededRng(seed).normal((B, N, *TINY.segment_shape))


def _copy(model):
    m = MALTDenoiser(TINY, SeededRng(99))
    m.load_state_dict(model.state_dict())
    return m


# -- schedule and identities ---------------------------------------------------------------

def test_schedule_invariants():
    assert S.T == 1000 and len(S.betas) == 1000
    assert S.betas[0] == 1e-4 and S.betas[-1] == 0.02
    assert S.alphas_bar[0] == 1.0
    assert np.all(np.diff(S.alphas_bar) < 0)
    assert np.all(np.diff(S.betas) > 0)
    with pytest.raises(ContractError):
        S.ab(1001)
    with pytest.raises(ContractError):
        make_schedule(beta_0=0.03, beta_T=0.02)


def test_v_roundtrips():
    rng = SeededRng(1)
    z0, eps = rng.normal((6, 2, 3)), rng.spawn(1).normal((6, 2, 3))
    t = np.array([1, 10, 250, 500, 999, 1000])
    zt = q_sample(z0, t, eps, S)
    v = v_target(z0, eps, t, S)
    assert np.max(np.abs(z0_from_v(zt, v, t, S) - z0)) < 1e-12
    assert np.max(np.abs(eps_from_v(zt, v, t, S) - eps)) < 1e-12
    assert np.max(np.abs(v_from_eps(zt, eps, t, S) - v)) < 1e-9  # divides by sqrt(ab_T) ~ 6e-3


def test_q_sample_t0_is_identity():
    z0 = SeededRng(2).normal((3, 4))
    assert np.array_equal(q_sample(z0, 0, np.ones_like(z0), S), z0)
    with pytest.raises(ContractError):
        q_sample(z0, 5, np.ones((4, 3)), S)


def test_ddim_step_exact_with_true_v():
    rng = SeededRng(3)
    z0, eps = rng.normal((2, 5)), rng.spawn(1).normal((2, 5))
    for t, tn in [(1000, 980), (500, 100), (20, 0)]:
        zt = q_sample(z0, t, eps, S)
        out = ddim_step(zt, v_target(z0, eps, t, S), t, tn, S)
        assert np.max(np.abs(out - q_sample(z0, tn, eps, S))) < 1e-12
    with pytest.raises(ContractError):
        ddim_step(z0, z0, 10, 20, S)


# -- priors --------------------------------------------------------------------------------

def test_correlated_noise_statistics():
    a = 0.8
    x = sample_correlated_noise((100_000, 2, 1, 1, 1), a, SeededRng(4))
    f0, f1 = x[:, 0].ravel(), x[:, 1].ravel()
    assert stats.kstest(f0, "norm").pvalue > 1e-3
    assert abs(np.corrcoef(f0, f1)[0, 1] - a * a / (1 + a * a)) < 0.02


def test_correlated_noise_alpha_zero_exact():
    assert np.array_equal(sample_correlated_noise((3, 2, 2, 2, 1), 0.0, SeededRng(5)), SeededRng(5).normal((3, 2, 2, 2, 1)))
    with pytest.raises(ContractError):
        sample_correlated_noise((1, 1, 1, 1), -0.1, SeededRng(0))


@pytest.mark.parametrize("N", [1, 2, 4, 7])
def test_segment_index_probs(N):
    p = segment_index_probs(N)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)
    if N > 1:
        assert p[0] == 0.5 and np.allclose(p[1:], 1 / (2 * (N - 1)))
    draws = sample_segment_index(N, SeededRng(N), size=100_000)
    counts = np.bincount(draws, minlength=N)
    sd = np.sqrt(100_000 * p * (1 - p))
    assert np.all(np.abs(counts - 100_000 * p) <= 3 * sd + 1e-9)


# -- memory --------------------------------------------------------------------------------

def test_stop_grad_audit():
    base = perturb_zero_init(MALTDenoiser(TINY, SeededRng(0)))
    segs = _segs(B=2)
    n = 3
    for stop, expect_old in [(True, False), (False, True)]:
        steps = [_copy(base) for _ in range(n)]
        mem = rollout_memory(base, segs[:, :n], 0.0, None, SeededRng(1), RECURRENT,
                             stop_grad_prev=stop, step_models=steps)
        v, _ = base(segs[:, n], np.array([100, 700]), mem)
        grads = backward((v * v).mean())
        norm = [sum(float(np.abs(grads.get(p, 0.0)).sum()) for p in m.parameters().values()) for m in steps]
        assert norm[-1] > 0
        for g in norm[:-1]:
            assert (g > 0) == expect_old
            if not expect_old:
                assert g == 0.0


def test_memory_size_recurrent_constant_kv_linear(tiny_model):
    segs = _segs(B=1, N=6)
    rec = [memory_nbytes(rollout_memory(tiny_model, segs[:, :k], 0.0, None, SeededRng(0), RECURRENT))
           for k in range(1, 7)]
    kv = [memory_nbytes(rollout_memory(tiny_model, segs[:, :k], 0.0, None, SeededRng(0), KV_CACHE))
          for k in range(1, 7)]
    assert len(set(rec)) == 1
    assert kv == [rec[0] * k for k in range(1, 7)]
    with pytest.raises(MemoryBudgetError):
        rollout_memory(tiny_model, segs, 0.0, None, SeededRng(0), KV_CACHE, kv_cap=4)


def test_last_only_reduces_to_recurrent_at_n1(tiny_model):
    segs = _segs(B=2, N=3)
    a = rollout_memory(tiny_model, segs[:, :1], 0.0, None, SeededRng(0), RECURRENT)
    b = rollout_memory(tiny_model, segs[:, :1], 0.0, None, SeededRng(0), LAST_ONLY)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    # and last_only with n=3 only sees segment 3
    c = rollout_memory(tiny_model, segs, 0.0, None, SeededRng(0), LAST_ONLY)
    d = rollout_memory(tiny_model, segs[:, 2:], 0.0, None, SeededRng(0), RECURRENT)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(c, d))


def test_noise_augmentation_changes_memory(tiny_model):
    segs = _segs(B=1, N=2)
    a = rollout_memory(tiny_model, segs, 0.0, None, SeededRng(0))
    b = rollout_memory(tiny_model, segs, 0.1, None, SeededRng(0))
    assert not np.array_equal(a[0].data, b[0].data)
    with pytest.raises(ContractError):
        rollout_memory(tiny_model, segs, -0.1, None, SeededRng(0))


def test_empty_rollout_is_zero_memory(tiny_model):
    mem = rollout_memory(tiny_model, _segs(B=2)[:, :0], 0.1, None, SeededRng(0))
    assert all(not np.any(m.data) for m in mem)


# -- training ------------------------------------------------------------------------------

def test_train_config_contracts():
    for kw in [dict(sigma_mem=-1), dict(alpha_corr=-1), dict(memory_mode="x"), dict(N=0)]:
        with pytest.raises(ContractError):
            TrainConfig(**kw)


@pytest.mark.parametrize("mode", [RECURRENT, LAST_ONLY, KV_CACHE])
def test_loss_finite_all_modes(tiny_model, mode):
    cfg = TrainConfig(N=4, memory_mode=mode)
    loss, n = diffusion_loss(tiny_model, _segs(B=6), np.arange(6) % 3, cfg, S, SeededRng(0),
                             n=np.array([0, 1, 2, 3, 3, 1]))
    assert np.isfinite(loss.item()) and loss.item() > 0
    assert n.tolist() == [0, 1, 2, 3, 3, 1]


def test_loss_needs_enough_segments(tiny_model):
    with pytest.raises(ContractError):
        diffusion_loss(tiny_model, _segs(N=2), None, TrainConfig(N=4), S, SeededRng(0))


def test_lr_zero_leaves_parameters(tiny_model):
    before = {k: v.copy() for k, v in tiny_model.state_dict().items()}
    cfg = TrainConfig(N=4, lr=0.0, batch_size=4)
    opt = make_optimizer(tiny_model, cfg)
    out = training_step(tiny_model, opt, _segs(), None, cfg, S, 0)
    assert np.isfinite(out["loss"])
    for k, v in tiny_model.state_dict().items():
        assert np.array_equal(v, before[k])


def test_training_step_deterministic():
    cfg = TrainConfig(N=4, lr=1e-3, batch_size=4, steps=10)
    states = []
    for _ in range(2):
        m = MALTDenoiser(TINY, SeededRng(0))
        opt = make_optimizer(m, cfg)
        hist = [training_step(m, opt, _segs(), None, cfg, S, s)["loss"] for s in range(3)]
        states.append((hist, m.state_dict()))
    assert states[0][0] == states[1][0]
    for k in states[0][1]:
        assert np.array_equal(states[0][1][k], states[1][1][k])


def test_resume_equivalence():
    cfg = TrainConfig(N=4, lr=1e-3, batch_size=4, steps=4)
    full = MALTDenoiser(TINY, SeededRng(0))
    opt = make_optimizer(full, cfg)
    for s in range(4):
        training_step(full, opt, _segs(seed=s), None, cfg, S, s)

    part = MALTDenoiser(TINY, SeededRng(0))
    opt = make_optimizer(part, cfg)
    for s in range(2):
        training_step(part, opt, _segs(seed=s), None, cfg, S, s)
    state, ostate = part.state_dict(), opt.state_dict()
    resumed = MALTDenoiser(TINY, SeededRng(123))
    resumed.load_state_dict(state)
    opt2 = make_optimizer(resumed, cfg)
    opt2.load_state_dict(ostate)
    for s in range(2, 4):
        training_step(resumed, opt2, _segs(seed=s), None, cfg, S, s)
    for k, v in full.state_dict().items():
        assert np.array_equal(v, resumed.state_dict()[k])


def test_non_finite_loss_raises(tiny_model):
    cfg = TrainConfig(N=4)
    segs = _segs()
    segs[0, 0, 0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        training_step(tiny_model, make_optimizer(tiny_model, cfg), segs, None, cfg, S, 0)


def test_short_training_reduces_loss():
    """A few dozen steps on a fixed batch must lower the loss on that batch."""
    cfg = TrainConfig(N=2, lr=3e-3, batch_size=8, steps=60, p_uncond=0.0)
    m = MALTDenoiser(TINY, SeededRng(1))
    opt = make_optimizer(m, cfg)
    segs = _segs(B=8, N=2, seed=7) * 0.5
    probe = lambda: diffusion_loss(m, segs, None, cfg, S, SeededRng(5)).__getitem__(0).item()  # noqa: E731
    start = probe()
    for s in range(60):
        training_step(m, opt, segs, None, cfg, S, s)
    assert probe() < start
