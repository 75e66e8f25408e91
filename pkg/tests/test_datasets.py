import numpy as np
import pytest

from malt.harness.datasets import (
    CUE_COLORS,
    DatasetConfigError,
    ProbeConfig,
    cue_box,
    distractor_rows,
    drift_initial_states,
    gen_dataset_drift_probe,
    gen_dataset_recall_probe,
    gen_dataset_toy1d,
    oracle_recall_predictions,
    read_cue,
    recall_accuracy,
    render_drift,
)
from malt.numerics import SeededRng

CFG = ProbeConfig(n_examples=64)


@pytest.fixture(scope="module")
def recall():
    return gen_dataset_recall_probe(CFG, SeededRng(0))


def test_recall_shapes_and_range(recall):
    v = recall["video"]
    assert v.shape == (64, CFG.N * CFG.L, CFG.H, CFG.W, 3)
    assert v.min() >= 0 and v.max() <= 1


def test_cue_absent_from_middle_segments(recall):
    cy, cx = cue_box(CFG)
    mid = recall["video"][:, CFG.L:(CFG.N - 1) * CFG.L, cy, cx]
    assert np.all(mid == 0)


def test_cue_present_in_first_and_last(recall):
    v, L = recall["video"], CFG.L
    assert np.array_equal(read_cue(v[:, :L], CFG), recall["color"])
    assert np.array_equal(read_cue(v[:, -L:], CFG), recall["color"])


def test_distractor_stays_out_of_cue_region(recall):
    rows = distractor_rows(CFG)
    cy, _ = cue_box(CFG)
    assert rows.start >= cy.stop
    # every frame has exactly one sprite-sized distractor
    d = (recall["video"][:, :, rows] == 0.8).all(-1).sum(axis=(2, 3))
    assert np.all(d == CFG.sprite * CFG.sprite)


def test_recall_deterministic():
    a = gen_dataset_recall_probe(CFG, SeededRng(5))
    b = gen_dataset_recall_probe(CFG, SeededRng(5))
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_oracle_separation():
    cfg = ProbeConfig(n_examples=4000, n_colors=4)
    data = gen_dataset_recall_probe(cfg, SeededRng(1))
    sees = oracle_recall_predictions(data, cfg, SeededRng(2), sees_first=True)
    blind = oracle_recall_predictions(data, cfg, SeededRng(2), sees_first=False)
    assert recall_accuracy(sees, data["color"], cfg) == 1.0
    acc = recall_accuracy(blind, data["color"], cfg)
    # chance 1/4; binomial sd ~ 0.007
    assert abs(acc - 0.25) < 0.03


@pytest.mark.parametrize("kw", [dict(H=8, W=8), dict(N=2), dict(n_colors=7), dict(sprite=12)])
def test_recall_config_errors(kw):
    with pytest.raises(DatasetConfigError):
        gen_dataset_recall_probe(ProbeConfig(**kw), SeededRng(0))


def test_read_cue_blank_is_minus_one():
    assert read_cue(np.zeros((2, 8, 16, 16, 3)), CFG).tolist() == [-1, -1]
    x = np.zeros((1, 8, 16, 16, 3))
    x[..., :8, :8, :] = CUE_COLORS[2]
    assert read_cue(x, CFG).tolist() == [2]


def test_drift_reversible_and_in_bounds():
    st = drift_initial_states(CFG, SeededRng(3), 16)
    full = render_drift(st, CFG, 0, 200)
    # recomputing any window from the initial state reproduces the long render
    assert np.array_equal(render_drift(st, CFG, 137, 9), full[:, 137:146])
    # sprites never leave the frame: each frame keeps all sprite pixels
    lit = (full.sum(-1) > 0).sum(axis=(2, 3))
    assert np.all(lit >= CFG.sprite * CFG.sprite)
    assert np.all(lit <= 2 * CFG.sprite * CFG.sprite)


def test_drift_dataset_length_is_arbitrary():
    d = gen_dataset_drift_probe(ProbeConfig(n_examples=3), SeededRng(0), n_segments=7)
    assert d["video"].shape[1] == 7 * CFG.L


def test_drift_initial_states_rarely_collide():
    a = drift_initial_states(CFG, SeededRng(10), 1000)
    b = drift_initial_states(CFG, SeededRng(11), 1000)
    key = lambda s: {tuple(x.ravel()) for x in s}  # noqa: E731
    # 13^4 * 16 * 12 sprite placements/velocities/colours per example >> 1e4
    assert len(key(a) & key(b)) <= 1
    assert len(key(a)) == 1000


def test_toy1d_continuity():
    z = gen_dataset_toy1d(SeededRng(0), n=4, N=3, l=4, w=4)
    assert z.shape == (4, 3, 4, 1, 4, 1)
    frames = z.reshape(4, 12, 4)
    # the wave advances one sample per frame
    assert np.allclose(frames[:, 1:, 1:], frames[:, :-1, :-1])
