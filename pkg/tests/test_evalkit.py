import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from roesl.evalkit import (ContactMatrix, KeypointSeq, classify_gait, contact_matrix, contact_onsets,
                           dominant_period, dtw_distance, dtw_matrix, joint_trace, keypoints, write_gait_report)
from roesl.gaitenv import DEFAULT_CONSTANTS as C, SKILLS, RandomPolicy, expert_policy, rollout

seqs = st.lists(st.floats(-3, 3), min_size=1, max_size=6)


def _abs_cost(x, y):
    return float(np.sum(np.abs(np.asarray(x) - np.asarray(y))))


# ---------------------------------------------------------------- DTW

def test_dtw_fixture(derived):
    r = dtw_distance([0.0, 1.0, 2.0], [0.0, 2.0], metric="abs")
    assert r.distance == derived["dtw_fixture"] == 1.0
    assert oracles.dtw_enumerate([0.0, 1.0, 2.0], [0.0, 2.0]) == 1.0


@given(seqs)
def test_dtw_self_is_zero_on_diagonal(x):
    r = dtw_distance(x, x)
    assert r.distance == 0.0
    assert r.path == tuple((i, i) for i in range(len(x)))


@given(seqs, seqs, st.sampled_from(["abs", "euclidean", "sqeuclidean"]))
def test_dtw_symmetric(x, y, metric):
    assert dtw_distance(x, y, metric).distance == pytest.approx(dtw_distance(y, x, metric).distance, abs=1e-12)


@pytest.mark.parametrize("n,m", list(itertools.product(range(1, 7), repeat=2)))
def test_dtw_equals_enumeration(n, m):
    rng = np.random.default_rng(10 * n + m)
    for _ in range(3):
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(m, 2))
        d = dtw_distance(a, b, metric="abs").distance
        assert abs(d - oracles.dtw_enumerate(a, b, _abs_cost)) <= 1e-12
        # the same optimum via the explicit list of warping paths
        best = min(sum(_abs_cost(a[i], b[j]) for i, j in p) for p in oracles.all_monotone_paths(n, m))
        assert abs(d - best) <= 1e-12


@given(seqs, seqs)
def test_dtw_path_invariants(x, y):
    r = dtw_distance(x, y, metric="abs")
    assert r.path[0] == (0, 0) and r.path[-1] == (len(x) - 1, len(y) - 1)
    for (i0, j0), (i1, j1) in zip(r.path, r.path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}
    assert r.distance == pytest.approx(sum(abs(x[i] - y[j]) for i, j in r.path), abs=1e-9)
    assert r.distance >= 0.0


@given(seqs, seqs, st.lists(st.floats(-3, 3), min_size=1, max_size=4))
def test_dtw_shared_suffix_does_not_raise_normalised_distance(x, y, suffix):
    base = dtw_distance(x, y, metric="abs").distance / max(len(x), len(y))
    ext = dtw_distance(x + suffix, y + suffix, metric="abs").distance / (max(len(x), len(y)) + len(suffix))
    assert ext <= base + 1e-9


def test_dtw_band_and_errors():
    x = np.arange(6.0)
    assert dtw_distance(x, x[::-1], band=5).distance == dtw_distance(x, x[::-1]).distance
    assert dtw_distance(x, x + 0.5, band=0).distance == pytest.approx(3.0)
    with pytest.raises(ValueError, match="width mismatch"):
        dtw_distance(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError, match="non-empty"):
        dtw_distance(np.zeros((0, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError, match="unknown DTW metric"):
        dtw_distance(x, x, metric="cosine")
    with pytest.raises(ValueError, match="non-finite"):
        KeypointSeq(np.array([0.0, np.nan]))


def test_keypoints_layout():
    traj = rollout(expert_policy("trot"), 0, steps=50)
    kp = keypoints(traj, 20, "t")
    assert kp.width == 8 and len(kp) == 20
    assert np.array_equal(kp.values[:, 4:], traj.contacts[-20:].astype(float))
    with pytest.raises(ValueError, match="window 60"):
        keypoints(traj, 60)


def test_cross_skill_separation_with_experts():
    refs = [keypoints(rollout(expert_policy(s), 0), C.eval_window, s) for s in SKILLS]
    subs = [keypoints(rollout(expert_policy(s), 7), C.eval_window, s) for s in SKILLS]
    mat = dtw_matrix(refs, subs)
    for i in range(len(SKILLS)):
        assert mat[i, i] < min(mat[i, j] for j in range(len(SKILLS)) if j != i)


# ---------------------------------------------------------------- contacts and gait labels

def test_contact_matrix_rows():
    hop = contact_matrix(rollout(expert_policy("hop"), 0), C.eval_window)
    assert hop.rows.shape == (4, C.eval_window)
    assert all(np.array_equal(hop.rows[0], r) for r in hop.rows[1:])
    trot = contact_matrix(rollout(expert_policy("trot"), 0), C.eval_window).rows
    assert np.mean(trot[0] == trot[3]) >= 0.95 and np.mean(trot[1] == trot[2]) >= 0.95


def test_contact_matrix_static_and_errors():
    from roesl.gaitenv import static_trajectory

    cm = contact_matrix(static_trajectory([0.1, 0.2, 0.3, 0.5], 80))
    assert cm.rows.shape == (4, 80) and cm.rows.all()
    assert contact_onsets(cm.rows[0]).size == 0
    assert classify_gait(cm).name == "unknown"
    with pytest.raises(ValueError, match="exactly 4 rows"):
        ContactMatrix(np.zeros((3, 10), dtype=bool))

    class NoLog:
        contacts = np.zeros((0, 4))

    with pytest.raises(ValueError, match="no contact log"):
        contact_matrix(NoLog())


@pytest.mark.parametrize("skill", SKILLS)
def test_expert_gait_is_recognised(skill):
    g = classify_gait(contact_matrix(rollout(expert_policy(skill), 0), C.eval_window))
    assert g.name == skill and g.confidence >= 0.9
    assert all(0.0 <= o < 1.0 for o in g.offsets)
    assert abs(g.period - C.nominal_period) <= 2


def test_random_policy_less_confident_than_expert():
    expert = classify_gait(contact_matrix(rollout(expert_policy("trot"), 0), C.eval_window)).confidence
    rand = [classify_gait(contact_matrix(rollout(RandomPolicy(s), s), C.eval_window)).confidence for s in range(5)]
    assert np.median(rand) < expert


def test_classify_too_short():
    with pytest.raises(ValueError, match="at least 67 needed"):
        classify_gait(ContactMatrix(np.ones((4, 40), dtype=bool)))


# ---------------------------------------------------------------- joint traces

@pytest.mark.parametrize("skill", SKILLS)
def test_joint_trace_period(skill, derived):
    tr = joint_trace(rollout(expert_policy(skill), 0))
    assert tr.shape == (C.eval_window, 4)
    for col in tr.T:
        p = dominant_period(col)
        assert abs(p - derived["nominal_period_steps"]) <= 2
        assert p == oracles.autocorr_period(col)


def test_joint_trace_amplitude_and_slicing():
    traj = rollout(expert_policy("pace"), 0)
    full = joint_trace(traj, len(traj))
    assert np.array_equal(full, traj.thigh_angles)
    assert np.max(np.abs(full)) <= C.amplitude + 1e-12
    # theta = A sin(2 pi phi) exactly, so the amplitude is reached within sampling error
    np.testing.assert_allclose(full, C.amplitude * np.sin(2 * np.pi * traj.phases), rtol=0, atol=1e-6)
    # phase advances about 0.03 per step, so every cycle samples the peak closely
    assert C.amplitude - np.max(full) <= C.amplitude * (1 - math.cos(math.pi * 0.03))
    with pytest.raises(ValueError, match="shorter than window"):
        joint_trace(rollout(expert_policy("pace"), 0, steps=10))


def test_dominant_period_of_sine():
    t = np.arange(300)
    assert dominant_period(np.sin(2 * np.pi * t / 25)) == 25
    with pytest.raises(ValueError, match="constant"):
        dominant_period(np.ones(50))


# ---------------------------------------------------------------- reports

def test_gait_report_files(tmp_path):
    refs = {s: rollout(expert_policy(s), 0) for s in ("trot", "hop")}
    subs = {"pi_trot": rollout(expert_policy("trot"), 3)}
    summary = write_gait_report(tmp_path, refs, subs)
    for name in ("dtw.csv", "contacts.csv", "traces.csv", "contacts.svg", "traces.svg"):
        assert (tmp_path / name).exists()
    rows = (tmp_path / "contacts.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["FL", "FR", "RL", "RR"]
    assert len(rows[0].split(",")) == 1 + C.eval_window
    assert summary["gait"]["pi_trot"]["label"] == "trot"
    assert summary["dtw"]["trot"]["pi_trot"] < summary["dtw"]["hop"]["pi_trot"]
    header = (tmp_path / "traces.csv").read_text().splitlines()[0]
    assert header == "step,theta_FL,theta_FR,theta_RL,theta_RR"
