import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

import oracles
from roesl.flowsel import (FlowField, FlowParams, Frame, FrameError, FrameSequence, dense_flow, load_frames,
                           motion_score, motion_scores, read_image, save_frames, select_frames,
                           select_from_sequence, uniform_indices, write_pgm)
from roesl.gaitenv import expert_policy, render_frames, rollout, static_trajectory


def _pair(shift, seed=0):
    tex = oracles.periodic_texture(64, seed=seed)
    moved = np.roll(tex, (shift[1], shift[0]), axis=(0, 1))
    return Frame(tex, 0), Frame(moved, 1)


# ---------------------------------------------------------------- types

def test_frame_rejects_small_and_out_of_range():
    with pytest.raises(FrameError, match="at least 8x8"):
        Frame(np.zeros((4, 10)), 0)
    with pytest.raises(FrameError, match=r"\[0,1\]"):
        Frame(np.full((8, 8), 1.5), 0)
    with pytest.raises(FrameError, match=r"\[0,1\]"):
        Frame(np.full((8, 8), np.nan), 0)


def test_sequence_needs_two_consecutive_frames():
    with pytest.raises(FrameError, match="at least 2"):
        FrameSequence.from_arrays([np.zeros((8, 8))])
    with pytest.raises(FrameError, match="consecutive"):
        FrameSequence((Frame(np.zeros((8, 8)), 0), Frame(np.zeros((8, 8)), 2)))


# ---------------------------------------------------------------- ingestion

def test_directory_of_identical_pgms(tmp_path):
    img = np.full((64, 64), 0.5)
    for k in range(10):
        write_pgm(tmp_path / f"f{k:02d}.pgm", img)
    seq = load_frames(tmp_path)
    assert len(seq) == 10
    first = seq[0].pixels
    assert all(np.array_equal(f.pixels, first) for f in seq.frames)
    assert np.all(first == first[0, 0])


def test_mixed_dimensions_names_both_sizes(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((64, 64)))
    write_pgm(tmp_path / "b.pgm", np.zeros((32, 32)))
    with pytest.raises(FrameError) as exc:
        load_frames(tmp_path)
    assert "64x64" in str(exc.value) and "32x32" in str(exc.value)
    assert "b.pgm" in str(exc.value)


def test_empty_and_unreadable_sources(tmp_path):
    with pytest.raises(FrameError, match="no PGM/PNG"):
        load_frames(tmp_path)
    (tmp_path / "x.pgm").write_bytes(b"P2\n8 8\n255\n")
    (tmp_path / "y.pgm").write_bytes(b"P5\n8 8\n255\n")
    with pytest.raises(FrameError, match="x.pgm"):
        load_frames(tmp_path)
    with pytest.raises(FrameError, match="does not exist"):
        load_frames(tmp_path / "missing")


def test_manifest_order_matches_renamed_directory(tmp_path):
    rng = np.random.default_rng(1)
    imgs = [rng.random((16, 16)) for _ in range(4)]
    src = tmp_path / "src"
    src.mkdir()
    names = ["d.pgm", "b.pgm", "a.pgm", "c.pgm"]
    for n, im in zip(names, imgs):
        write_pgm(src / n, im)
    (src / "list.txt").write_text("\n".join(names) + "\n")
    from_manifest = load_frames(src / "list.txt")
    # oracle: copies renamed so lexicographic order equals manifest order
    ren = tmp_path / "renamed"
    ren.mkdir()
    for k, n in enumerate(names):
        (ren / f"{k:03d}.pgm").write_bytes((src / n).read_bytes())
    from_dir = load_frames(ren)
    assert [f.index for f in from_manifest.frames] == [0, 1, 2, 3]
    for a, b in zip(from_manifest.frames, from_dir.frames):
        assert np.array_equal(a.pixels, b.pixels)


def test_png_gray_and_rgb_luma(tmp_path):
    gray = (np.arange(64).reshape(8, 8) * 4).astype(np.uint8)
    Image.fromarray(gray, "L").save(tmp_path / "g.png")
    assert np.allclose(read_image(tmp_path / "g.png"), gray / 255.0)
    rgb = np.zeros((8, 8, 3), np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 200, 100, 50
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    expect = (0.299 * 200 + 0.587 * 100 + 0.114 * 50) / 255.0
    assert np.allclose(read_image(tmp_path / "c.png"), expect)


def test_save_load_round_trip(tmp_path):
    seq = render_frames(rollout(expert_policy("trot"), 0, steps=5))
    save_frames(seq, tmp_path)
    back = load_frames(tmp_path)
    assert len(back) == len(seq)
    for a, b in zip(seq.frames, back.frames):
        assert np.max(np.abs(a.pixels - b.pixels)) <= 0.5 / 255 + 1e-12


# ---------------------------------------------------------------- flow

def test_identical_frames_zero_flow():
    a, _ = _pair((0, 0))
    f = dense_flow(a, Frame(a.pixels.copy(), 1))
    assert np.max(np.abs(f.dx)) <= 1e-6 and np.max(np.abs(f.dy)) <= 1e-6


def test_dimension_mismatch():
    with pytest.raises(FrameError, match="64x64 vs 32x32"):
        dense_flow(Frame(np.zeros((64, 64)), 0), Frame(np.zeros((32, 32)), 1))


def test_shift_2_0_against_block_matching(derived):
    a, b = _pair((2, 0))
    assert list(oracles.block_match_shift(a.pixels, b.pixels)) == derived["flow_shift_2_0"]
    f = dense_flow(a, b)
    ox, oy = derived["flow_shift_2_0"]
    assert 1.5 <= f.dx.mean() <= 2.5 and abs(f.dy.mean()) <= 0.5
    assert abs(f.dx.mean() - ox) <= 0.5 and abs(f.dy.mean() - oy) <= 0.5


def test_shift_1_1_against_block_matching(derived):
    a, b = _pair((1, 1))
    assert list(oracles.block_match_shift(a.pixels, b.pixels)) == derived["flow_shift_1_1"]
    f = dense_flow(a, b)
    assert 0.5 <= f.dx.mean() <= 1.5 and 0.5 <= f.dy.mean() <= 1.5


ALL_SHIFTS = [(x, y) for x in range(-3, 4) for y in range(-3, 4) if (x, y) != (0, 0)]


@pytest.mark.parametrize("shift", ALL_SHIFTS)
def test_integer_shift_recovery(shift):
    a, b = _pair(shift, seed=2)
    assert oracles.block_match_shift(a.pixels, b.pixels) == shift
    f = dense_flow(a, b)
    assert abs(f.dx.mean() - shift[0]) <= 0.5
    assert abs(f.dy.mean() - shift[1]) <= 0.5


def test_flow_deterministic():
    a, b = _pair((1, 0))
    f1, f2 = dense_flow(a, b), dense_flow(a, b)
    assert np.array_equal(f1.dx, f2.dx) and np.array_equal(f1.dy, f2.dy)


def test_flow_params_validate():
    with pytest.raises(ValueError, match="flow.alpha"):
        FlowParams(alpha=0).validate()
    with pytest.raises(ValueError, match="flow.iterations"):
        FlowParams(iterations=0).validate()
    with pytest.raises(ValueError, match="flow.warps"):
        FlowParams(warps=0).validate()


# ---------------------------------------------------------------- motion score

def test_motion_score_examples(derived):
    assert motion_score(FlowField(np.zeros((8, 8)), np.zeros((8, 8)))) == 0.0
    assert motion_score(FlowField(np.full((5, 7), 3.0), np.full((5, 7), 4.0))) == derived["sigma_constant_3_4"] == 5.0
    f = FlowField(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]]))
    assert motion_score(f) == pytest.approx(derived["sigma_2x1"], abs=1e-15)


field = arrays(np.float64, (6, 5), elements=st.floats(-50, 50, allow_nan=False))


@given(field, field, st.floats(0, 10))
def test_motion_score_homogeneous_and_nonnegative(dx, dy, c):
    s = motion_score(FlowField(dx, dy))
    assert s >= 0
    assert s == pytest.approx(oracles.mean_norm_loop(dx, dy), rel=1e-12, abs=1e-12)
    scaled = motion_score(FlowField(c * dx, c * dy))
    assert scaled == pytest.approx(c * s, rel=1e-9, abs=1e-300)


# ---------------------------------------------------------------- selection

def test_select_examples(derived):
    r = select_frames([0.1, 5.0, 0.2, 4.0, 0.3], 2)
    assert r.indices == (2, 4) and r.tags == ("motion", "motion")
    assert select_frames([1.0, 1.0, 1.0], 3).indices == (1, 2, 3)
    r = select_frames([5.0, 0, 0, 0, 0, 0, 0], 3)
    assert list(r.indices) == derived["topup_example"]
    assert dict(zip(r.indices, r.tags)) == {1: "motion", 3: "uniform-topup", 6: "uniform-topup"}


def test_select_errors():
    with pytest.raises(ValueError, match="K must be >= 1"):
        select_frames([1.0], 0)
    with pytest.raises(ValueError, match="non-empty"):
        select_frames([], 2)


def test_ties_break_toward_lower_index():
    assert select_frames([3.0, 1.0, 3.0, 3.0, 0.0], 2).indices == (1, 3)


@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=30), st.integers(1, 12))
def test_selection_invariants(scores, k):
    r = select_frames(scores, k)
    n = len(scores)
    assert len(r.indices) == min(k, n)
    assert len(set(r.indices)) == len(r.indices)
    assert list(r.indices) == sorted(r.indices)
    assert all(1 <= i <= n for i in r.indices)
    unselected = [scores[i - 1] for i in range(1, n + 1) if i not in r.indices]
    for i, tag in zip(r.indices, r.tags):
        if tag == "motion":
            assert scores[i - 1] > np.mean(scores)
            assert all(scores[i - 1] >= s for s in unselected)


@given(st.integers(2, 40), st.integers(1, 12))
def test_topup_matches_formula(n, m):
    pool = list(range(1, n + 1))
    m = min(m, n)
    scores = [0.0] * n  # nothing above the mean, so everything is top-up
    r = select_frames(scores, m)
    assert list(r.indices) == sorted(oracles.even_spacing(pool, m))
    assert set(r.tags) == {"uniform-topup"}


def test_full_chain_motion_frames():
    tex = oracles.periodic_texture(64, seed=3)
    frames, cur = [], tex
    for k in range(14):
        if k in (3, 7, 11):
            cur = np.roll(cur, (0, 3), axis=(0, 1))
        frames.append(cur)
    sel, scores = select_from_sequence(FrameSequence.from_arrays(frames), 3)
    assert sel.indices == (3, 7, 11)
    assert set(sel.tags) == {"motion"}
    assert len(scores) == 13


def test_parallel_scores_match_serial():
    seq = render_frames(rollout(expert_policy("bound"), 1, steps=12))
    _, serial = select_from_sequence(seq, 4)
    _, par = select_from_sequence(seq, 4, workers=3)
    assert np.array_equal(serial, par)


def test_rendered_gaits_move_and_static_scene_does_not():
    moving = motion_scores(render_frames(rollout(expert_policy("trot"), 4, steps=20)))
    assert np.all(moving > 0)
    still = motion_scores(render_frames(static_trajectory([0.1, 0.2, 0.3, 0.4], 6)))
    assert np.all(still == 0)


def test_uniform_indices():
    assert uniform_indices(9, 4) == oracles.even_spacing(list(range(1, 9)), 4)
    assert uniform_indices(3, 8) == [1, 2]
