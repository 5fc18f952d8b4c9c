"""Gait evaluation instruments: DTW over keypoint sequences, contact matrices,
gait classification from contact onsets, and joint-angle traces."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gaitenv import (DEFAULT_CONSTANTS, LEG_NAMES, LEG_PAIRS, SKILL_TABLE, GaitConstants,
                      Trajectory, circ_dist)

GAIT_LABELS = ("trot", "pace", "bound", "hop", "unknown")
CONFIDENCE_K = 2.0  # confidence = exp(-CONFIDENCE_K * summed pair error)
MIN_CONFIDENCE = 0.5


@dataclass(frozen=True)
class KeypointSeq:
    values: np.ndarray  # (T, D)
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("keypoint values must be a (T, D) array")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"keypoint sequence {self.label!r} has non-finite values")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def keypoints(traj: Trajectory, window: Optional[int] = None, label: str = "") -> KeypointSeq:
    """Thigh angles (rad) followed by contact flags, optionally the last ``window`` steps."""
    vals = np.concatenate([traj.thigh_angles, traj.contacts.astype(float)], axis=1)
    if window is not None:
        if window > len(vals):
            raise ValueError(f"trajectory has {len(vals)} steps, window {window} requested")
        vals = vals[-window:]
    return KeypointSeq(vals, label or traj.source_candidate)


# ------------------------------------------------------------------ DTW

@dataclass(frozen=True)
class DtwResult:
    distance: float
    path: tuple[tuple[int, int], ...]
    metric: str


def _cost_matrix(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    if metric == "euclidean":
        return np.sqrt(np.sum(diff * diff, axis=2))
    if metric in ("abs", "manhattan"):
        return np.sum(np.abs(diff), axis=2)
    if metric == "sqeuclidean":
        return np.sum(diff * diff, axis=2)
    raise ValueError(f"unknown DTW metric {metric!r}")


def dtw_distance(a, b, metric: str = "euclidean", band: Optional[int] = None) -> DtwResult:
    """Classic DTW with steps (1,0), (0,1), (1,1) over the full cost matrix.

    ``band`` optionally restricts |i - j| (Sakoe-Chiba); None means unrestricted.
    """
    a = a if isinstance(a, KeypointSeq) else KeypointSeq(a)
    b = b if isinstance(b, KeypointSeq) else KeypointSeq(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW needs two non-empty sequences")
    if a.width != b.width:
        raise ValueError(f"vector width mismatch: {a.width} vs {b.width}")
    n, m = len(a), len(b)
    if band is not None and band < abs(n - m):
        raise ValueError(f"band {band} cannot connect sequences of length {n} and {m}")
    cost = _cost_matrix(a.values, b.values, metric).tolist()
    inf = math.inf
    acc = [[inf] * (m + 1) for _ in range(n + 1)]
    acc[0][0] = 0.0
    for i in range(1, n + 1):
        prev, cur, crow = acc[i - 1], acc[i], cost[i - 1]
        lo, hi = 1, m
        if band is not None:
            lo, hi = max(1, i - band), min(m, i + band)
        for j in range(lo, hi + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = crow[j - 1] + best
    # backtrack, preferring the diagonal on ties
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        options = ((acc[i - 1][j - 1], i - 1, j - 1), (acc[i - 1][j], i - 1, j), (acc[i][j - 1], i, j - 1))
        _, i, j = min(options, key=lambda o: o[0])
        path.append((i - 1, j - 1))
    path.reverse()
    return DtwResult(float(acc[n][m]), tuple(path), metric)


def dtw_matrix(rows: Sequence[KeypointSeq], cols: Sequence[KeypointSeq], metric: str = "euclidean") -> np.ndarray:
    return np.array([[dtw_distance(r, c, metric).distance for c in cols] for r in rows])


# ------------------------------------------------------------------ contacts

@dataclass(frozen=True)
class ContactMatrix:
    rows: np.ndarray  # (4, T) bool, row order FL, FR, RL, RR

    def __post_init__(self):
        r = np.asarray(self.rows, dtype=bool)
        if r.ndim != 2 or r.shape[0] != 4:
            raise ValueError(f"contact matrix must have exactly 4 rows, got shape {r.shape}")
        object.__setattr__(self, "rows", r)

    @property
    def length(self) -> int:
        return self.rows.shape[1]


def contact_matrix(traj: Trajectory, window: Optional[int] = None) -> ContactMatrix:
    contacts = getattr(traj, "contacts", None)
    if contacts is None or len(contacts) == 0:
        raise ValueError("trajectory has no contact log")
    rows = np.asarray(contacts, dtype=bool).T
    if window is not None:
        rows = rows[:, -window:]
    return ContactMatrix(rows.copy())


@dataclass(frozen=True)
class GaitLabel:
    name: str
    offsets: tuple[float, ...]  # estimated (phase_j - phase_i) mod 1 per leg pair
    confidence: float
    period: float = float("nan")
    errors: tuple[tuple[str, float], ...] = ()


def contact_onsets(row: np.ndarray) -> np.ndarray:
    """Step indices where a leg goes from swing to stance."""
    row = np.asarray(row, dtype=bool)
    return np.flatnonzero(row[1:] & ~row[:-1]) + 1


def classify_gait(cm: ContactMatrix, const: GaitConstants = DEFAULT_CONSTANTS,
                  k: float = CONFIDENCE_K) -> GaitLabel:
    """Match circular leg-phase offsets estimated from contact onsets to the skill table."""
    min_len = 2.0 * const.nominal_period
    if cm.length < min_len:
        raise ValueError(f"contact matrix has {cm.length} steps; at least {math.ceil(min_len)} needed")
    onsets = [contact_onsets(r) for r in cm.rows]
    unknown = GaitLabel("unknown", tuple(0.0 for _ in LEG_PAIRS), 0.0)
    if any(len(o) == 0 for o in onsets):
        return unknown
    intervals = np.concatenate([np.diff(o) for o in onsets])
    if intervals.size == 0:
        return unknown
    period = float(np.median(intervals))
    leg_phase = []
    for o in onsets:
        ang = 2.0 * np.pi * o / period
        leg_phase.append(math.atan2(np.mean(np.sin(ang)), np.mean(np.cos(ang))) / (2.0 * np.pi))
    # a leg that is further along its cycle touches down earlier
    est = np.array([(leg_phase[i] - leg_phase[j]) % 1.0 for i, j in LEG_PAIRS])
    est = np.where(est >= 1.0, 0.0, est)
    errs = {name: float(np.sum(circ_dist(est, s.pair_targets()))) for name, s in SKILL_TABLE.items()}
    best = min(errs, key=lambda s: (errs[s], list(SKILL_TABLE).index(s)))
    conf = float(math.exp(-k * errs[best]))
    name = best if conf >= MIN_CONFIDENCE else "unknown"
    return GaitLabel(name, tuple(float(x) for x in est), conf, period, tuple(errs.items()))


# ------------------------------------------------------------------ traces

def joint_trace(traj: Trajectory, window: int = DEFAULT_CONSTANTS.eval_window) -> np.ndarray:
    """Final ``window`` steps of the thigh angles, columns FL, FR, RL, RR."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(traj) < window:
        raise ValueError(f"trajectory has {len(traj)} steps, shorter than window {window}")
    return traj.thigh_angles[-window:].copy()


def dominant_period(series: np.ndarray, min_lag: int = 2) -> int:
    """Lag of the highest autocorrelation peak after the first zero crossing."""
    x = np.asarray(series, dtype=float)
    x = x - x.mean()
    n = len(x)
    denom = float(np.dot(x, x))
    if denom == 0.0:
        raise ValueError("constant series has no period")
    ac = np.array([np.dot(x[: n - lag], x[lag:]) / denom for lag in range(n // 2)])
    neg = np.flatnonzero(ac < 0)
    start = max(min_lag, int(neg[0]) if neg.size else min_lag)
    peaks = [lag for lag in range(start, len(ac) - 1) if ac[lag] >= ac[lag - 1] and ac[lag] >= ac[lag + 1]]
    if not peaks:
        raise ValueError("no autocorrelation peak found")
    return int(max(peaks, key=lambda lag: (ac[lag], -lag)))


# ------------------------------------------------------------------ reports

def write_dtw_csv(path, row_labels: Sequence[str], col_labels: Sequence[str], matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference", *col_labels])
        for lab, row in zip(row_labels, matrix):
            w.writerow([lab, *(repr(float(x)) for x in row)])


def write_contacts_csv(path, cm: ContactMatrix) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, row in zip(LEG_NAMES, cm.rows):
            w.writerow([name, *row.astype(int).tolist()])


def write_traces_csv(path, traces: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *(f"theta_{n}" for n in LEG_NAMES)])
        for t, row in enumerate(traces):
            w.writerow([t, *(repr(float(x)) for x in row)])


def contacts_svg(cm: ContactMatrix, cell: float = 3.0, row_h: float = 14.0) -> str:
    width = 30 + cell * cm.length
    height = row_h * 4 + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">']
    for r, name in enumerate(LEG_NAMES):
        y = 5 + r * row_h
        parts.append(f'<text x="2" y="{y + row_h * 0.7:g}" font-size="9">{name}</text>')
        row = cm.rows[r]
        t = 0
        while t < cm.length:
            if row[t]:
                s = t
                while t < cm.length and row[t]:
                    t += 1
                parts.append(f'<rect x="{30 + s * cell:g}" y="{y:g}" width="{(t - s) * cell:g}" '
                             f'height="{row_h - 3:g}" fill="#3060c0"/>')
            else:
                t += 1
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def traces_svg(traces: np.ndarray, width: float = 600.0, height: float = 200.0) -> str:
    colors = ("#c03030", "#3060c0", "#30a050", "#a06020")
    t = np.arange(len(traces))
    span = float(np.max(np.abs(traces))) or 1.0
    xs = t * width / max(1, len(traces) - 1)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}">']
    for col, color, name in zip(traces.T, colors, LEG_NAMES):
        ys = height / 2 - col / span * (height / 2 - 5)
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"><title>{name}</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_gait_report(out_dir, references: dict[str, Trajectory], subjects: dict[str, Trajectory],
                      window: int = DEFAULT_CONSTANTS.eval_window,
                      metric: str = "euclidean") -> dict:
    """Emit dtw.csv, contacts.csv, traces.csv (+ SVGs) and return a summary dict.

    Contacts and traces are written for the first subject; per-subject gait
    labels go into the summary.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref_kp = [keypoints(t, window, name) for name, t in references.items()]
    sub_kp = [keypoints(t, window, name) for name, t in subjects.items()]
    mat = dtw_matrix(ref_kp, sub_kp, metric)
    write_dtw_csv(out / "dtw.csv", list(references), list(subjects), mat)
    first = next(iter(subjects.values()))
    cm = contact_matrix(first, window)
    write_contacts_csv(out / "contacts.csv", cm)
    traces = joint_trace(first, window)
    write_traces_csv(out / "traces.csv", traces)
    (out / "contacts.svg").write_text(contacts_svg(cm))
    (out / "traces.svg").write_text(traces_svg(traces))
    labels = {}
    for name, traj in subjects.items():
        g = classify_gait(contact_matrix(traj, window))
        labels[name] = {"label": g.name, "confidence": g.confidence}
    return {"dtw": {r: dict(zip(subjects, map(float, row))) for r, row in zip(references, mat)},
            "gait": labels}

