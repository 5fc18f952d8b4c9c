"""Motion-aware frame selection.

Frames are grayscale images in [0, 1]. Consecutive pairs get a Horn-Schunck
dense flow field, each interval k (between frames k-1 and k) gets the mean
flow magnitude as its motion score, and the K highest-scoring intervals are
selected, topped up with evenly spaced indices when too few intervals show
real motion.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
MIN_SIDE = 8
IMAGE_SUFFIXES = (".pgm", ".png")


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray  # (height, width) in [0, 1]
    index: int

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 2:
            raise FrameError("frame pixels must be a 2-D array")
        if p.shape[0] < MIN_SIDE or p.shape[1] < MIN_SIDE:
            raise FrameError(f"frame must be at least {MIN_SIDE}x{MIN_SIDE}, got {p.shape[1]}x{p.shape[0]}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise FrameError("frame intensities must lie in [0,1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class FrameSequence:
    frames: tuple[Frame, ...]

    def __post_init__(self):
        if len(self.frames) < 2:
            raise FrameError("a frame sequence needs at least 2 frames")
        shape = self.frames[0].pixels.shape
        for k, f in enumerate(self.frames):
            if f.index != k:
                raise FrameError(f"frame indices must be consecutive from 0; found {f.index} at position {k}")
            if f.pixels.shape != shape:
                raise FrameError(f"frame {k} is {f.width}x{f.height}, expected {shape[1]}x{shape[0]}")

    @classmethod
    def from_arrays(cls, arrays: Sequence[np.ndarray]) -> "FrameSequence":
        return cls(tuple(Frame(np.asarray(a, dtype=float), k) for k, a in enumerate(arrays)))

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, k: int) -> Frame:
        return self.frames[k]


@dataclass(frozen=True)
class FlowField:
    dx: np.ndarray  # (height, width)
    dy: np.ndarray

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]


@dataclass(frozen=True)
class FlowParams:
    alpha: float = 10.0
    iterations: int = 100
    intensity_scale: float = 255.0
    warps: int = 2  # outer re-linearisations; 1 is plain single-pass Horn-Schunck

    def validate(self, prefix: str = "flow") -> None:
        if not self.alpha > 0:
            raise ValueError(f"{prefix}.alpha must be > 0")
        if self.iterations < 1:
            raise ValueError(f"{prefix}.iterations must be >= 1")
        if not self.intensity_scale > 0:
            raise ValueError(f"{prefix}.intensity_scale must be > 0")
        if self.warps < 1:
            raise ValueError(f"{prefix}.warps must be >= 1")


@dataclass(frozen=True)
class SelectionResult:
    indices: tuple[int, ...]
    tags: tuple[str, ...]  # "motion" | "uniform-topup", aligned with indices
    target_count: int


# ------------------------------------------------------------------ ingestion

def read_image(path) -> np.ndarray:
    """Read an 8-bit PGM (P5) or PNG as luma in [0, 1]."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".pgm":
            return _read_pgm(path)
        with Image.open(path) as im:
            if im.mode in ("L", "I;16", "I", "P"):
                arr = np.asarray(im.convert("L"), dtype=float)
            else:
                rgb = np.asarray(im.convert("RGB"), dtype=float)
                arr = rgb @ LUMA
    except FrameError:
        raise
    except (OSError, ValueError) as exc:
        raise FrameError(f"cannot read image {path}: {exc}") from None
    return np.clip(arr / 255.0, 0.0, 1.0)


def _read_pgm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameError(f"cannot read image {path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FrameError(f"cannot read image {path}: only binary PGM (P5) is supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FrameError(f"cannot read image {path}: only 8-bit PGM is supported")
    pos += 1
    raw = data[pos:pos + width * height]
    if len(raw) != width * height:
        raise FrameError(f"cannot read image {path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).astype(float) / 255.0


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    raw = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + raw)


def load_frames(source) -> FrameSequence:
    """Load frames from a directory (lexicographic order) or a manifest file."""
    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise FrameError(f"no PGM/PNG frames found in {source}")
    elif source.is_file():
        base = source.parent
        paths = [base / line.strip() for line in source.read_text().splitlines() if line.strip()]
        if not paths:
            raise FrameError(f"manifest {source} lists no frames")
    else:
        raise FrameError(f"frame source {source} does not exist")
    if len(paths) < 2:
        raise FrameError(f"{source} contains {len(paths)} frame(s); at least 2 are required")
    arrays = []
    for p in paths:
        if not p.is_file():
            raise FrameError(f"frame file {p} does not exist")
        arr = read_image(p)
        if arrays and arr.shape != arrays[0].shape:
            first = arrays[0].shape
            raise FrameError(
                f"dimension mismatch: {p} is {arr.shape[1]}x{arr.shape[0]} but {paths[0]} is {first[1]}x{first[0]}")
        arrays.append(arr)
    return FrameSequence.from_arrays(arrays)


def save_frames(seq: FrameSequence, directory, prefix: str = "frame") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for f in seq.frames:
        p = directory / f"{prefix}_{f.index:05d}.pgm"
        write_pgm(p, f.pixels)
        out.append(p)
    return out


# ------------------------------------------------------------------ flow

# Horn-Schunck neighbourhood average
_HS_KERNEL = np.array([[1 / 12, 1 / 6, 1 / 12],
                       [1 / 6, 0.0, 1 / 6],
                       [1 / 12, 1 / 6, 1 / 12]])


def dense_flow(prev: Frame, next: Frame, params: FlowParams = FlowParams()) -> FlowField:
    """Horn-Schunck flow from ``prev`` to ``next`` (pixels per interval)."""
    if prev.pixels.shape != next.pixels.shape:
        raise FrameError(
            f"dimension mismatch: {prev.width}x{prev.height} vs {next.width}x{next.height}")
    a = prev.pixels * params.intensity_scale
    b = next.pixels * params.intensity_scale
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    grid = None
    for w in range(params.warps):
        if w == 0:
            bw = b
        else:
            # pull next back along the current estimate and solve for the increment
            if grid is None:
                grid = np.mgrid[0:a.shape[0], 0:a.shape[1]].astype(float)
            bw = ndimage.map_coordinates(b, [grid[0] + v, grid[1] + u], order=1, mode="reflect")
        padded = np.pad(0.5 * (a + bw), 1, mode="reflect")
        ix = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
        iy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
        it = bw - a
        denom = params.alpha**2 + ix * ix + iy * iy
        du = np.zeros_like(a)
        dv = np.zeros_like(a)
        for _ in range(params.iterations):
            # smoothness acts on the total flow u + du
            u_bar = ndimage.convolve(u + du, _HS_KERNEL, mode="reflect") - u
            v_bar = ndimage.convolve(v + dv, _HS_KERNEL, mode="reflect") - v
            t = (ix * u_bar + iy * v_bar + it) / denom
            du = u_bar - ix * t
            dv = v_bar - iy * t
        u = u + du
        v = v + dv
    return FlowField(u, v)


def motion_score(flow: FlowField) -> float:
    """Mean per-pixel displacement magnitude."""
    return float(np.mean(np.hypot(flow.dx, flow.dy)))


def motion_scores(seq: FrameSequence, params: FlowParams = FlowParams()) -> np.ndarray:
    """Scores for intervals k = 1..T-1 (entry k-1 holds interval k)."""
    return np.array([motion_score(dense_flow(seq[k - 1], seq[k], params)) for k in range(1, len(seq))])


def _even_topup(pool: list[int], m: int) -> list[int]:
    picked: list[int] = []
    used: set[int] = set()
    n = len(pool)
    for j in range(m):
        pos = int(np.floor((j + 0.5) * n / m))
        while pool[pos % n] in used:
            pos += 1
        used.add(pool[pos % n])
        picked.append(pool[pos % n])
    return picked


def select_frames(scores, k: int = 8) -> SelectionResult:
    """Pick up to ``k`` 1-based interval indices by descending motion score.

    An interval counts as motion only if its score exceeds the mean score;
    any shortfall is filled with evenly spaced indices from the rest.
    """
    scores = np.asarray(scores, dtype=float)
    if k <= 0:
        raise ValueError(f"target count K must be >= 1, got {k}")
    if scores.size == 0:
        raise ValueError("motion scores must be non-empty")
    target = min(k, scores.size)
    order = np.argsort(-scores, kind="stable")
    threshold = scores.mean()
    motion = [int(i) + 1 for i in order[:target] if scores[i] > threshold]
    pool = [i for i in range(1, scores.size + 1) if i not in set(motion)]
    topup = _even_topup(pool, target - len(motion)) if len(motion) < target else []
    tagged = sorted([(i, "motion") for i in motion] + [(i, "uniform-topup") for i in topup])
    return SelectionResult(tuple(i for i, _ in tagged), tuple(t for _, t in tagged), k)


def select_from_sequence(seq: FrameSequence, k: int = 8, params: FlowParams = FlowParams(),
                         workers: int = 1) -> tuple[SelectionResult, np.ndarray]:
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            scores = np.array(list(pool.map(
                lambda kk: motion_score(dense_flow(seq[kk - 1], seq[kk], params)), range(1, len(seq)))))
    else:
        scores = motion_scores(seq, params)
    return select_frames(scores, k), scores


def uniform_indices(num_frames: int, k: int) -> list[int]:
    """Evenly spaced 1-based indices (the uniform-sampling comparator)."""
    return _even_topup(list(range(1, num_frames)), min(k, num_frames - 1))


def cpu_workers() -> int:
    return max(1, (os.cpu_count() or 1))
