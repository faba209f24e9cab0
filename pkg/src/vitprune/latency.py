"""Per-block latency lookup table over (EMB, H, QK, V, MLP).

The table is profiled on a regular grid and queried by 5-axis multilinear
interpolation.  Whole-model latency is the sum over blocks; patch embedding
and classifier are left out.

Below the first grid node (1) on H, QK, V and MLP the table is extended by a
virtual node at 0 whose value is the straight-line continuation of the first
grid cell, clamped at 0.  Under an additive cost model this makes a fully
pruned component cost exactly nothing while the rest of the block keeps its
cost.
"""

from __future__ import annotations

import itertools
import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .arch import ArchSpec, BlockSpec, block_macs

logger = logging.getLogger(__name__)

AXES = ("emb", "h", "qk", "v", "mlp")
FORMAT_TAG = "# vitprune latency lut v1"

PAPER_GRID = {
    "emb": [0, 256, 512, 768],
    "h": [1, 3, 6, 9, 12],
    "qk": [1, 16, 32, 48, 64],
    "v": [1, 16, 32, 48, 64],
    "mlp": [1] + list(range(128, 3072 + 1, 128)),
}

DESK_GRID = {
    "emb": [0, 64, 128, 192],
    "h": [1, 2, 3, 4],
    "qk": [1, 8, 16, 24, 32],
    "v": [1, 8, 16, 24, 32],
    "mlp": [1] + list(range(32, 256 + 1, 32)),
}

GRIDS = {"paper": PAPER_GRID, "desk": DESK_GRID}


class ProfileError(RuntimeError):
    """A block runner failed at a grid point."""


# ---------------------------------------------------------------------------
# runners
# ---------------------------------------------------------------------------

class AnalyticRunner:
    """Closed-form MAC count of one block for ``batch_size`` images."""

    kind = "analytic"
    deterministic = True

    def __init__(self, tokens: int, batch_size: int = 1):
        self.tokens = tokens
        self.batch_size = batch_size

    def __call__(self, emb, h, qk, v, mlp) -> float:
        return float(self.batch_size * block_macs(emb, h, qk, v, mlp, self.tokens))


class WallClockRunner:
    """Median-able wall-clock seconds of this repo's own block forward."""

    kind = "wallclock"
    deterministic = False

    def __init__(self, tokens: int, batch_size: int = 8, seed: int = 0):
        self.tokens = tokens
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict = {}

    def _block(self, emb, h, qk, v, mlp):
        from .model import ViT
        key = (emb, h, qk, v, mlp)
        if key not in self._cache:
            self._cache.clear()
            spec = ArchSpec(emb=emb, blocks=(BlockSpec(h, qk, v, mlp),), patch_size=1, image_size=1,
                            num_classes=1, in_chans=1)
            model = ViT.create(spec, seed=self.seed)
            x = np.random.default_rng(self.seed).standard_normal(
                (self.batch_size, self.tokens, emb)).astype(np.float32)
            self._cache[key] = (model, x)
        return self._cache[key]

    def __call__(self, emb, h, qk, v, mlp) -> float:
        from . import tensor as T
        model, x = self._block(int(emb), int(h), int(qk), int(v), int(mlp))
        blk = model.spec.blocks[0]
        with T.no_grad():
            t0 = time.perf_counter()
            y, _ = model._attention(T.Tensor(x), 0, blk, "blocks.0.", None, None, False)
            model._mlp(y, 0, blk, "blocks.0.", None, None)
            return time.perf_counter() - t0


RUNNERS = {"analytic": AnalyticRunner, "wallclock": WallClockRunner}


# ---------------------------------------------------------------------------
# table
# ---------------------------------------------------------------------------

@dataclass
class LatencyLUT:
    axes: dict[str, np.ndarray]
    values: np.ndarray
    batch_size: int = 1
    tokens: int = 0
    runner: str = "analytic"
    repeats: int = 1
    _interp: RegularGridInterpolator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.axes = {k: np.asarray(self.axes[k], dtype=np.float64) for k in AXES}
        self.values = np.asarray(self.values, dtype=np.float64)
        shape = tuple(len(self.axes[k]) for k in AXES)
        if self.values.shape != shape:
            raise ValueError(f"values shape {self.values.shape} != grid shape {shape}")
        for k in AXES:
            a = self.axes[k]
            if len(a) < 2 or not (np.diff(a) > 0).all():
                raise ValueError(f"axis {k} must be strictly increasing with >= 2 nodes")
        if self.axes["emb"][0] != 0:
            raise ValueError("emb axis must start at 0")
        for k in AXES[1:]:
            if self.axes[k][0] != 1:
                raise ValueError(f"axis {k} must start at 1")
        if (self.values[0] != 0).any():
            raise ValueError("latency at zero EMB must be 0")
        if (self.values < 0).any():
            raise ValueError("latencies must be >= 0")

    @property
    def measured_count(self) -> int:
        return int(self.values[1:].size)

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return self.values.shape

    def grid_points(self) -> Iterable[tuple[int, ...]]:
        return itertools.product(*(range(len(self.axes[k])) for k in AXES))

    def upper_bounds(self) -> np.ndarray:
        return np.array([self.axes[k][-1] for k in AXES])

    # -- interpolation ------------------------------------------------------

    def _extended(self) -> RegularGridInterpolator:
        if self._interp is None:
            vals = self.values
            axes = [self.axes["emb"]]
            for ax, k in enumerate(AXES[1:], start=1):
                a = self.axes[k]
                first = np.take(vals, 0, axis=ax)
                second = np.take(vals, 1, axis=ax)
                slope = (second - first) / (a[1] - a[0])
                zero = np.maximum(first - slope * a[0], 0.0)
                vals = np.concatenate([np.expand_dims(zero, ax), vals], axis=ax)
                axes.append(np.concatenate([[0.0], a]))
            self._interp = RegularGridInterpolator(axes, vals, method="linear", bounds_error=True)
        return self._interp

    def query(self, points) -> np.ndarray:
        """Latency at an ``[n, 5]`` array of (emb, h, qk, v, mlp) points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[-1] != 5:
            raise ValueError("points need 5 coordinates (emb, h, qk, v, mlp)")
        hi = self.upper_bounds()
        bad = (pts < 0).any(axis=1) | (pts > hi).any(axis=1)
        if bad.any():
            raise ValueError(f"query {pts[bad][0].tolist()} outside the grid (upper bounds {hi.tolist()})")
        return self._extended()(pts)

    def at_node(self, idx: tuple[int, ...]) -> float:
        return float(self.values[idx])

    # -- persistence --------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        lines = [FORMAT_TAG]
        for k in AXES:
            lines.append(k + " " + " ".join(repr(float(x)) for x in self.axes[k]))
        lines.append(f"batch_size {self.batch_size}")
        lines.append(f"runner {self.runner} repeats {self.repeats} tokens {self.tokens}")
        for idx in self.grid_points():
            coords = " ".join(repr(float(self.axes[k][i])) for k, i in zip(AXES, idx))
            lines.append(f"{coords} {float(self.values[idx])!r}")
        tmp = f"{path}.tmp"
        with open(tmp, "w") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LatencyLUT":
        with open(path) as f:
            lines = f.read().splitlines()
        if not lines or lines[0] != FORMAT_TAG:
            raise ValueError(f"{path}: not a LUT file (missing {FORMAT_TAG!r})")
        axes = {}
        for k, line in zip(AXES, lines[1:6]):
            name, *vals = line.split()
            if name != k:
                raise ValueError(f"{path}: expected axis {k!r}, found {name!r}")
            axes[k] = [float(x) for x in vals]
        batch = int(lines[6].split()[1])
        meta = lines[7].split()
        runner, repeats, tokens = meta[1], int(meta[3]), int(meta[5])
        shape = tuple(len(axes[k]) for k in AXES)
        values = np.zeros(shape)
        lookup = [{x: i for i, x in enumerate(axes[k])} for k in AXES]
        rows = lines[8:]
        if len(rows) != values.size:
            raise ValueError(f"{path}: expected {values.size} records, found {len(rows)}")
        for row in rows:
            *coords, val = (float(x) for x in row.split())
            idx = tuple(lk[c] for lk, c in zip(lookup, coords))
            values[idx] = val
        return cls(axes, values, batch, tokens, runner, repeats)


def profile(grid: dict[str, Sequence[float]], runner: Callable, repeats: int = 100,
            batch_size: int | None = None, tokens: int | None = None,
            progress: Callable[[int, int], None] | None = None) -> LatencyLUT:
    """Measure every grid point with ``emb > 0``; the stored value is the median."""
    axes = {k: np.asarray(grid[k], dtype=np.float64) for k in AXES}
    shape = tuple(len(axes[k]) for k in AXES)
    values = np.zeros(shape)
    runs = 1 if getattr(runner, "deterministic", False) else repeats
    total = int(np.prod(shape[1:])) * (shape[0] - 1)
    done = 0
    for idx in itertools.product(*(range(n) for n in shape)):
        if idx[0] == 0:
            continue
        dims = tuple(int(axes[k][i]) for k, i in zip(AXES, idx))
        try:
            samples = [runner(*dims) for _ in range(runs)]
        except Exception as exc:  # surface the failing configuration
            raise ProfileError(f"runner failed at (emb, h, qk, v, mlp) = {dims}: {exc}") from exc
        values[idx] = statistics.median(samples)
        done += 1
        if progress is not None:
            progress(done, total)
    return LatencyLUT(axes, values,
                      batch_size=batch_size or getattr(runner, "batch_size", 1),
                      tokens=tokens or getattr(runner, "tokens", 0),
                      runner=getattr(runner, "kind", "custom"), repeats=repeats)


def analytic_lut(grid: dict | str = "desk", tokens: int = 18, batch_size: int = 1) -> LatencyLUT:
    """LUT filled by the MAC cost model, vectorised (no per-point calls)."""
    if isinstance(grid, str):
        grid = GRIDS[grid]
    axes = {k: np.asarray(grid[k], dtype=np.float64) for k in AXES}
    mesh = np.meshgrid(*(axes[k] for k in AXES), indexing="ij")
    values = batch_size * block_macs(*mesh, tokens=tokens)
    values[0] = 0.0
    return LatencyLUT(axes, values, batch_size, tokens, "analytic", 1)


# ---------------------------------------------------------------------------
# model-level estimates
# ---------------------------------------------------------------------------

def block_dims(spec_or_masks) -> np.ndarray:
    """``[num_blocks, 5]`` array of (emb, h, qk, v, mlp) per block."""
    from .model import MaskSet
    if isinstance(spec_or_masks, ArchSpec):
        s = spec_or_masks
        return np.array([(s.emb, b.h, b.qk if b.h else 0, b.v if b.h else 0, b.mlp)
                         for b in s.blocks], dtype=np.float64)
    if isinstance(spec_or_masks, MaskSet):
        rows = []
        for e, h, qk, v, mlp in spec_or_masks.dims():
            rows.append((e, h, qk if h else 0, v if h else 0, mlp))
        return np.array(rows, dtype=np.float64)
    return np.atleast_2d(np.asarray(spec_or_masks, dtype=np.float64))


def block_latencies(lut: LatencyLUT, spec_or_masks) -> np.ndarray:
    return lut.query(block_dims(spec_or_masks))


def model_latency(lut: LatencyLUT, spec_or_masks) -> float:
    """Sum of interpolated block latencies (patch embed and classifier excluded)."""
    return float(block_latencies(lut, spec_or_masks).sum())


def direct_cost(spec_or_masks, tokens: int, batch_size: int = 1) -> float:
    """Whole-block MACs computed directly from the dims (the analytic ground truth)."""
    d = block_dims(spec_or_masks)
    return float(batch_size * block_macs(d[:, 0], d[:, 1], d[:, 2], d[:, 3], d[:, 4], tokens).sum())


def r_squared(x: Sequence[float], y: Sequence[float]) -> float:
    """Coefficient of determination of the least-squares line y ~ a*x + b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(y) == 0:
        return 1.0
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    return float(1.0 - (resid ** 2).sum() / ((y - y.mean()) ** 2).sum())
