"""Procedural toroidal height maps with a controlled number of peaks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .torus import BOX_KERNEL, GRID, Node, circular_conv3x3, toroidal_manhattan

MAX_HEIGHT = 32.0

# wrapped 8-neighborhood offsets as (dy, dx)
_MOORE = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class HeightMap:
    values: np.ndarray  # [y, x]
    peaks: int
    seed: int
    landscape_id: str

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class PeakReport:
    """Strict local maxima ordered by height, tallest first."""

    nodes: list[Node]
    heights: np.ndarray
    prominences: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def global_max(self) -> float:
        return float(self.heights[0]) if len(self.nodes) else float("nan")


@dataclass(frozen=True)
class GeneratorParams:
    smoothing_passes: int = 2
    min_separation: int = 6
    min_prominence: float = 2.0
    max_attempts: int = 1000
    # von Mises concentration per bump; larger is narrower
    kappa_single: tuple[float, float] = (1.2, 2.5)
    kappa_multi: tuple[float, float] = (3.0, 6.0)
    # amplitude of the three minor peaks relative to the global one
    minor_amplitude: tuple[float, float] = (0.45, 0.85)
    placement_tries: int = 200


def landscape_id_for(seed: int, peaks: int) -> str:
    return f"L{peaks}-{seed & 0xFFFFFFFFFFFFFFFF:016x}"


def height_at(hmap: HeightMap, node: Node) -> float:
    n = hmap.size
    return float(hmap.values[node[1] % n, node[0] % n])


def _bump(center: Node, kappa: float, n: int) -> np.ndarray:
    theta = 2.0 * np.pi * np.arange(n) / n
    gx = np.exp(kappa * (np.cos(theta - theta[center[0]]) - 1.0))
    gy = np.exp(kappa * (np.cos(theta - theta[center[1]]) - 1.0))
    return gy[:, None] * gx[None, :]


def _place_centers(rng: np.random.Generator, count: int, params: GeneratorParams, n: int):
    centers: list[Node] = []
    for _ in range(params.placement_tries):
        if len(centers) == count:
            break
        cand = Node(int(rng.integers(n)), int(rng.integers(n)))
        if all(toroidal_manhattan(cand, c, n).total >= params.min_separation for c in centers):
            centers.append(cand)
    return centers if len(centers) == count else None


def _rescale(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo) * MAX_HEIGHT


def _acceptable(values: np.ndarray, peaks: int, params: GeneratorParams) -> bool:
    report = detect_peaks(values)
    if len(report) != peaks:
        return False
    if np.any(report.prominences < params.min_prominence):
        return False
    if peaks > 1 and not report.heights[0] > report.heights[1]:
        return False
    n = values.shape[0]
    for i in range(len(report)):
        for j in range(i + 1, len(report)):
            if toroidal_manhattan(report.nodes[i], report.nodes[j], n).total < params.min_separation:
                return False
    return True


def generate(
    seed: int, peaks: int, params: GeneratorParams | None = None, n: int = GRID
) -> HeightMap:
    """Draw a height map in [0, 32] with exactly ``peaks`` strict local maxima.

    Peaks are wrapped von Mises bumps placed by rejection sampling, summed,
    box-smoothed ``smoothing_passes`` times and rescaled so the global
    maximum is exactly 32. Candidates whose peak structure drifts during
    smoothing are redrawn.
    """
    if peaks not in (1, 4):
        raise ValueError(f"peaks must be 1 or 4, got {peaks}")
    params = params or GeneratorParams()
    rng = np.random.default_rng(seed)
    kappa_lo, kappa_hi = params.kappa_single if peaks == 1 else params.kappa_multi
    for _ in range(params.max_attempts):
        centers = _place_centers(rng, peaks, params, n)
        if centers is None:
            continue
        amps = np.ones(peaks)
        if peaks > 1:
            amps[1:] = rng.uniform(*params.minor_amplitude, size=peaks - 1)
        kappas = rng.uniform(kappa_lo, kappa_hi, size=peaks)
        values = sum(a * _bump(c, k, n) for a, c, k in zip(amps, centers, kappas))
        for _ in range(params.smoothing_passes):
            values = circular_conv3x3(values, BOX_KERNEL)
        values = _rescale(values)
        if _acceptable(values, peaks, params):
            return HeightMap(values, peaks, seed, landscape_id_for(seed, peaks))
    raise GenerationFailed(
        f"no valid {peaks}-peak map after {params.max_attempts} attempts (seed={seed})"
    )


def strict_maxima_mask(values: np.ndarray) -> np.ndarray:
    mask = np.ones(values.shape, dtype=bool)
    for dy, dx in _MOORE:
        mask &= values > np.roll(values, shift=(dy, dx), axis=(0, 1))
    return mask


def detect_peaks(hmap: HeightMap | np.ndarray) -> PeakReport:
    """Strict local maxima (wrapped 8-neighborhood) with topographic prominence.

    Prominence is found by flooding cells from the top down with a
    union-find: when two basins meet at a cell, the basin with the lower
    summit is closed and its summit's prominence is the drop to that cell.
    The tallest summit's prominence is its drop to the lowest cell.
    """
    values = hmap.values if isinstance(hmap, HeightMap) else np.asarray(hmap, dtype=float)
    ny, nx = values.shape
    flat = values.ravel().tolist()
    size = len(flat)
    is_peak = strict_maxima_mask(values).ravel().tolist()
    order = np.lexsort((np.arange(size), -values.ravel())).tolist()

    parent = [-1] * size
    top = list(range(size))
    prominence: list[float | None] = [None] * size

    def find(i: int) -> int:
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    def higher(a: int, b: int) -> bool:
        return (flat[a], -a) > (flat[b], -b)

    for idx in order:
        parent[idx] = idx
        y, x = divmod(idx, nx)
        for dy, dx in _MOORE:
            nb = ((y + dy) % ny) * nx + (x + dx) % nx
            if parent[nb] < 0:
                continue
            ra, rb = find(idx), find(nb)
            if ra == rb:
                continue
            ta, tb = top[ra], top[rb]
            winner, loser = (ta, tb) if higher(ta, tb) else (tb, ta)
            if is_peak[loser] and prominence[loser] is None:
                prominence[loser] = flat[loser] - flat[idx]
            parent[rb] = ra
            top[ra] = winner

    lowest = min(flat)
    peak_idx = [i for i in range(size) if is_peak[i]]
    for i in peak_idx:
        if prominence[i] is None:
            prominence[i] = flat[i] - lowest
    peak_idx.sort(key=lambda i: (-flat[i], i))
    nodes = [Node(i % nx, i // nx) for i in peak_idx]
    return PeakReport(
        nodes=nodes,
        heights=np.array([flat[i] for i in peak_idx], dtype=float),
        prominences=np.array([prominence[i] for i in peak_idx], dtype=float),
    )


def to_record(hmap: HeightMap) -> dict:
    return {
        "landscape_id": hmap.landscape_id,
        "seed": int(hmap.seed),
        "peaks": int(hmap.peaks),
        "values": hmap.values.tolist(),
    }


def from_record(rec: dict) -> HeightMap:
    values = np.asarray(rec["values"], dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ValueError(f"landscape {rec.get('landscape_id')!r}: values must be square")
    return HeightMap(values, int(rec["peaks"]), int(rec["seed"]), str(rec["landscape_id"]))


def save_landscapes(maps: Iterable[HeightMap], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in maps:
            fh.write(json.dumps(to_record(m), separators=(",", ":")) + "\n")


def load_landscapes(path: str | Path) -> dict[str, HeightMap]:
    maps: dict[str, HeightMap] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                m = from_record(json.loads(line))
                maps[m.landscape_id] = m
    return maps
