"""Coordinate arithmetic on the dial grid, which wraps in both axes (a torus)."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

GRID = 24


class Node(NamedTuple):
    """One dial setting: ``x`` is the left dial, ``y`` the right dial."""

    x: int
    y: int


class TorusDistance(NamedTuple):
    total: int
    dx: int
    dy: int


def make_node(x: int, y: int, n: int = GRID) -> Node:
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"node ({x}, {y}) outside the {n}x{n} grid")
    return Node(int(x), int(y))


def wrap_delta(a: int, b: int, n: int = GRID) -> int:
    d = abs(a - b) % n
    return min(d, n - d)


def toroidal_manhattan(a: Node, b: Node, n: int = GRID) -> TorusDistance:
    dx = wrap_delta(a[0], b[0], n)
    dy = wrap_delta(a[1], b[1], n)
    return TorusDistance(dx + dy, dx, dy)


def manhattan(a: Node, b: Node, n: int = GRID, wrap: bool = True) -> int:
    """Plain integer distance; ``wrap=False`` drops the torus topology."""
    if wrap:
        return toroidal_manhattan(a, b, n).total
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def axis_deltas(a: Node, b: Node, n: int = GRID, wrap: bool = True) -> tuple[int, int]:
    if wrap:
        return wrap_delta(a[0], b[0], n), wrap_delta(a[1], b[1], n)
    return abs(a[0] - b[0]), abs(a[1] - b[1])


def distance_field(node: Node, n: int = GRID, wrap: bool = True) -> np.ndarray:
    """Distance from ``node`` to every grid cell, indexed ``[y, x]``."""
    xs = np.arange(n)
    dx = np.abs(xs - node[0])
    dy = np.abs(xs - node[1])
    if wrap:
        dx = np.minimum(dx, n - dx)
        dy = np.minimum(dy, n - dy)
    return dy[:, None] + dx[None, :]


def neighborhood3x3(center: Node, n: int = GRID) -> list[Node]:
    """Wrapped Moore neighborhood, center included, row by row."""
    x, y = center
    return [Node((x + u) % n, (y + v) % n) for v in (-1, 0, 1) for u in (-1, 0, 1)]


def circular_conv3x3(grid: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation with periodic boundaries.

    ``out[i, j] = sum_{u,v} kernel[u+1, v+1] * grid[(i+u) % n, (j+v) % m]``.
    """
    grid = np.asarray(grid, dtype=float)
    kernel = np.asarray(kernel, dtype=float)
    if kernel.shape != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kernel.shape}")
    out = np.zeros_like(grid)
    for u in (-1, 0, 1):
        for v in (-1, 0, 1):
            w = kernel[u + 1, v + 1]
            if w != 0.0:
                out += w * np.roll(grid, shift=(-u, -v), axis=(0, 1))
    return out


BOX_KERNEL = np.full((3, 3), 1.0 / 9.0)
IDENTITY_KERNEL = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
