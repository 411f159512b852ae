"""Image and series encodings of one search session.

Formulations:

* ``sharp``  - elevation at visited cells, zero elsewhere (1 channel)
* ``smooth`` - ``sharp`` blurred by a wrapped 3x3 box filter (1 channel)
* ``bmc``    - full height map, visited mask, explore(+1)/exploit(-1) state (3 channels)
* ``cmc``    - ``bmc`` plus horizontal and vertical exploration flags (5 channels)

Arrays are indexed ``[channel, y, x]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .agents import TrajectoryLog
from .landscape import HeightMap
from .torus import BOX_KERNEL, Node, axis_deltas, circular_conv3x3, distance_field

SERIES_LEN = 126
EXPLOIT_RADIUS = 2
EXPLORE = "explore"
EXPLOIT = "exploit"

FORMULATIONS = ("sharp", "smooth", "bmc", "cmc")
CHANNELS = {"sharp": 1, "smooth": 1, "bmc": 3, "cmc": 5}


class EmptyTrajectory(ValueError):
    pass


class MissingStats(ValueError):
    pass


@dataclass(frozen=True)
class MoveClass:
    labels: tuple[str, ...]
    dx: np.ndarray  # wrapped displacement from the preceding move
    dy: np.ndarray

    @property
    def explore(self) -> np.ndarray:
        return np.array([lab == EXPLORE for lab in self.labels], dtype=bool)


@dataclass(frozen=True)
class EncodedImage:
    channels: np.ndarray
    formulation: str


@dataclass(frozen=True)
class SeriesEncoding:
    values: np.ndarray
    true_length: int
    truncated: bool = False


@dataclass(frozen=True)
class EncodedSample:
    image: EncodedImage
    series: SeriesEncoding
    label: int
    session_id: str
    peaks: int


def _moves(log: TrajectoryLog | Sequence[Node]) -> list[Node]:
    moves = log.moves if isinstance(log, TrajectoryLog) else log
    return [Node(int(x), int(y)) for x, y in moves]


def classify_moves(log: TrajectoryLog | Sequence[Node], n: int = 24, wrap: bool = True) -> MoveClass:
    """Label each move against every earlier move.

    A move is exploitation when some previously visited cell lies within
    Manhattan distance 2, exploration otherwise; the first move is always
    exploration.
    """
    moves = _moves(log)
    if not moves:
        raise EmptyTrajectory("cannot classify an empty trajectory")
    nearest = np.full((n, n), np.iinfo(np.int64).max, dtype=np.int64)
    labels, dxs, dys = [], [], []
    prev = None
    for node in moves:
        if prev is None:
            labels.append(EXPLORE)
            dxs.append(0)
            dys.append(0)
        else:
            labels.append(EXPLOIT if nearest[node.y, node.x] <= EXPLOIT_RADIUS else EXPLORE)
            dx, dy = axis_deltas(prev, node, n, wrap)
            dxs.append(dx)
            dys.append(dy)
        np.minimum(nearest, distance_field(node, n, wrap), out=nearest)
        prev = node
    return MoveClass(tuple(labels), np.array(dxs), np.array(dys))


def _visited_heights(moves: list[Node], hmap: HeightMap) -> np.ndarray:
    img = np.zeros(hmap.values.shape)
    for m in moves:
        img[m.y, m.x] = hmap.values[m.y, m.x]
    return img


def sharp_im(log, hmap: HeightMap) -> EncodedImage:
    return EncodedImage(_visited_heights(_moves(log), hmap)[None], "sharp")


def smooth_im(log, hmap: HeightMap, kernel: np.ndarray = BOX_KERNEL) -> EncodedImage:
    sharp = _visited_heights(_moves(log), hmap)
    return EncodedImage(circular_conv3x3(sharp, kernel)[None], "smooth")


def _state_channels(log, hmap: HeightMap, wrap: bool) -> np.ndarray:
    """Height map, visited mask, move state, horizontal flag, vertical flag.

    Per-cell channels take their value from the most recent move landing there.
    """
    moves = _moves(log)
    n = hmap.size
    out = np.zeros((5, n, n))
    out[0] = hmap.values
    if not moves:
        return out
    cls = classify_moves(moves, n, wrap)
    for i, (node, lab) in enumerate(zip(moves, cls.labels)):
        explore = lab == EXPLORE
        out[1, node.y, node.x] = 1.0
        out[2, node.y, node.x] = 1.0 if explore else -1.0
        out[3, node.y, node.x] = float(explore and cls.dx[i] > 0)
        out[4, node.y, node.x] = float(explore and cls.dy[i] > 0)
    return out


def bmc_im(log, hmap: HeightMap, wrap: bool = True) -> EncodedImage:
    return EncodedImage(_state_channels(log, hmap, wrap)[:3], "bmc")


def cmc_im(log, hmap: HeightMap, wrap: bool = True) -> EncodedImage:
    return EncodedImage(_state_channels(log, hmap, wrap), "cmc")


def encode_image(log, hmap: HeightMap, formulation: str, wrap: bool = True) -> EncodedImage:
    if formulation == "sharp":
        return sharp_im(log, hmap)
    if formulation == "smooth":
        return smooth_im(log, hmap)
    if formulation == "bmc":
        return bmc_im(log, hmap, wrap)
    if formulation == "cmc":
        return cmc_im(log, hmap, wrap)
    raise ValueError(f"unknown formulation {formulation!r}; expected one of {FORMULATIONS}")


def series(log, max_len: int = SERIES_LEN, n: int = 24, wrap: bool = True) -> SeriesEncoding:
    """+1 per exploration, -1 per exploitation, zero-padded to ``max_len``."""
    cls = classify_moves(log, n, wrap)
    states = np.where(cls.explore, 1.0, -1.0)
    truncated = len(states) > max_len
    states = states[:max_len]
    values = np.zeros(max_len)
    values[: len(states)] = states
    return SeriesEncoding(values, len(states), truncated)


def encode_sample(log: TrajectoryLog, hmap: HeightMap, formulation: str, wrap: bool = True) -> EncodedSample:
    if log.landscape_id != hmap.landscape_id:
        raise ValueError(f"{log.session_id}: log is on {log.landscape_id}, map is {hmap.landscape_id}")
    return EncodedSample(
        image=encode_image(log, hmap, formulation, wrap),
        series=series(log, n=hmap.size, wrap=wrap),
        label=log.label,
        session_id=log.session_id,
        peaks=log.peaks,
    )


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    source: tuple[int, ...] = ()  # corpus indices the moments were taken from


def channel_stats(images: np.ndarray, source: Sequence[int] = ()) -> ChannelStats:
    """Per-channel mean and population std over an ``(N, C, H, W)`` stack."""
    images = np.asarray(images, dtype=np.float64)
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    return ChannelStats(mean, std, tuple(int(i) for i in source))


def normalize(images: np.ndarray, stats: ChannelStats | None, eps: float = 1e-8) -> np.ndarray:
    if stats is None:
        raise MissingStats("normalization needs statistics from the training split")
    images = np.asarray(images)
    std = np.where(stats.std == 0, eps, stats.std)
    out = (images - stats.mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(images.dtype if images.dtype.kind == "f" else np.float64, copy=False)
