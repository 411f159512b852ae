"""Synthetic search sessions on height maps.

Solo sessions follow a human-like mixture of local refinement around the
best setting found so far and occasional jumps. Aided sessions interleave
those moves with proposals from a simulated-annealing helper.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .landscape import GeneratorParams, HeightMap, generate, height_at
from .torus import Node, distance_field

SOLO = "solo"
AIDED = "aided"
CONDITIONS = (SOLO, AIDED)
# per-participant session order
CELLS = ((SOLO, 1), (SOLO, 4), (AIDED, 1), (AIDED, 4))


@dataclass(frozen=True)
class AgentConfig:
    # solo policy
    local_prob: float = 0.7  # local step anchored at best-so-far (else at last move)
    step_radius: int = 2
    jump_rate: float = 0.15
    jump_min: int = 3
    patience: int = 15  # stop after this many submissions without improvement
    budget: int = 126
    # annealing helper
    t0: float = 4.0
    cooling: float = 0.9
    proposal_radius: int = 4
    assist_every: int = 2  # every k-th submission is a helper proposal; 0 disables

    def __post_init__(self):
        for name in ("local_prob", "jump_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if not 0.0 < self.cooling < 1.0:
            raise ValueError("cooling must lie in (0, 1)")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.step_radius < 1 or self.proposal_radius < 1:
            raise ValueError("radii must be at least 1")
        if self.assist_every < 0 or self.patience < 1:
            raise ValueError("assist_every must be >= 0 and patience >= 1")


@dataclass(frozen=True)
class TrajectoryLog:
    session_id: str
    participant_id: str
    condition: str
    peaks: int
    landscape_id: str
    moves: tuple[Node, ...]
    frame: str | None = None
    anchor: bool | None = None

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        object.__setattr__(self, "moves", tuple(Node(int(x), int(y)) for x, y in self.moves))

    @property
    def label(self) -> int:
        return int(self.condition == AIDED)


def acceptance_probability(delta: float, temperature: float) -> float:
    """Metropolis acceptance for a maximization task."""
    if delta >= 0:
        return 1.0
    return math.exp(delta / temperature)


def temperature_schedule(t0: float, cooling: float, steps: int) -> list[float]:
    """Temperatures after each of ``steps`` proposals."""
    out, t = [], t0
    for _ in range(steps):
        t *= cooling
        out.append(t)
    return out


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    solo_ss, helper_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(solo_ss), np.random.default_rng(helper_ss)


class _Search:
    """Shared session state: visited set, best-so-far and the stop rule."""

    def __init__(self, hmap: HeightMap, cfg: AgentConfig):
        self.hmap = hmap
        self.cfg = cfg
        self.n = hmap.size
        self.moves: list[Node] = []
        self.visited = np.zeros((self.n, self.n), dtype=bool)
        self.best: Node | None = None
        self.best_z = -math.inf
        self.stale = 0

    def submit(self, node: Node) -> float:
        z = height_at(self.hmap, node)
        self.moves.append(node)
        self.visited[node.y, node.x] = True
        if z > self.best_z:
            self.best, self.best_z, self.stale = node, z, 0
        else:
            self.stale += 1
        return z

    @property
    def done(self) -> bool:
        return len(self.moves) >= self.cfg.budget or self.stale >= self.cfg.patience

    def pick(self, rng: np.random.Generator, mask: np.ndarray) -> Node:
        # prefer unvisited cells; fall back to the whole candidate set
        fresh = mask & ~self.visited
        cells = np.flatnonzero(fresh if fresh.any() else mask)
        idx = int(cells[rng.integers(len(cells))])
        return Node(idx % self.n, idx // self.n)

    def solo_move(self, rng: np.random.Generator) -> Node:
        cfg = self.cfg
        if not self.moves:
            return Node(int(rng.integers(self.n)), int(rng.integers(self.n)))
        if rng.random() < cfg.jump_rate:
            dist = distance_field(self.best, self.n)
            return self.pick(rng, dist >= cfg.jump_min)
        anchor = self.best if rng.random() < cfg.local_prob else self.moves[-1]
        dist = distance_field(anchor, self.n)
        return self.pick(rng, (dist >= 1) & (dist <= cfg.step_radius))


def _log(hmap, moves, condition, session_id, participant_id, frame, anchor) -> TrajectoryLog:
    return TrajectoryLog(
        session_id=session_id,
        participant_id=participant_id,
        condition=condition,
        peaks=hmap.peaks,
        landscape_id=hmap.landscape_id,
        moves=tuple(moves),
        frame=frame,
        anchor=anchor,
    )


def simulate_solo(
    hmap: HeightMap,
    cfg: AgentConfig,
    seed: int,
    *,
    start: Node | None = None,
    session_id: str = "",
    participant_id: str = "",
    frame: str | None = None,
    anchor: bool | None = None,
) -> TrajectoryLog:
    rng, _ = _streams(seed)
    search = _Search(hmap, cfg)
    search.submit(start if start is not None else search.solo_move(rng))
    while not search.done:
        search.submit(search.solo_move(rng))
    return _log(hmap, search.moves, SOLO, session_id, participant_id, frame, anchor)


def simulate_aided(
    hmap: HeightMap,
    cfg: AgentConfig,
    seed: int,
    *,
    start: Node | None = None,
    session_id: str = "",
    participant_id: str = "",
    frame: str | None = None,
    anchor: bool | None = None,
) -> TrajectoryLog:
    """Solo moves with every ``assist_every``-th submission taken by the helper.

    The helper runs its own annealing chain starting from the first
    submission; its proposals are submitted like any other move and accepted
    into the chain with probability ``min(1, exp(delta / T))``.
    """
    rng, helper_rng = _streams(seed)
    search = _Search(hmap, cfg)
    current = start if start is not None else search.solo_move(rng)
    current_z = search.submit(current)
    temperature = cfg.t0
    while not search.done:
        k = len(search.moves) + 1
        if cfg.assist_every and k % cfg.assist_every == 0:
            dist = distance_field(current, search.n)
            proposal = search.pick(helper_rng, (dist >= 1) & (dist <= cfg.proposal_radius))
            z = search.submit(proposal)
            if helper_rng.random() < acceptance_probability(z - current_z, temperature):
                current, current_z = proposal, z
            temperature *= cfg.cooling
        else:
            search.submit(search.solo_move(rng))
    return _log(hmap, search.moves, AIDED, session_id, participant_id, frame, anchor)


@dataclass(frozen=True)
class _SessionJob:
    participant: int
    condition: str
    peaks: int
    session_seed: int
    landscape_seed: int
    frame: str
    anchor: bool


def _derive(master_seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _plan(n_participants: int, master_seed: int) -> list[_SessionJob]:
    jobs = []
    for p in range(n_participants):
        meta = np.random.default_rng(_derive(master_seed, p, 99))
        frame = "gain" if meta.random() < 0.5 else "loss"
        anchor = bool(meta.random() < 0.5)
        for c, (condition, peaks) in enumerate(CELLS):
            jobs.append(
                _SessionJob(
                    participant=p,
                    condition=condition,
                    peaks=peaks,
                    session_seed=_derive(master_seed, p, c, 0),
                    landscape_seed=_derive(master_seed, p, c, 1),
                    frame=frame,
                    anchor=anchor,
                )
            )
    return jobs


def _run_session(args) -> tuple[TrajectoryLog, HeightMap]:
    job, cfg, lparams = args
    hmap = generate(job.landscape_seed, job.peaks, lparams)
    pid = f"P{job.participant:04d}"
    sim = simulate_solo if job.condition == SOLO else simulate_aided
    log = sim(
        hmap,
        cfg,
        job.session_seed,
        session_id=f"{pid}-{job.condition}-{job.peaks}",
        participant_id=pid,
        frame=job.frame,
        anchor=job.anchor,
    )
    return log, hmap


def generate_corpus(
    n_participants: int,
    cfg: AgentConfig | None = None,
    master_seed: int = 0,
    landscape_params: GeneratorParams | None = None,
    jobs: int = 1,
) -> tuple[list[TrajectoryLog], list[HeightMap]]:
    """Four sessions per participant, each on its own fresh landscape.

    Returns logs and their landscapes in deterministic session order,
    regardless of ``jobs``.
    """
    if n_participants < 1:
        raise ValueError("n_participants must be at least 1")
    cfg = cfg or AgentConfig()
    plan = [(job, cfg, landscape_params) for job in _plan(n_participants, master_seed)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_session, plan, chunksize=16))
    else:
        results = [_run_session(a) for a in plan]
    return [r[0] for r in results], [r[1] for r in results]


def to_record(log: TrajectoryLog) -> dict:
    return {
        "session_id": log.session_id,
        "participant_id": log.participant_id,
        "condition": log.condition,
        "peaks": log.peaks,
        "landscape_id": log.landscape_id,
        "moves": [[m.x, m.y] for m in log.moves],
        "frame": log.frame,
        "anchor": log.anchor,
    }


def from_record(rec: dict) -> TrajectoryLog:
    return TrajectoryLog(
        session_id=rec["session_id"],
        participant_id=rec["participant_id"],
        condition=rec["condition"],
        peaks=int(rec["peaks"]),
        landscape_id=rec["landscape_id"],
        moves=tuple(Node(int(x), int(y)) for x, y in rec["moves"]),
        frame=rec.get("frame"),
        anchor=rec.get("anchor"),
    )


def save_logs(logs: Iterable[TrajectoryLog], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for log in logs:
            fh.write(json.dumps(to_record(log), separators=(",", ":")) + "\n")


def load_logs(path: str | Path) -> list[TrajectoryLog]:
    with open(path, encoding="utf-8") as fh:
        return [from_record(json.loads(line)) for line in fh if line.strip()]
