"""Procedural 1-D heightfields: curriculum terrains and benchmark tracks.

A heightfield is a row of elevation cells along the direction of travel.
Gap cells are flagged as void; a foot descending into one ends the episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

TERRAIN_KINDS = ("flat", "rough", "gap", "step", "stair")

# Curriculum obstacle parameter ranges (meters), interpolated by difficulty.
GAP_RANGE = (0.05, 0.45)
STEP_RANGE = (0.05, 0.30)
STAIR_RANGE = (0.05, 0.15)
ROUGH_RANGE = (0.01, 0.08)

# Benchmark obstacle parameter ranges (meters) per difficulty mode.
BENCH_RANGES = {
    ("gap", "easy"): (0.25, 0.40),
    ("gap", "hard"): (0.40, 0.60),
    ("step", "easy"): (0.15, 0.25),
    ("step", "hard"): (0.25, 0.35),
    ("stair", "easy"): (0.05, 0.15),
    ("stair", "hard"): (0.15, 0.25),
}

VOID_DEPTH = -1.0  # rendered floor of a gap cell

HEIGHTFIELD_FORMAT_VERSION = 1


@dataclass
class Obstacle:
    kind: str
    value: float  # gap width / step height / stair rise (m)
    start: int  # first cell index
    end: int  # one past last cell index
    surface: float  # terrain height the obstacle is cut from / rises to


@dataclass
class Heightfield:
    cell_size: float
    heights: np.ndarray  # [n_cells] elevation (m)
    void: np.ndarray  # [n_cells] bool, true inside gaps
    obstacles: list[Obstacle] = field(default_factory=list)
    kind: str = "flat"
    difficulty: float = 0.0

    def __post_init__(self):
        # hot-path lookup constants; cell COUNT is fixed after construction
        self._inv_cell = 1.0 / self.cell_size
        self._last = len(self.heights) - 1

    @property
    def n_cells(self) -> int:
        return len(self.heights)

    @property
    def track_length(self) -> float:
        return self.n_cells * self.cell_size

    def cell_at(self, x: float) -> int:
        i = int(x * self._inv_cell)
        if i < 0:
            return 0
        return i if i < self._last else self._last

    def height_at(self, x: float) -> float:
        i = int(x * self._inv_cell)
        if i < 0:
            i = 0
        elif i > self._last:
            i = self._last
        return self.heights[i]

    def is_void(self, x: float) -> bool:
        i = int(x * self._inv_cell)
        if i < 0:
            i = 0
        elif i > self._last:
            i = self._last
        return self.void[i]

    def heights_at(self, xs: np.ndarray) -> np.ndarray:
        idx = np.clip((xs * self._inv_cell).astype(np.intp), 0, self._last)
        return self.heights[idx]

    def surface_at(self, x: float) -> float:
        """Walkable surface height: for void cells, the edge level of the gap."""
        i = self.cell_at(x)
        if not self.void[i]:
            return float(self.heights[i])
        for ob in self.obstacles:
            if ob.start <= i < ob.end:
                return ob.surface
        return 0.0

    def to_json_dict(self) -> dict:
        return {
            "format_version": HEIGHTFIELD_FORMAT_VERSION,
            "cell_size": self.cell_size,
            "heights": [float(h) for h in self.heights],
            "void": [bool(v) for v in self.void],
            "obstacles": [
                {
                    "kind": o.kind,
                    "value": o.value,
                    "start": o.start,
                    "end": o.end,
                    "surface": o.surface,
                }
                for o in self.obstacles
            ],
            "kind": self.kind,
            "difficulty": self.difficulty,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Heightfield":
        if d.get("format_version") != HEIGHTFIELD_FORMAT_VERSION:
            raise ValueError(f"unsupported heightfield version: {d.get('format_version')}")
        return cls(
            cell_size=d["cell_size"],
            heights=np.array(d["heights"], dtype=np.float64),
            void=np.array(d["void"], dtype=bool),
            obstacles=[Obstacle(**o) for o in d["obstacles"]],
            kind=d["kind"],
            difficulty=d["difficulty"],
        )

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Heightfield":
        with open(path) as f:
            return cls.from_json_dict(json.load(f))


def _blank(track_length: float, cell_size: float) -> Heightfield:
    n = int(round(track_length / cell_size))
    return Heightfield(
        cell_size=cell_size,
        heights=np.zeros(n),
        void=np.zeros(n, dtype=bool),
    )


def _lerp(lo: float, hi: float, t: float) -> float:
    return lo + (hi - lo) * t


def _carve_gap(hf: Heightfield, x_start: float, width: float, surface: float) -> None:
    i0 = hf.cell_at(x_start)
    n = max(1, int(round(width / hf.cell_size)))
    i1 = min(i0 + n, hf.n_cells)
    hf.heights[i0:i1] = surface + VOID_DEPTH
    hf.void[i0:i1] = True
    hf.obstacles.append(Obstacle("gap", width, i0, i1, surface))


def generate_terrain(
    kind: str,
    difficulty: float,
    seed: int,
    track_length: float = 14.0,
    cell_size: float = 0.05,
    start_clear: float = 2.0,
) -> Heightfield:
    """Curriculum terrain with obstacle size interpolated linearly by difficulty.

    Placement/spacing is randomized by seed; the obstacle parameter itself is a
    pure function of difficulty so the curriculum level is exactly auditable.
    """
    if kind not in TERRAIN_KINDS:
        raise ValueError(f"unknown terrain kind: {kind!r}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must be in [0, 1]")
    rng = np.random.default_rng(
        np.random.SeedSequence([TERRAIN_KINDS.index(kind), seed & 0xFFFFFFFF])
    )
    hf = _blank(track_length, cell_size)
    hf.kind = kind
    hf.difficulty = float(difficulty)

    if kind == "flat":
        return hf

    if kind == "rough":
        amp = _lerp(*ROUGH_RANGE, difficulty)
        n0 = hf.cell_at(start_clear)
        hf.heights[n0:] = rng.uniform(-amp, amp, size=hf.n_cells - n0)
        hf.obstacles.append(Obstacle("rough", amp, n0, hf.n_cells, 0.0))
        return hf

    if kind == "gap":
        width = _lerp(*GAP_RANGE, difficulty)
        x = start_clear
        while x + width + 1.0 < track_length:
            _carve_gap(hf, x, width, 0.0)
            x += width + rng.uniform(1.2, 2.2)
        return hf

    if kind == "step":
        height = _lerp(*STEP_RANGE, difficulty)
        x = start_clear
        level = 0.0
        up = True
        while x + 1.0 < track_length:
            level = level + height if up else max(level - height, 0.0)
            up = not up
            i0 = hf.cell_at(x)
            run = rng.uniform(1.0, 1.8)
            i1 = min(hf.cell_at(x + run) + 1, hf.n_cells)
            hf.heights[i0:i1] = level
            hf.obstacles.append(Obstacle("step", height, i0, i1, level))
            x += run
        return hf

    # stair: flights of rising steps with landings between
    rise = _lerp(*STAIR_RANGE, difficulty)
    run = 0.30
    x = start_clear
    level = 0.0
    while x + run + 1.5 < track_length:
        flight = int(rng.integers(3, 6))
        for _ in range(flight):
            if x + run + 1.5 >= track_length:
                break
            level += rise
            i0 = hf.cell_at(x)
            i1 = min(hf.cell_at(x + run) + 1, hf.n_cells)
            hf.heights[i0:i1] = level
            hf.obstacles.append(Obstacle("stair", rise, i0, i1, level))
            x += run
        landing = rng.uniform(1.0, 2.0)
        i0 = hf.cell_at(x)
        i1 = min(hf.cell_at(x + landing) + 1, hf.n_cells)
        hf.heights[i0:i1] = level
        x += landing
    return hf


def build_benchmark_track(
    obstacle: str,
    mode: str,
    seed: int,
    track_length: float = 14.0,
    cell_size: float = 0.05,
    start_clear: float = 2.0,
) -> Heightfield:
    """Evaluation track: one obstacle type, parameters sampled per instance."""
    if obstacle not in ("gap", "step", "stair"):
        raise ValueError(f"unknown benchmark obstacle: {obstacle!r}")
    if mode not in ("easy", "hard"):
        raise ValueError(f"unknown benchmark mode: {mode!r}")
    lo, hi = BENCH_RANGES[(obstacle, mode)]
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [0xBE, TERRAIN_KINDS.index(obstacle), 0 if mode == "easy" else 1, seed & 0xFFFFFFFF]
        )
    )
    hf = _blank(track_length, cell_size)
    hf.kind = obstacle
    hf.difficulty = 1.0 if mode == "hard" else 0.5

    if obstacle == "gap":
        x = start_clear
        while True:
            width = rng.uniform(lo, hi)
            if x + width + 1.0 >= track_length:
                break
            _carve_gap(hf, x, width, 0.0)
            x += width + rng.uniform(1.2, 2.0)
        return hf

    if obstacle == "step":
        x = start_clear
        level = 0.0
        up = True
        while x + 1.0 < track_length:
            height = rng.uniform(lo, hi)
            level = level + height if up else max(level - height, 0.0)
            up = not up
            run = rng.uniform(1.0, 1.8)
            i0 = hf.cell_at(x)
            i1 = min(hf.cell_at(x + run) + 1, hf.n_cells)
            hf.heights[i0:i1] = level
            hf.obstacles.append(Obstacle("step", height, i0, i1, level))
            x += run
        return hf

    x = start_clear
    level = 0.0
    run = 0.30
    while x + run + 1.5 < track_length:
        flight = int(rng.integers(3, 6))
        for _ in range(flight):
            if x + run + 1.5 >= track_length:
                break
            rise = rng.uniform(lo, hi)
            level += rise
            i0 = hf.cell_at(x)
            i1 = min(hf.cell_at(x + run) + 1, hf.n_cells)
            hf.heights[i0:i1] = level
            hf.obstacles.append(Obstacle("stair", rise, i0, i1, level))
            x += run
        landing = rng.uniform(1.0, 2.0)
        i0 = hf.cell_at(x)
        i1 = min(hf.cell_at(x + landing) + 1, hf.n_cells)
        hf.heights[i0:i1] = level
        x += landing
    return hf
