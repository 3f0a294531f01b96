"""Domain types for cells, actions, traffic states and masks, plus the
graph-batch machinery that lets variable-size maps share one padded
batched representation, the normalization spec, and the on-disk dataset
layout used by every other module."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

# Action channel order, everywhere (arrays of shape [..., 4]).
CH_POWER, CH_AZIMUTH, CH_MTILT, CH_ETILT = 0, 1, 2, 3
ACTION_CHANNELS = ("power", "azimuth", "mtilt", "etilt")

# Steps per day at 15-minute granularity.
SLOTS_PER_DAY = 96
STEP_MINUTES = 15


def slot_of_day(step: np.ndarray | int) -> np.ndarray | int:
    return np.asarray(step) % SLOTS_PER_DAY


def day_of_week(step: np.ndarray | int) -> np.ndarray | int:
    return (np.asarray(step) // SLOTS_PER_DAY) % 7


@dataclass(frozen=True)
class Cell:
    """One antenna sector: integer id, planar position in meters, mast height."""

    id: int
    x: float
    y: float
    height: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"cell {self.id}: non-finite position ({self.x}, {self.y})")
        if not self.height > 0:
            raise ValueError(f"cell {self.id}: height must be > 0, got {self.height}")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class ActionVector:
    """Tunable antenna parameters of one cell at one step.

    power is dBm; a value of 0.0 is the power-off sentinel (transmitter
    effectively off, see physics.OFF_POWER_THRESHOLD_DBM). Azimuth wraps
    modulo 360.
    """

    power: float
    azimuth: float
    mtilt: float
    etilt: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % 360.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.power, self.azimuth, self.mtilt, self.etilt], dtype=np.float64)


@dataclass
class ActionSeries:
    """Per-cell action time series, shape [N, T, 4] in ACTION_CHANNELS order."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[-1] != 4:
            raise ValueError(f"ActionSeries expects [N, T, 4], got {self.values.shape}")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]


@dataclass
class TrafficTensor:
    """Per-cell traffic volume per 15-minute step, shape [N, T], plus the
    absolute step index of each column (slot-of-day / day-of-week derive
    from it)."""

    values: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError(f"TrafficTensor expects [N, T], got {self.values.shape}")
        if self.timestamps.shape != (self.values.shape[1],):
            raise ValueError(
                f"timestamps length {self.timestamps.shape} inconsistent with T={self.values.shape[1]}"
            )
        if np.any(self.values < 0):
            raise ValueError("traffic values must be >= 0")

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1]

    def slots(self) -> np.ndarray:
        return slot_of_day(self.timestamps)

    def dows(self) -> np.ndarray:
        return day_of_week(self.timestamps)


@dataclass
class CellMask:
    """Binary activity mask [N, T]; 1 = cell active at step t. All-zero rows
    are permitted only for padding / never-activated cells."""

    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.uint8)
        if self.mask.ndim != 2:
            raise ValueError(f"CellMask expects [N, T], got {self.mask.shape}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def active_cells(self) -> np.ndarray:
        """Cells active at any step."""
        return self.mask.any(axis=1)


@dataclass
class MapBounds:
    """Axis-aligned map bounds in meters. extent is the maximum side length,
    the single normalizer shared by every spatial encoding path."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def extent(self) -> float:
        return max(self.x_max - self.x_min, self.y_max - self.y_min)

    def normalize(self, coords: np.ndarray) -> np.ndarray:
        """Map meter coordinates [..., 2] to the shared [0, 1]-ish frame."""
        coords = np.asarray(coords, dtype=np.float64)
        origin = np.array([self.x_min, self.y_min])
        return (coords - origin) / self.extent

    def as_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "MapBounds":
        return cls(d["x_min"], d["y_min"], d["x_max"], d["y_max"])


@dataclass
class MapGraph:
    """A district's cell set with kNN adjacency and activity mask."""

    cells: list[Cell]
    edges: list[tuple[int, int]]
    mask: CellMask
    map_id: str
    bounds: MapBounds = None

    def __post_init__(self):
        ids = [c.id for c in self.cells]
        if len(set(ids)) != len(ids):
            raise ValueError("cell ids must be unique within a map")
        idset = set(ids)
        for u, v in self.edges:
            if u not in idset or v not in idset:
                raise ValueError(f"edge ({u}, {v}) references unknown cell id")
        if self.bounds is None:
            xs = [c.x for c in self.cells]
            ys = [c.y for c in self.cells]
            self.bounds = MapBounds(min(xs), min(ys), max(xs), max(ys))

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def coords(self) -> np.ndarray:
        return np.array([[c.x, c.y] for c in self.cells], dtype=np.float64)

    def heights(self) -> np.ndarray:
        return np.array([c.height for c in self.cells], dtype=np.float64)

    def neighbors(self, cell_id: int) -> list[int]:
        return [v for u, v in self.edges if u == cell_id]


def build_map_graph(
    cells: Sequence[Cell],
    k_neighbors: int = 8,
    mask: CellMask | None = None,
    map_id: str = "map",
    bounds: MapBounds | None = None,
) -> MapGraph:
    """Directed kNN adjacency by Euclidean distance.

    Each cell gets min(k, N-1) outgoing edges to its nearest neighbors;
    distance ties break toward the lower cell id. Deterministic given the
    input order. Warns (does not fail) if the graph is disconnected over
    active cells.
    """
    if len(cells) == 0:
        raise ValueError("cannot build a map graph from an empty cell list")
    if k_neighbors < 1:
        raise ValueError(f"k_neighbors must be >= 1, got {k_neighbors}")
    coords = np.array([[c.x, c.y] for c in cells], dtype=np.float64)
    if not np.isfinite(coords).all():
        raise ValueError("non-finite cell coordinates")
    n = len(cells)
    ids = np.array([c.id for c in cells])
    edges: list[tuple[int, int]] = []
    if n > 1:
        d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
        k = min(k_neighbors, n - 1)
        for i in range(n):
            # sort by (distance, id): lower id wins ties; skip self
            order = sorted(range(n), key=lambda j: (d2[i, j], ids[j]))
            picked = [j for j in order if j != i][:k]
            edges.extend((int(ids[i]), int(ids[j])) for j in picked)
    if mask is None:
        mask = CellMask(np.ones((n, 1), dtype=np.uint8))
    graph = MapGraph(list(cells), edges, mask, map_id, bounds)
    _warn_if_disconnected(graph)
    return graph


def _warn_if_disconnected(graph: MapGraph) -> None:
    active = graph.mask.active_cells()
    active_ids = [c.id for i, c in enumerate(graph.cells) if active[i]]
    if len(active_ids) <= 1:
        return
    adj: dict[int, set[int]] = {i: set() for i in active_ids}
    for u, v in graph.edges:
        if u in adj and v in adj:
            adj[u].add(v)
            adj[v].add(u)  # undirected reachability
    seen = {active_ids[0]}
    stack = [active_ids[0]]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    if len(seen) < len(active_ids):
        warnings.warn(
            f"map {graph.map_id}: kNN graph disconnected over active cells "
            f"({len(seen)}/{len(active_ids)} reachable)",
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# Graph batch


@dataclass
class GraphBatch:
    """B maps padded to a common N_max cell count.

    traffic  [B, N_max, T_s]     raw or normalized traffic
    actions  [B, N_max, T_a, 4]  T_a may exceed T_s (window form: H vs H+P)
    mask     [B, N_max, T_s]
    coords   [B, N_max, 2]       meters
    Padded cells carry zeros and mask 0 everywhere. Immutable by convention.
    """

    traffic: np.ndarray
    actions: np.ndarray
    mask: np.ndarray
    coords: np.ndarray
    heights: np.ndarray
    timestamps: np.ndarray  # [B, T_a] absolute step index per action column
    n_cells: list[int]
    map_ids: list[str]
    bounds: list[MapBounds]

    @property
    def batch_size(self) -> int:
        return self.traffic.shape[0]

    @property
    def n_max(self) -> int:
        return self.traffic.shape[1]

    def norm_coords(self) -> np.ndarray:
        """Coordinates normalized per map by its maximum spatial extent."""
        out = np.zeros_like(self.coords)
        for b, bd in enumerate(self.bounds):
            out[b] = bd.normalize(self.coords[b])
        return out


def pad_and_batch(maps: Sequence[tuple[MapGraph, TrafficTensor, ActionSeries]]) -> GraphBatch:
    """Stack variable-size maps into one zero-padded batch. Unbatching with
    `unbatch` recovers the originals exactly."""
    if len(maps) == 0:
        raise ValueError("pad_and_batch needs at least one map")
    t_ref = maps[0][1].n_steps
    ta_ref = maps[0][2].n_steps
    for g, tr, ac in maps:
        if tr.n_steps != t_ref or ac.n_steps != ta_ref:
            raise ValueError(
                f"inconsistent T across maps: {tr.n_steps}/{ac.n_steps} vs {t_ref}/{ta_ref}"
            )
        if not (g.n_cells == tr.n_cells == ac.n_cells == g.mask.shape[0]):
            raise ValueError(f"map {g.map_id}: inconsistent N across graph/traffic/actions/mask")
        if g.mask.shape[1] != tr.n_steps:
            raise ValueError(f"map {g.map_id}: mask T {g.mask.shape[1]} != traffic T {tr.n_steps}")
    b = len(maps)
    n_max = max(g.n_cells for g, _, _ in maps)
    traffic = np.zeros((b, n_max, t_ref), dtype=np.float64)
    actions = np.zeros((b, n_max, ta_ref, 4), dtype=np.float64)
    mask = np.zeros((b, n_max, t_ref), dtype=np.uint8)
    coords = np.zeros((b, n_max, 2), dtype=np.float64)
    heights = np.zeros((b, n_max), dtype=np.float64)
    timestamps = np.zeros((b, ta_ref), dtype=np.int64)
    n_cells, map_ids, bounds = [], [], []
    for i, (g, tr, ac) in enumerate(maps):
        n = g.n_cells
        traffic[i, :n] = tr.values
        actions[i, :n] = ac.values
        mask[i, :n] = g.mask.mask
        coords[i, :n] = g.coords()
        heights[i, :n] = g.heights()
        timestamps[i] = tr.timestamps[0] + np.arange(ta_ref) if ta_ref != t_ref else tr.timestamps
        n_cells.append(n)
        map_ids.append(g.map_id)
        bounds.append(g.bounds)
    return GraphBatch(traffic, actions, mask, coords, heights, timestamps, n_cells, map_ids, bounds)


def unbatch(batch: GraphBatch) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Recover per-map (traffic, actions, mask) arrays, padding stripped."""
    out = []
    for i, n in enumerate(batch.n_cells):
        out.append(
            (
                batch.traffic[i, :n].copy(),
                batch.actions[i, :n].copy(),
                batch.mask[i, :n].copy(),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class NormalizationSpec:
    """Affine transforms fitted on training data only: traffic is log1p then
    z-scored; each action channel is min-max mapped to [-1, 1]."""

    traffic_mean: float = 0.0
    traffic_std: float = 1.0
    action_min: np.ndarray = field(default_factory=lambda: np.zeros(4))
    action_max: np.ndarray = field(default_factory=lambda: np.ones(4))
    fitted: bool = False

    @classmethod
    def fit(cls, traffic: np.ndarray, actions: np.ndarray, mask: np.ndarray | None = None) -> "NormalizationSpec":
        """traffic [.., T] raw volumes, actions [..., 4]; mask selects the
        entries that count toward the statistics."""
        traffic = np.asarray(traffic, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        if mask is not None:
            sel = np.asarray(mask, dtype=bool)
            tvals = traffic[sel]
            avals = actions[sel] if actions.shape[:-1] == sel.shape else actions.reshape(-1, 4)
        else:
            tvals = traffic.reshape(-1)
            avals = actions.reshape(-1, 4)
        logt = np.log1p(tvals)
        mean = float(logt.mean())
        std = float(logt.std())
        if not np.isfinite(mean) or not np.isfinite(std):
            raise ValueError("non-finite traffic statistics")
        if std <= 0:
            raise ValueError("traffic has zero variance on the fit set")
        amin = avals.reshape(-1, 4).min(axis=0)
        amax = avals.reshape(-1, 4).max(axis=0)
        span = amax - amin
        if np.any(span <= 0):
            dead = [ACTION_CHANNELS[i] for i in np.nonzero(span <= 0)[0]]
            raise ValueError(f"zero-variance action channel(s) on the fit set: {dead}")
        return cls(mean, std, amin, amax, fitted=True)

    def _check(self):
        if not self.fitted:
            raise ValueError("NormalizationSpec not fitted")

    def normalize_traffic(self, x: np.ndarray) -> np.ndarray:
        self._check()
        return (np.log1p(np.asarray(x, dtype=np.float64)) - self.traffic_mean) / self.traffic_std

    def denormalize_traffic(self, z: np.ndarray) -> np.ndarray:
        self._check()
        return np.expm1(np.asarray(z, dtype=np.float64) * self.traffic_std + self.traffic_mean)

    def normalize_actions(self, a: np.ndarray) -> np.ndarray:
        self._check()
        a = np.asarray(a, dtype=np.float64)
        return 2.0 * (a - self.action_min) / (self.action_max - self.action_min) - 1.0

    def denormalize_actions(self, z: np.ndarray) -> np.ndarray:
        self._check()
        z = np.asarray(z, dtype=np.float64)
        return (z + 1.0) / 2.0 * (self.action_max - self.action_min) + self.action_min

    def as_dict(self) -> dict:
        return {
            "traffic_mean": self.traffic_mean,
            "traffic_std": self.traffic_std,
            "action_min": self.action_min.tolist(),
            "action_max": self.action_max.tolist(),
            "fitted": self.fitted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationSpec":
        return cls(
            d["traffic_mean"],
            d["traffic_std"],
            np.asarray(d["action_min"], dtype=np.float64),
            np.asarray(d["action_max"], dtype=np.float64),
            d["fitted"],
        )


def normalize(traffic: np.ndarray, actions: np.ndarray, spec: NormalizationSpec):
    return spec.normalize_traffic(traffic), spec.normalize_actions(actions)


def denormalize(traffic_norm: np.ndarray, actions_norm: np.ndarray, spec: NormalizationSpec):
    return spec.denormalize_traffic(traffic_norm), spec.denormalize_actions(actions_norm)


# ---------------------------------------------------------------------------
# Dataset directory layout
#
# <map_id>/
#   topology.json    cells, edges, bounds, grid size S
#   traffic.f32      row-major float32 [N, T]
#   actions.f32      row-major float32 [N, T, 4]
#   mask.u8          [N, T]
#   context/poi.f32  [S, S, K]
#   context/od.f32   [S, S, T]
#   context/facility.u8  [H_f, W_f] grayscale (stored as u8 0..255)
#   meta.json


@dataclass
class MapDataset:
    """One generated map loaded in memory."""

    graph: MapGraph
    traffic: TrafficTensor
    actions: ActionSeries
    poi: np.ndarray
    od: np.ndarray
    facility: np.ndarray
    meta: dict

    @property
    def map_id(self) -> str:
        return self.graph.map_id


def save_dataset(
    out_dir: str | Path,
    graph: MapGraph,
    traffic: TrafficTensor,
    actions: ActionSeries,
    poi: np.ndarray,
    od: np.ndarray,
    facility: np.ndarray,
    meta: dict,
) -> Path:
    out = Path(out_dir)
    (out / "context").mkdir(parents=True, exist_ok=True)
    topo = {
        "cells": [{"id": c.id, "x": c.x, "y": c.y, "height": c.height} for c in graph.cells],
        "edges": [[int(u), int(v)] for u, v in graph.edges],
        "bounds": graph.bounds.as_dict(),
        "grid_s": int(meta["S"]),
        "map_id": graph.map_id,
    }
    (out / "topology.json").write_text(json.dumps(topo, sort_keys=True, indent=1))
    traffic.values.astype("<f4").tofile(out / "traffic.f32")
    actions.values.astype("<f4").tofile(out / "actions.f32")
    graph.mask.mask.astype(np.uint8).tofile(out / "mask.u8")
    poi.astype("<f4").tofile(out / "context" / "poi.f32")
    od.astype("<f4").tofile(out / "context" / "od.f32")
    fac_u8 = np.clip(np.asarray(facility) * 255.0, 0, 255).astype(np.uint8)
    fac_u8.tofile(out / "context" / "facility.u8")
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return out


def load_dataset(map_dir: str | Path) -> MapDataset:
    d = Path(map_dir)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"not a dataset directory (no meta.json): {d}")
    meta = json.loads((d / "meta.json").read_text())
    topo = json.loads((d / "topology.json").read_text())
    n = len(topo["cells"])
    t = int(meta["T"])
    s = int(meta["S"])
    k = int(meta["K"])
    hf, wf = int(meta["H_f"]), int(meta["W_f"])
    cells = [Cell(c["id"], c["x"], c["y"], c["height"]) for c in topo["cells"]]
    mask = CellMask(np.fromfile(d / "mask.u8", dtype=np.uint8).reshape(n, t))
    bounds = MapBounds.from_dict(topo["bounds"])
    graph = MapGraph(cells, [tuple(e) for e in topo["edges"]], mask, topo["map_id"], bounds)
    traffic = TrafficTensor(
        np.fromfile(d / "traffic.f32", dtype="<f4").reshape(n, t).astype(np.float64),
        np.arange(t, dtype=np.int64) + int(meta.get("start_step", 0)),
    )
    actions = ActionSeries(np.fromfile(d / "actions.f32", dtype="<f4").reshape(n, t, 4))
    poi = np.fromfile(d / "context" / "poi.f32", dtype="<f4").reshape(s, s, k).astype(np.float64)
    od = np.fromfile(d / "context" / "od.f32", dtype="<f4").reshape(s, s, t).astype(np.float64)
    facility = (
        np.fromfile(d / "context" / "facility.u8", dtype=np.uint8).reshape(hf, wf).astype(np.float64)
        / 255.0
    )
    return MapDataset(graph, traffic, actions, poi, od, facility, meta)


def discover_datasets(root: str | Path) -> list[Path]:
    """All dataset directories under root (root itself may be one)."""
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    found = sorted(p.parent for p in root.glob("*/meta.json"))
    if not found:
        raise FileNotFoundError(f"no datasets found under {root}")
    return found
