"""Ground-truth cellular environment: analytic antenna patterns and path
loss, frozen correlated shadow fading, A3 event-triggered UE association,
demand-driven traffic aggregation, and the synthetic scenario generator
that writes datasets in the netcore directory layout.

Also the brute-force oracle used to sanity-check the learned model:
everything here is deterministic given a seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import netcore
from .netcore import (
    ActionSeries,
    Cell,
    CellMask,
    MapBounds,
    MapGraph,
    TrafficTensor,
    build_map_graph,
    save_dataset,
)

# UE antenna height subtracted from the mast height for elevation geometry.
UE_HEIGHT_M = 1.5
# Stored power below this is the power-off sentinel; the transmitter then
# radiates at OFF_EFFECTIVE_DBM (far below any access threshold).
OFF_POWER_THRESHOLD_DBM = 5.0
OFF_EFFECTIVE_DBM = -200.0
# Links shorter than this are degenerate.
MIN_LINK_DISTANCE_M = 0.1
# Rx power assigned to cells that are masked out (not deployed / removed).
MASKED_RX_DBM = -1.0e9

# Counts calls into the simulator; the RL training guard asserts this stays
# frozen while the agent learns inside the world model.
_CALL_COUNT = 0


def call_count() -> int:
    return _CALL_COUNT


def _tick():
    global _CALL_COUNT
    _CALL_COUNT += 1


@dataclass(frozen=True)
class AntennaPattern:
    """3GPP-style sectoral pattern: parabolic attenuation in both planes,
    capped front-to-back."""

    g_max: float = 8.0       # dBi
    hpbw_h: float = 65.0     # horizontal 3dB beamwidth, degrees
    hpbw_v: float = 10.0     # vertical 3dB beamwidth, degrees
    a_max: float = 30.0      # dB, front-back cap
    sla_v: float = 30.0      # dB, vertical sidelobe cap

    def __post_init__(self):
        if self.hpbw_h <= 0 or self.hpbw_v <= 0:
            raise ValueError("beamwidths must be > 0")
        if self.a_max <= 0 or self.sla_v <= 0:
            raise ValueError("attenuation caps must be > 0")


def antenna_gain(pattern: AntennaPattern, az_offset_deg, elev_deg, total_tilt_deg):
    """Directional gain in dBi.

    G = g_max - min(-(A_h + A_v), a_max) with
    A_h = -min(12 (az/hpbw_h)^2, a_max), A_v = -min(12 ((elev-tilt)/hpbw_v)^2, sla_v).
    Total function; accepts scalars or arrays. az_offset is symmetric in sign.
    """
    az = np.asarray(az_offset_deg, dtype=np.float64)
    ev = np.asarray(elev_deg, dtype=np.float64)
    tilt = np.asarray(total_tilt_deg, dtype=np.float64)
    a_h = -np.minimum(12.0 * (az / pattern.hpbw_h) ** 2, pattern.a_max)
    a_v = -np.minimum(12.0 * ((ev - tilt) / pattern.hpbw_v) ** 2, pattern.sla_v)
    g = pattern.g_max - np.minimum(-(a_h + a_v), pattern.a_max)
    return g if g.shape else float(g)


@dataclass(frozen=True)
class PathLossModel:
    """Log-distance path loss PL(d) = pl0 + 10 n log10(d/d0), d0 = 1 m."""

    pl0: float = 32.4        # dB at 1 m
    exponent: float = 3.5
    shadow_sigma: float = 6.0        # dB
    correlation_length: float = 50.0  # m

    def __post_init__(self):
        if self.exponent < 2:
            raise ValueError("path loss exponent must be >= 2")
        if self.shadow_sigma < 0:
            raise ValueError("shadow sigma must be >= 0")

    def path_loss(self, d_m):
        return self.pl0 + 10.0 * self.exponent * np.log10(np.asarray(d_m, dtype=np.float64))


class ShadowField:
    """Frozen per-cell spatially correlated shadow fading.

    One Gaussian grid field per cell, smoothed with an exponential kernel of
    the configured correlation length and rescaled to shadow_sigma, then
    bilinearly interpolated at query positions. Frozen in time so that rx
    power differences come only from actions.
    """

    def __init__(self, n_cells: int, bounds: MapBounds, plm: PathLossModel, seed):
        self.bounds = bounds
        self.sigma = plm.shadow_sigma
        spacing = max(plm.correlation_length / 2.0, 1.0)
        margin = 2.0 * plm.correlation_length
        self.x0 = bounds.x_min - margin
        self.y0 = bounds.y_min - margin
        nx = int(math.ceil((bounds.x_max + margin - self.x0) / spacing)) + 2
        ny = int(math.ceil((bounds.y_max + margin - self.y0) / spacing)) + 2
        self.spacing = spacing
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((n_cells, ny, nx))
        if self.sigma > 0:
            half = int(math.ceil(3 * plm.correlation_length / spacing))
            ax = np.arange(-half, half + 1) * spacing
            kx, ky = np.meshgrid(ax, ax)
            kern = np.exp(-np.hypot(kx, ky) / plm.correlation_length)
            kern /= kern.sum()
            smooth = np.stack([ndimage.convolve(f, kern, mode="wrap") for f in raw])
            std = smooth.std()
            self.fields = smooth / max(std, 1e-12) * self.sigma
        else:
            self.fields = np.zeros_like(raw)

    def sample(self, positions: np.ndarray) -> np.ndarray:
        """Shadow values [N, U] at UE positions [U, 2]."""
        pos = np.asarray(positions, dtype=np.float64)
        gx = (pos[:, 0] - self.x0) / self.spacing
        gy = (pos[:, 1] - self.y0) / self.spacing
        ix = np.clip(np.floor(gx).astype(int), 0, self.fields.shape[2] - 2)
        iy = np.clip(np.floor(gy).astype(int), 0, self.fields.shape[1] - 2)
        fx = np.clip(gx - ix, 0.0, 1.0)
        fy = np.clip(gy - iy, 0.0, 1.0)
        f = self.fields
        v = (
            f[:, iy, ix] * (1 - fx) * (1 - fy)
            + f[:, iy, ix + 1] * fx * (1 - fy)
            + f[:, iy + 1, ix] * (1 - fx) * fy
            + f[:, iy + 1, ix + 1] * fx * fy
        )
        return v


@dataclass
class UserEquipment:
    x: float
    y: float
    demand: float = 0.0
    serving_cell: int = -1

    def __post_init__(self):
        if self.demand < 0:
            raise ValueError("UE demand must be >= 0")


def wrap_angle_deg(a):
    """Wrap to [-180, 180); the gain pattern is symmetric in the sign."""
    return (np.asarray(a, dtype=np.float64) + 180.0) % 360.0 - 180.0


def effective_power_dbm(power):
    p = np.asarray(power, dtype=np.float64)
    out = np.where(p < OFF_POWER_THRESHOLD_DBM, OFF_EFFECTIVE_DBM, p)
    return out if out.shape else float(out)


def received_power(
    cell: Cell,
    action,
    pattern: AntennaPattern,
    plm: PathLossModel,
    ue_pos: tuple[float, float],
    shadow_db: float = 0.0,
) -> float:
    """Scalar rx power at one location from one cell, dBm.

    P_rx = P_eff + G(az_offset, elev) - PL(d3d) + shadow. Bearings are
    degrees clockwise from north; elevation is the downward angle from the
    antenna to the UE plane (UE height 1.5 m).
    """
    power, azimuth, mtilt, etilt = (
        (action.power, action.azimuth, action.mtilt, action.etilt)
        if hasattr(action, "power")
        else tuple(float(v) for v in action)
    )
    dx = ue_pos[0] - cell.x
    dy = ue_pos[1] - cell.y
    d2d = math.hypot(dx, dy)
    dz = cell.height - UE_HEIGHT_M
    d3d = math.sqrt(d2d * d2d + dz * dz)
    if d3d < MIN_LINK_DISTANCE_M:
        raise ValueError(f"degenerate link distance {d3d:.3g} m")
    bearing = math.degrees(math.atan2(dx, dy)) % 360.0
    az_off = wrap_angle_deg(bearing - azimuth)
    elev = math.degrees(math.atan2(dz, d2d))
    g = antenna_gain(pattern, az_off, elev, mtilt + etilt)
    return effective_power_dbm(power) + g - float(plm.path_loss(d3d)) + shadow_db


def rx_power_matrix(
    cell_coords: np.ndarray,
    cell_heights: np.ndarray,
    actions_t: np.ndarray,
    pattern: AntennaPattern,
    plm: PathLossModel,
    ue_pos: np.ndarray,
    shadow: np.ndarray,
    active: np.ndarray | None = None,
) -> np.ndarray:
    """Rx power [U, N] from every cell at every UE for one step's actions.

    shadow is [N, U] (frozen). Cells flagged inactive get MASKED_RX_DBM.
    """
    _tick()
    dx = ue_pos[:, 0][:, None] - cell_coords[:, 0][None, :]   # [U, N]
    dy = ue_pos[:, 1][:, None] - cell_coords[:, 1][None, :]
    d2d = np.hypot(dx, dy)
    dz = (cell_heights - UE_HEIGHT_M)[None, :]
    d3d = np.sqrt(d2d**2 + dz**2)
    d3d = np.maximum(d3d, MIN_LINK_DISTANCE_M)
    bearing = np.degrees(np.arctan2(dx, dy)) % 360.0
    az_off = wrap_angle_deg(bearing - actions_t[None, :, netcore.CH_AZIMUTH])
    elev = np.degrees(np.arctan2(dz, d2d))
    tilt = (actions_t[:, netcore.CH_MTILT] + actions_t[:, netcore.CH_ETILT])[None, :]
    g = antenna_gain(pattern, az_off, elev, tilt)
    p_eff = effective_power_dbm(actions_t[:, netcore.CH_POWER])[None, :]
    rx = p_eff + g - plm.path_loss(d3d) + shadow.T
    if active is not None:
        rx = np.where(active[None, :], rx, MASKED_RX_DBM)
    return rx


# ---------------------------------------------------------------------------
# Association (A3 event-triggered handover)


@dataclass(frozen=True)
class HandoverConfig:
    hysteresis: float = 3.0       # dB
    time_to_trigger: int = 1      # steps; 0 behaves like 1 (immediate)
    q_rxlevmin: float = -110.0    # dBm access threshold

    def __post_init__(self):
        if self.hysteresis < 0 or self.time_to_trigger < 0:
            raise ValueError("hysteresis and time_to_trigger must be >= 0")


def associate_step(
    rx: np.ndarray,
    serving: np.ndarray,
    counters: np.ndarray,
    cfg: HandoverConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Advance one association step (vectorized).

    Rules, in order, per UE:
      1. a serving cell that fell below q_rxlevmin is dropped;
      2. unserved UEs attach to the strongest cell at or above q_rxlevmin
         (ties -> lower cell id), else stay unserved; freshly attached UEs
         skip the A3 check this step;
      3. A3: a neighbor whose rx exceeds serving + hysteresis for
         time_to_trigger consecutive steps takes over (strongest such
         neighbor, ties -> lower id); all counters reset on any switch.
    """
    _tick()
    u_n, n = rx.shape
    serving = serving.copy()
    counters = counters.copy()
    arange_u = np.arange(u_n)

    has = serving >= 0
    served_rx = rx[arange_u, np.where(has, serving, 0)]
    drop = has & (served_rx < cfg.q_rxlevmin)
    serving[drop] = -1
    counters[drop] = 0

    eligible = rx >= cfg.q_rxlevmin
    best = np.argmax(rx, axis=1)
    best_ok = eligible[arange_u, best]
    unserved = serving < 0
    attach = unserved & best_ok
    serving[attach] = best[attach]
    counters[attach] = 0

    ttt = max(1, cfg.time_to_trigger)
    idx = np.nonzero((serving >= 0) & ~attach)[0]
    if idx.size:
        p_serv = rx[idx, serving[idx]][:, None]
        cond = rx[idx] > p_serv + cfg.hysteresis
        cond[np.arange(idx.size), serving[idx]] = False
        counters[idx] = np.where(cond, counters[idx] + 1, 0)
        trig = counters[idx] >= ttt
        any_trig = trig.any(axis=1)
        target = np.argmax(np.where(trig, rx[idx], -np.inf), axis=1)
        switched = idx[any_trig]
        serving[switched] = target[any_trig]
        counters[switched] = 0
    return serving, counters


def associate_step_naive(rx, serving, counters, cfg: HandoverConfig):
    """Pure-Python per-UE per-cell reimplementation of associate_step; the
    independent oracle for the vectorized path."""
    u_n, n = rx.shape
    serving = [int(s) for s in serving]
    counters = [[int(c) for c in row] for row in counters]
    ttt = max(1, cfg.time_to_trigger)
    for u in range(u_n):
        s = serving[u]
        if s >= 0 and rx[u][s] < cfg.q_rxlevmin:
            s = -1
            counters[u] = [0] * n
        if s < 0:
            best, best_p = -1, -math.inf
            for j in range(n):
                if rx[u][j] >= cfg.q_rxlevmin and rx[u][j] > best_p:
                    best, best_p = j, rx[u][j]
            serving[u] = best
            if best >= 0:
                counters[u] = [0] * n
            continue
        trig_best, trig_p = -1, -math.inf
        for j in range(n):
            if j == s:
                counters[u][j] = 0
                continue
            if rx[u][j] > rx[u][s] + cfg.hysteresis:
                counters[u][j] += 1
            else:
                counters[u][j] = 0
            if counters[u][j] >= ttt and rx[u][j] > trig_p:
                trig_best, trig_p = j, rx[u][j]
        if trig_best >= 0:
            serving[u] = trig_best
            counters[u] = [0] * n
    return np.array(serving, dtype=np.int64), np.array(counters, dtype=np.int64)


def count_handovers(assignment_history: np.ndarray) -> int:
    """Number of serving-cell switches (attached -> different cell) over a
    [T, U] assignment history."""
    h = np.asarray(assignment_history)
    prev, cur = h[:-1], h[1:]
    return int(((prev >= 0) & (cur >= 0) & (prev != cur)).sum())


def aggregate_traffic(assignment: np.ndarray, demands: np.ndarray, n_cells: int) -> np.ndarray:
    """Per-cell traffic: sum of demand of the UEs assigned to each cell."""
    _tick()
    demands = np.asarray(demands, dtype=np.float64)
    if np.any(demands < 0):
        raise ValueError("negative UE demand")
    served = assignment >= 0
    return np.bincount(assignment[served], weights=demands[served], minlength=n_cells)


# ---------------------------------------------------------------------------
# Demand


def default_diurnal_profile() -> np.ndarray:
    """96-slot base curve: low overnight, noon and evening peaks."""
    slots = np.arange(netcore.SLOTS_PER_DAY)
    prof = (
        0.2
        + 0.35 * np.exp(-0.5 * ((slots - 50) / 9.0) ** 2)
        + 0.55 * np.exp(-0.5 * ((slots - 80) / 7.0) ** 2)
        + 0.15 * np.exp(-0.5 * ((slots - 34) / 6.0) ** 2)
    )
    return prof


@dataclass
class Hotspot:
    x: float
    y: float
    radius: float
    amplitude: float


@dataclass
class DemandProcess:
    """Spatio-temporal demand density: diurnal base curve x day-of-week
    multiplier x POI land-use weight x hotspot boost x lognormal noise.
    Deterministic given (seed, step)."""

    base_profile: np.ndarray = field(default_factory=default_diurnal_profile)
    day_multipliers: np.ndarray = field(
        default_factory=lambda: np.array([1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.65])
    )
    poi_weights: np.ndarray | None = None
    hotspots: list[Hotspot] = field(default_factory=list)
    noise_sigma: float = 0.25
    mean_demand: float = 5.0e4
    seed: int = 0

    def __post_init__(self):
        self.base_profile = np.asarray(self.base_profile, dtype=np.float64)
        self.day_multipliers = np.asarray(self.day_multipliers, dtype=np.float64)
        if np.any(self.base_profile <= 0):
            raise ValueError("base profile values must be > 0")
        if self.poi_weights is not None and np.any(np.asarray(self.poi_weights) < 0):
            raise ValueError("poi weights must be >= 0")

    def hotspot_boost(self, positions: np.ndarray) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        boost = np.ones(pos.shape[0])
        for h in self.hotspots:
            inside = np.hypot(pos[:, 0] - h.x, pos[:, 1] - h.y) <= h.radius
            boost = np.where(inside, boost * h.amplitude, boost)
        return boost

    def poi_factor(self, positions: np.ndarray, poi_grid, bounds: MapBounds | None) -> np.ndarray:
        pos = np.asarray(positions, dtype=np.float64)
        if poi_grid is None or self.poi_weights is None or np.sum(self.poi_weights) == 0:
            return np.ones(pos.shape[0])
        w = np.asarray(self.poi_weights, dtype=np.float64)
        s = poi_grid.shape[0]
        rel = bounds.normalize(pos)
        gx = np.clip((rel[:, 0] * s).astype(int), 0, s - 1)
        gy = np.clip((rel[:, 1] * s).astype(int), 0, s - 1)
        field_val = poi_grid @ w                      # [S, S]
        mean_val = float(field_val.mean())
        return (1e-9 + field_val[gx, gy]) / (1e-9 + mean_val)

    def demands_at(
        self,
        t: int,
        positions: np.ndarray,
        poi_grid=None,
        bounds: MapBounds | None = None,
    ) -> np.ndarray:
        slot = int(netcore.slot_of_day(t))
        dow = int(netcore.day_of_week(t))
        base = self.base_profile[slot] * self.day_multipliers[dow] * self.mean_demand
        out = base * self.poi_factor(positions, poi_grid, bounds) * self.hotspot_boost(positions)
        if self.noise_sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, t]))
            z = rng.standard_normal(len(out))
            # mean-one lognormal so noise does not inflate totals
            out = out * np.exp(self.noise_sigma * z - self.noise_sigma**2 / 2.0)
        return out


# ---------------------------------------------------------------------------
# Scenario generation


@dataclass
class ScenarioConfig:
    kind: str = "para"                   # "para" | "topo"
    n_cells: int = 16
    n_ues: int = 200
    t_steps: int = 672
    extent_m: float = 2000.0
    change_fraction: float = 0.40
    seed: int = 0
    k_neighbors: int = 8
    map_id: str | None = None
    power_range: tuple = (20.0, 46.0)
    mtilt_range: tuple = (0.0, 15.0)
    etilt_range: tuple = (0.0, 12.0)
    max_changes_per_cell: int = 3
    outage_events: int = 0
    outage_len_range: tuple = (24, 72)
    topo_deactivate: int = 2
    topo_insert: int = 2
    pattern: AntennaPattern = field(default_factory=AntennaPattern)
    path_loss: PathLossModel = field(default_factory=PathLossModel)
    handover: HandoverConfig = field(default_factory=HandoverConfig)
    n_hotspots: int = 3
    noise_sigma: float = 0.25
    mean_demand: float = 5.0e4
    grid_s: int = 16
    poi_k: int = 8
    fac_h: int = 128
    fac_w: int = 128
    cell_height_range: tuple = (15.0, 40.0)
    min_cell_separation: float = 80.0

    def __post_init__(self):
        if self.kind not in ("para", "topo"):
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 <= self.change_fraction <= 1.0:
            raise ValueError("change_fraction must be in [0, 1]")
        if self.n_ues <= 0:
            raise ValueError("n_ues must be > 0")
        for lo, hi in (self.power_range, self.mtilt_range, self.etilt_range):
            if hi < lo:
                raise ValueError("invalid action range")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key, sub in (("pattern", AntennaPattern), ("path_loss", PathLossModel), ("handover", HandoverConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = sub(**d[key])
        for key in ("power_range", "mtilt_range", "etilt_range", "outage_len_range", "cell_height_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SimResult:
    graph: MapGraph
    traffic: TrafficTensor
    actions: ActionSeries
    assignments: np.ndarray      # [T, U]
    demands: np.ndarray          # [T, U]
    ue_positions: np.ndarray     # [U, 2]
    hotspots: list[Hotspot]
    demand_process: DemandProcess


class ScenarioWorld:
    """Frozen geometry and processes for one scenario; stepping it is pure."""

    def __init__(self, cfg: ScenarioConfig, poi_grid: np.ndarray | None = None):
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        (s_cells, s_act, s_ues, s_shadow, s_hot, s_topo) = ss.spawn(6)
        self.bounds = MapBounds(0.0, 0.0, cfg.extent_m, cfg.extent_m)
        rng = np.random.default_rng(s_cells)
        self.cell_coords = _place_points(rng, cfg.n_cells, cfg.extent_m, cfg.min_cell_separation)
        self.cell_heights = rng.uniform(*cfg.cell_height_range, size=cfg.n_cells)
        rng_h = np.random.default_rng(s_hot)
        self.hotspots = [
            Hotspot(
                x=rng_h.uniform(0.15, 0.85) * cfg.extent_m,
                y=rng_h.uniform(0.15, 0.85) * cfg.extent_m,
                radius=rng_h.uniform(0.08, 0.2) * cfg.extent_m,
                amplitude=rng_h.uniform(1.5, 3.0),
            )
            for _ in range(cfg.n_hotspots)
        ]
        self.actions, self.mask = _build_action_schedule(cfg, np.random.default_rng(s_act), np.random.default_rng(s_topo))
        self.ue_positions = _place_ues(np.random.default_rng(s_ues), cfg, self.hotspots, self.cell_coords)
        self.shadow = ShadowField(cfg.n_cells, self.bounds, cfg.path_loss, s_shadow)
        self.shadow_matrix = self.shadow.sample(self.ue_positions)   # [N, U]
        self.demand = DemandProcess(
            hotspots=self.hotspots,
            noise_sigma=cfg.noise_sigma,
            mean_demand=cfg.mean_demand,
            seed=cfg.seed,
            poi_weights=None if poi_grid is None else np.ones(cfg.poi_k),
        )
        self.poi_grid = poi_grid
        cells = [
            Cell(i, float(self.cell_coords[i, 0]), float(self.cell_coords[i, 1]), float(self.cell_heights[i]))
            for i in range(cfg.n_cells)
        ]
        map_id = cfg.map_id or f"{cfg.kind}-{cfg.seed:04d}"
        self.graph = build_map_graph(
            cells, cfg.k_neighbors, CellMask(self.mask), map_id=map_id, bounds=self.bounds
        )

    def rx_at(self, t: int) -> np.ndarray:
        return rx_power_matrix(
            self.cell_coords,
            self.cell_heights,
            self.actions[:, t],
            self.cfg.pattern,
            self.cfg.path_loss,
            self.ue_positions,
            self.shadow_matrix,
            active=self.mask[:, t].astype(bool),
        )

    def run(self) -> SimResult:
        cfg = self.cfg
        n, t_steps, u_n = cfg.n_cells, cfg.t_steps, cfg.n_ues
        traffic = np.zeros((n, t_steps))
        assignments = np.zeros((t_steps, u_n), dtype=np.int64)
        demands = np.zeros((t_steps, u_n))
        serving = np.full(u_n, -1, dtype=np.int64)
        counters = np.zeros((u_n, n), dtype=np.int64)
        rx = None
        for t in range(t_steps):
            if t == 0 or not (
                np.array_equal(self.actions[:, t], self.actions[:, t - 1])
                and np.array_equal(self.mask[:, t], self.mask[:, t - 1])
            ):
                rx = self.rx_at(t)
            serving, counters = associate_step(rx, serving, counters, cfg.handover)
            dem = self.demand.demands_at(t, self.ue_positions, self.poi_grid, self.bounds)
            traffic[:, t] = aggregate_traffic(serving, dem, n)
            assignments[t] = serving
            demands[t] = dem
        return SimResult(
            self.graph,
            TrafficTensor(traffic, np.arange(t_steps, dtype=np.int64)),
            ActionSeries(self.actions),
            assignments,
            demands,
            self.ue_positions,
            self.hotspots,
            self.demand,
        )


def _place_points(rng, n: int, extent: float, min_sep: float) -> np.ndarray:
    pts = []
    tries = 0
    while len(pts) < n:
        p = rng.uniform(0.02 * extent, 0.98 * extent, size=2)
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_sep**2 for q in pts):
            pts.append(p)
        tries += 1
        if tries > 200 * n:
            min_sep *= 0.8  # relax: density too high for the requested separation
            tries = 0
    return np.array(pts)


def _place_ues(rng, cfg: ScenarioConfig, hotspots, cell_coords) -> np.ndarray:
    out = []
    while len(out) < cfg.n_ues:
        if hotspots and rng.uniform() < 0.5:
            h = hotspots[rng.integers(len(hotspots))]
            p = np.array([h.x, h.y]) + rng.standard_normal(2) * h.radius / 1.5
            p = np.clip(p, 0.0, cfg.extent_m)
        else:
            p = rng.uniform(0.0, cfg.extent_m, size=2)
        d2 = np.min(np.sum((cell_coords - p) ** 2, axis=1))
        if d2 >= 2.0**2:   # keep UEs off the mast locations
            out.append(p)
    return np.array(out)


def _build_action_schedule(cfg: ScenarioConfig, rng, rng_topo):
    """Piecewise-constant actions [N, T, 4] plus activity mask [N, T]."""
    n, t_steps = cfg.n_cells, cfg.t_steps
    actions = np.zeros((n, t_steps, 4))
    actions[:, :, netcore.CH_POWER] = rng.uniform(*cfg.power_range, size=n)[:, None]
    actions[:, :, netcore.CH_AZIMUTH] = rng.uniform(0.0, 360.0, size=n)[:, None]
    actions[:, :, netcore.CH_MTILT] = rng.uniform(*cfg.mtilt_range, size=n)[:, None]
    actions[:, :, netcore.CH_ETILT] = rng.uniform(*cfg.etilt_range, size=n)[:, None]

    n_changed = int(round(cfg.change_fraction * n))
    changed = rng.choice(n, size=n_changed, replace=False) if n_changed else np.array([], dtype=int)
    lo, hi = max(1, t_steps // 8), max(2, t_steps - t_steps // 8)
    ranges = {
        netcore.CH_POWER: cfg.power_range,
        netcore.CH_AZIMUTH: (0.0, 360.0),
        netcore.CH_MTILT: cfg.mtilt_range,
        netcore.CH_ETILT: cfg.etilt_range,
    }
    for i in changed:
        for _ in range(int(rng.integers(1, cfg.max_changes_per_cell + 1))):
            t0 = int(rng.integers(lo, hi))
            n_ch = int(rng.integers(1, 5))
            for ch in rng.choice(4, size=n_ch, replace=False):
                actions[i, t0:, ch] = rng.uniform(*ranges[int(ch)])

    for _ in range(cfg.outage_events):
        i = int(rng.integers(n))
        length = int(rng.integers(*cfg.outage_len_range))
        t0 = int(rng.integers(lo, max(lo + 1, hi - length)))
        actions[i, t0 : t0 + length, :] = 0.0   # schedule resumes after the window

    mask = np.ones((n, t_steps), dtype=np.uint8)
    if cfg.kind == "topo":
        picks = rng_topo.permutation(n)
        deact = picks[: cfg.topo_deactivate]
        insert = picks[cfg.topo_deactivate : cfg.topo_deactivate + cfg.topo_insert]
        for i in deact:
            length = int(rng_topo.integers(t_steps // 8, t_steps // 3))
            t0 = int(rng_topo.integers(lo, max(lo + 1, t_steps - length)))
            mask[i, t0 : t0 + length] = 0
        for i in insert:
            t_ins = int(rng_topo.integers(lo, hi))
            mask[i, :t_ins] = 0
    return actions, mask


def simulate_scenario(cfg: ScenarioConfig, poi_grid: np.ndarray | None = None) -> SimResult:
    _tick()
    return ScenarioWorld(cfg, poi_grid=poi_grid).run()


def generate_scenario(cfg: ScenarioConfig, out_dir: str | Path) -> Path:
    """Simulate one scenario and write the full dataset directory.

    Byte-identical for identical configs (seed included).
    """
    from .context import synth_context

    world = ScenarioWorld(cfg)
    poi, od_base, facility = synth_context(
        world.graph,
        world.hotspots,
        seed=cfg.seed,
        grid_s=cfg.grid_s,
        poi_k=cfg.poi_k,
        fac_hw=(cfg.fac_h, cfg.fac_w),
        t_steps=cfg.t_steps,
        demand=world.demand,
    )
    world.poi_grid = poi
    world.demand.poi_weights = np.ones(cfg.poi_k)
    result = world.run()
    meta = {
        "T": cfg.t_steps,
        "step_minutes": netcore.STEP_MINUTES,
        "K": cfg.poi_k,
        "S": cfg.grid_s,
        "H_f": cfg.fac_h,
        "W_f": cfg.fac_w,
        "scenario": cfg.kind,
        "seed": cfg.seed,
        "n_cells": cfg.n_cells,
        "n_ues": cfg.n_ues,
        "extent_m": cfg.extent_m,
    }
    out = Path(out_dir) / result.graph.map_id
    save_dataset(out, result.graph, result.traffic, result.actions, poi, od_base, facility, meta)
    return out
