"""Dataset-to-model plumbing shared by training, evaluation, rollout and
the service: per-map tensor preparation, map-level splits, window batching
into ModelInputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .context import grid_centers, pixel_block_centers
from .fstcore import ModelConfig, ModelInputs
from .netcore import MapDataset, NormalizationSpec, day_of_week, slot_of_day


@dataclass
class PreparedMap:
    """One map's tensors, normalized and ready for windowing."""

    map_id: str
    kind: str
    n_cells: int
    traffic_norm: torch.Tensor    # [N, T] f32
    actions_norm: torch.Tensor    # [N, T, 4] f32
    mask: torch.Tensor            # [N, T] f32
    coords_norm: torch.Tensor     # [N, 2] f32
    timestamps: np.ndarray        # [T] absolute steps
    poi: torch.Tensor             # [S, S, K]
    od: torch.Tensor              # [S, S, T]
    fac: torch.Tensor             # [H_f, W_f]
    grid_coords: torch.Tensor     # [S, S, 2]
    fine_coords: torch.Tensor     # [H_f/4, W_f/4, 2]
    traffic_raw: np.ndarray       # [N, T] denormalized ground truth
    actions_raw: np.ndarray       # [N, T, 4] physical units

    @property
    def n_steps(self) -> int:
        return self.traffic_norm.shape[1]


def fit_normalization(datasets: list[MapDataset]) -> NormalizationSpec:
    """Fit on the given (training) maps only, masked entries excluded."""
    traffic = np.concatenate([d.traffic.values.reshape(-1) for d in datasets])
    masks = np.concatenate([d.graph.mask.mask.reshape(-1) for d in datasets]).astype(bool)
    actions = np.concatenate([d.actions.values.reshape(-1, 4) for d in datasets])
    return NormalizationSpec.fit(traffic[masks], actions[masks], mask=None)


def prepare_map(ds: MapDataset, spec: NormalizationSpec) -> PreparedMap:
    g = ds.graph
    bounds = g.bounds
    coords_norm = bounds.normalize(g.coords())
    f32 = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32)
    return PreparedMap(
        map_id=g.map_id,
        kind=ds.meta.get("scenario", "para"),
        n_cells=g.n_cells,
        traffic_norm=f32(spec.normalize_traffic(ds.traffic.values)),
        actions_norm=f32(spec.normalize_actions(ds.actions.values)),
        mask=f32(g.mask.mask),
        coords_norm=f32(coords_norm),
        timestamps=ds.traffic.timestamps.copy(),
        poi=f32(ds.poi),
        od=f32(ds.od),
        fac=f32(ds.facility),
        grid_coords=f32(bounds.normalize(grid_centers(bounds, ds.poi.shape[0]))),
        fine_coords=f32(
            bounds.normalize(pixel_block_centers(bounds, ds.facility.shape[0], ds.facility.shape[1], 4))
        ),
        traffic_raw=ds.traffic.values.copy(),
        actions_raw=ds.actions.values.copy(),
    )


def prepare_maps(datasets: list[MapDataset], spec: NormalizationSpec) -> list[PreparedMap]:
    return [prepare_map(d, spec) for d in datasets]


def split_maps(datasets: list[MapDataset], fractions=(0.7, 0.15, 0.15), seed: int = 0):
    """Map-level split (no map in two splits), stratified by scenario kind."""
    rng = np.random.default_rng(seed)
    by_kind: dict[str, list[MapDataset]] = {}
    for d in datasets:
        by_kind.setdefault(d.meta.get("scenario", "para"), []).append(d)
    train, val, test = [], [], []
    for kind in sorted(by_kind):
        group = by_kind[kind]
        order = rng.permutation(len(group))
        n = len(group)
        n_train = max(1, int(round(fractions[0] * n)))
        n_val = max(1, int(round(fractions[1] * n))) if n - n_train >= 2 else max(0, n - n_train - 1)
        for rank, idx in enumerate(order):
            if rank < n_train:
                train.append(group[idx])
            elif rank < n_train + n_val:
                val.append(group[idx])
            else:
                test.append(group[idx])
    if not val:
        val = test or train
    if not test:
        test = val
    return train, val, test


def window_index(maps: list[PreparedMap], h: int, p: int, stride: int) -> list[tuple[int, int]]:
    out = []
    for i, m in enumerate(maps):
        last = m.n_steps - h - p
        out.extend((i, t0) for t0 in range(0, last + 1, stride))
    return out


def make_inputs(
    maps: list[PreparedMap],
    windows: list[tuple[int, int]],
    cfg: ModelConfig,
) -> tuple[ModelInputs, torch.Tensor]:
    """Assemble one padded window batch -> (inputs, normalized future target)."""
    h, p = cfg.h_hist, cfg.p_horizon
    b = len(windows)
    n_max = max(maps[i].n_cells for i, _ in windows)
    traffic = torch.zeros(b, n_max, h)
    actions = torch.zeros(b, n_max, h + p, 4)
    mask_hist = torch.zeros(b, n_max, h)
    mask_future = torch.zeros(b, n_max, p)
    coords = torch.zeros(b, n_max, 2)
    slots = torch.zeros(b, h + p, dtype=torch.int64)
    dows = torch.zeros(b, h + p, dtype=torch.int64)
    target = torch.zeros(b, n_max, p)
    poi = torch.stack([maps[i].poi for i, _ in windows])
    od = torch.stack([maps[i].od for i, _ in windows])
    fac = torch.stack([maps[i].fac for i, _ in windows])
    grid_coords = torch.stack([maps[i].grid_coords for i, _ in windows])
    fine_coords = torch.stack([maps[i].fine_coords for i, _ in windows])
    for row, (i, t0) in enumerate(windows):
        m = maps[i]
        n = m.n_cells
        traffic[row, :n] = m.traffic_norm[:, t0 : t0 + h]
        actions[row, :n] = m.actions_norm[:, t0 : t0 + h + p]
        mask_hist[row, :n] = m.mask[:, t0 : t0 + h]
        mask_future[row, :n] = m.mask[:, t0 + h : t0 + h + p]
        coords[row, :n] = m.coords_norm
        target[row, :n] = m.traffic_norm[:, t0 + h : t0 + h + p]
        ts = m.timestamps[t0 : t0 + h + p]
        slots[row] = torch.as_tensor(slot_of_day(ts), dtype=torch.int64)
        dows[row] = torch.as_tensor(day_of_week(ts), dtype=torch.int64)
    inputs = ModelInputs(
        traffic_hist=traffic,
        actions=actions,
        mask_hist=mask_hist,
        mask_future=mask_future,
        coords=coords,
        slots=slots,
        dows=dows,
        poi=poi,
        od=od,
        fac=fac,
        grid_coords=grid_coords,
        fine_coords=fine_coords,
    )
    return inputs, target
