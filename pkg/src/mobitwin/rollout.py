"""Unlimited-horizon autoregressive rollout: each round feeds the previous
round's prediction back as history, sliding an H-step window along the
trajectory. Also counterfactual comparison under action overrides and the
emergency probes (power outage, beyond-training-range actions)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import PreparedMap
from .fstcore import ModelInputs, WorldModel
from .netcore import ACTION_CHANNELS, NormalizationSpec, day_of_week, slot_of_day


@dataclass
class ActionOverride:
    """Set one channel of one cell to a value over [t_start, t_end) steps,
    physical units. Out-of-range values are allowed only when ood=True."""

    cell_id: int
    channel: str
    t_start: int
    t_end: int
    value: float
    ood: bool = False

    def channel_index(self) -> int:
        if self.channel not in ACTION_CHANNELS:
            raise ValueError(f"unknown action channel {self.channel!r}")
        return ACTION_CHANNELS.index(self.channel)


@dataclass
class RolloutRequest:
    map_data: PreparedMap
    t_start: int                       # first step of the seed history window
    k_rounds: int
    overrides: list[ActionOverride] = field(default_factory=list)
    actions: np.ndarray | None = None  # [N, H + K*P, 4] physical; default from map


@dataclass
class RolloutResult:
    predicted: np.ndarray          # [N, K*P] denormalized, clamped at 0
    predicted_norm: np.ndarray     # [N, K*P] raw model outputs
    steps: np.ndarray              # absolute step index per predicted column
    resolved_actions: np.ndarray   # [N, H + K*P, 4] physical, as used
    round_latency_s: list[float] = field(default_factory=list)


def _resolve_actions(req: RolloutRequest, spec: NormalizationSpec, h: int, p: int) -> np.ndarray:
    pm = req.map_data
    need = h + req.k_rounds * p
    if req.actions is not None:
        acts = np.array(req.actions, dtype=np.float64, copy=True)
        if acts.shape != (pm.n_cells, need, 4):
            raise ValueError(f"action trajectory must be [N, H+K*P, 4] = [{pm.n_cells}, {need}, 4], got {acts.shape}")
    else:
        if req.t_start + need > pm.n_steps:
            raise ValueError(
                f"trajectory too short: need {need} steps from t={req.t_start}, map has {pm.n_steps}"
            )
        acts = pm.actions_raw[:, req.t_start : req.t_start + need].copy()
    amin, amax = spec.action_min, spec.action_max
    for ov in req.overrides:
        ch = ov.channel_index()
        lo = max(0, ov.t_start - req.t_start)
        hi = min(need, ov.t_end - req.t_start)
        if hi <= lo:
            continue
        if not ov.ood and not (amin[ch] <= ov.value <= amax[ch]):
            raise ValueError(
                f"override {ov.channel}={ov.value} outside training range "
                f"[{amin[ch]}, {amax[ch]}]; set ood=True for out-of-distribution probes"
            )
        acts[ov.cell_id, lo:hi, ch] = ov.value
    return acts


def _window_mask(pm: PreparedMap, t0: int, length: int) -> torch.Tensor:
    """Activity mask for [t0, t0+length); steps past the recorded horizon
    reuse the final mask column."""
    t = pm.n_steps
    if t0 + length <= t:
        return pm.mask[:, t0 : t0 + length]
    have = max(0, t - t0)
    parts = []
    if have:
        parts.append(pm.mask[:, t0:t])
    parts.append(pm.mask[:, t - 1 :].expand(pm.n_cells, length - have))
    return torch.cat(parts, dim=1)


def rollout(model: WorldModel, spec: NormalizationSpec, req: RolloutRequest) -> RolloutResult:
    """Deterministic block-aligned rollout: round k consumes the sliding
    H-window assembled from the ground-truth seed and earlier predictions."""
    cfg = model.cfg
    h, p = cfg.h_hist, cfg.p_horizon
    pm = req.map_data
    if req.t_start < 0 or req.t_start + h > pm.n_steps:
        raise ValueError(f"insufficient history: seed window [{req.t_start}, {req.t_start + h}) outside map")
    if req.k_rounds < 1:
        raise ValueError("k_rounds must be >= 1")
    acts_phys = _resolve_actions(req, spec, h, p)
    acts_norm = torch.as_tensor(spec.normalize_actions(acts_phys), dtype=torch.float32)
    n = pm.n_cells
    buffer = pm.traffic_norm[:, req.t_start : req.t_start + h].clone()
    abs_t0 = int(pm.timestamps[req.t_start])
    out_norm = []
    latencies = []
    model.eval()
    with torch.no_grad():
        for k in range(req.k_rounds):
            tic = time.time()
            w0 = k * p                       # offset of this round's history window
            ts = abs_t0 + w0 + np.arange(h + p)
            inputs = ModelInputs(
                traffic_hist=buffer[None],
                actions=acts_norm[None, :, w0 : w0 + h + p],
                mask_hist=_window_mask(pm, req.t_start + w0, h)[None],
                mask_future=_window_mask(pm, req.t_start + w0 + h, p)[None],
                coords=pm.coords_norm[None],
                slots=torch.as_tensor(slot_of_day(ts), dtype=torch.int64)[None],
                dows=torch.as_tensor(day_of_week(ts), dtype=torch.int64)[None],
                poi=pm.poi[None],
                od=pm.od[None],
                fac=pm.fac[None],
                grid_coords=pm.grid_coords[None],
                fine_coords=pm.fine_coords[None],
            )
            pred = model(inputs)[0]          # [N, P]
            out_norm.append(pred)
            buffer = torch.cat([buffer, pred], dim=1)[:, -h:]
            latencies.append(time.time() - tic)
    pred_norm = torch.cat(out_norm, dim=1).cpu().numpy()
    predicted = np.clip(spec.denormalize_traffic(pred_norm), 0.0, None)
    steps = abs_t0 + h + np.arange(req.k_rounds * p)
    return RolloutResult(predicted, pred_norm, steps, acts_phys, latencies)


def counterfactual_compare(
    model: WorldModel,
    spec: NormalizationSpec,
    req_base: RolloutRequest,
    overrides: list[ActionOverride],
    baseline: RolloutResult | None = None,
):
    """(baseline, counterfactual, diff). The baseline is computed once and
    may be passed back in for reuse across repeated what-ifs."""
    if baseline is None:
        base_req = RolloutRequest(req_base.map_data, req_base.t_start, req_base.k_rounds, [], req_base.actions)
        baseline = rollout(model, spec, base_req)
    cf_req = RolloutRequest(
        req_base.map_data, req_base.t_start, req_base.k_rounds, list(overrides), req_base.actions
    )
    counterfactual = rollout(model, spec, cf_req)
    diff_abs = counterfactual.predicted - baseline.predicted
    with np.errstate(divide="ignore", invalid="ignore"):
        diff_pct = np.where(baseline.predicted > 1e-9, diff_abs / baseline.predicted * 100.0, 0.0)
    diff = {"absolute": diff_abs, "percent": diff_pct, "steps": baseline.steps}
    return baseline, counterfactual, diff


def emergency_suite(
    model: WorldModel,
    spec: NormalizationSpec,
    dataset,
    scenario_cfg,
    t_start: int = 0,
    k_rounds: int = 2,
) -> dict:
    """Direction-of-response probes on a trained model, scored against a
    physics re-run of the same scenario with the same overrides:
    no-event (diff exactly zero), mid-rollout power outage (affected cell
    down, kNN neighbors absorb), and a beyond-training-range power raise
    (sign agreement with the oracle)."""
    from . import physics
    from .data import prepare_map

    pm = prepare_map(dataset, spec)
    cfg = model.cfg
    h, p = cfg.h_hist, cfg.p_horizon
    req = RolloutRequest(pm, t_start, k_rounds)
    base, same, diff0 = counterfactual_compare(model, spec, req, [])
    report = {
        "no_event": {
            "max_abs_diff": float(np.abs(diff0["absolute"]).max()),
            "pass": bool(np.abs(diff0["absolute"]).max() == 0.0),
        }
    }

    # probe window: the final prediction round
    w0 = t_start + h + (k_rounds - 1) * p
    w1 = t_start + h + k_rounds * p
    active = pm.mask[:, w0:w1].numpy().all(axis=1)
    base_win = base.predicted[:, -p:]
    cell = int(np.argmax(np.where(active, base_win.mean(axis=1), -np.inf)))
    neighbors = [v for u, v in dataset.graph.edges if u == cell]

    world = physics.ScenarioWorld(scenario_cfg)
    oracle_base = world.run().traffic.values

    def oracle_with(over: list[ActionOverride]) -> np.ndarray:
        w = physics.ScenarioWorld(scenario_cfg)
        for ov in over:
            w.actions[ov.cell_id, ov.t_start : ov.t_end, ov.channel_index()] = ov.value
        return w.run().traffic.values

    # (a) sudden power outage: every channel to zero mid-rollout
    outage = [ActionOverride(cell, ch, w0, w1, 0.0, ood=True) for ch in ACTION_CHANNELS]
    _, cf_out, d_out = counterfactual_compare(model, spec, req, outage, baseline=base)
    model_delta = float(cf_out.predicted[cell, -p:].mean() - base_win[cell].mean())
    nb_delta = float(
        sum(cf_out.predicted[n, -p:].mean() - base_win[n].mean() for n in neighbors)
    )
    oracle_out = oracle_with(outage)
    oracle_delta = float(oracle_out[cell, w0:w1].mean() - oracle_base[cell, w0:w1].mean())
    report["outage"] = {
        "cell": cell,
        "model_delta": model_delta,
        "oracle_delta": oracle_delta,
        "neighbor_delta_sum": nb_delta,
        "sign_agrees": bool(np.sign(model_delta) == np.sign(oracle_delta)),
        "neighbors_absorb": bool(nb_delta >= 0.0),
        "drop_fraction": float(-model_delta / max(base_win[cell].mean(), 1e-9)),
    }

    # (b) action exceeds threshold: power beyond the training maximum
    hot = spec.action_max[0] * 1.2
    exceed = [ActionOverride(cell, "power", w0, w1, float(hot), ood=True)]
    _, cf_hot, _ = counterfactual_compare(model, spec, req, exceed, baseline=base)
    model_delta_hot = float(cf_hot.predicted[cell, -p:].mean() - base_win[cell].mean())
    oracle_hot = oracle_with(exceed)
    oracle_delta_hot = float(oracle_hot[cell, w0:w1].mean() - oracle_base[cell, w0:w1].mean())
    report["threshold_exceed"] = {
        "cell": cell,
        "power_dbm": float(hot),
        "model_delta": model_delta_hot,
        "oracle_delta": oracle_delta_hot,
        "sign_agrees": bool(np.sign(model_delta_hot) == np.sign(oracle_delta_hot)),
        "finite": bool(np.isfinite(cf_hot.predicted).all()),
    }
    return report
