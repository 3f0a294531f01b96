"""HTTP JSON API over a frozen checkpoint and a set of on-disk datasets:
map registry, ground-truth windows, and counterfactual rollouts. Responses
are pure functions of (checkpoint digest, request body); the service never
mutates datasets or checkpoints."""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from .data import PreparedMap, prepare_map
from .fstcore import WorldModel, load_checkpoint
from .netcore import MapDataset, NormalizationSpec, discover_datasets, load_dataset
from .rollout import ActionOverride, RolloutRequest, counterfactual_compare


@dataclass
class ServerState:
    model: WorldModel
    spec: NormalizationSpec
    digest: str
    maps: dict[str, MapDataset] = field(default_factory=dict)
    prepared: dict[str, PreparedMap] = field(default_factory=dict)
    request_log: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)

    def get_map(self, map_id: str) -> tuple[MapDataset, PreparedMap]:
        if map_id not in self.maps:
            raise HTTPException(status_code=404, detail=f"unknown map {map_id!r}")
        return self.maps[map_id], self.prepared[map_id]


class OverrideBody(BaseModel):
    cell_id: int
    channel: str
    t_start: int
    t_end: int
    value: float
    ood: bool = False


class RolloutBody(BaseModel):
    map_id: str
    start_t: int = 0
    k_rounds: int = Field(default=1, ge=1)
    overrides: list[OverrideBody] = Field(default_factory=list)


def load_server_state(ckpt_path: str | Path, data_dirs: list[str | Path]) -> ServerState:
    model, spec, header = load_checkpoint(ckpt_path)
    state = ServerState(model=model, spec=spec, digest=header["digest"])
    for root in data_dirs:
        for d in discover_datasets(root):
            ds = load_dataset(d)
            state.maps[ds.map_id] = ds
            state.prepared[ds.map_id] = prepare_map(ds, spec)
    if not state.maps:
        raise ValueError("no datasets loaded")
    return state


def rollout_payload(state: ServerState, body: RolloutBody) -> dict:
    """Shared by the API and the CLI so both produce identical payloads."""
    _, pm = state.get_map(body.map_id)
    overrides = [
        ActionOverride(o.cell_id, o.channel, o.t_start, o.t_end, o.value, o.ood)
        for o in body.overrides
    ]
    req = RolloutRequest(pm, body.start_t, body.k_rounds)
    with state.lock:
        base, counter, diff = counterfactual_compare(state.model, state.spec, req, overrides)
    return {
        "map_id": body.map_id,
        "start_t": body.start_t,
        "k_rounds": body.k_rounds,
        "steps": [int(s) for s in base.steps],
        "predicted": counter.predicted.tolist(),
        "baseline": base.predicted.tolist(),
        "diff": diff["absolute"].tolist(),
        "diff_percent": diff["percent"].tolist(),
        "model_digest": state.digest,
    }


def build_app(state: ServerState) -> FastAPI:
    app = FastAPI(title="mobitwin", version="0.1.0")
    app.state.server = state

    @app.get("/api/health")
    def health():
        return {"status": "ok", "model_digest": state.digest}

    @app.get("/api/maps")
    def maps():
        out = []
        for mid, ds in sorted(state.maps.items()):
            out.append(
                {
                    "map_id": mid,
                    "n_cells": ds.graph.n_cells,
                    "bounds": ds.graph.bounds.as_dict(),
                    "T": int(ds.meta["T"]),
                    "scenario": ds.meta.get("scenario"),
                    "action_ranges": {
                        "power": [float(state.spec.action_min[0]), float(state.spec.action_max[0])],
                        "azimuth": [float(state.spec.action_min[1]), float(state.spec.action_max[1])],
                        "mtilt": [float(state.spec.action_min[2]), float(state.spec.action_max[2])],
                        "etilt": [float(state.spec.action_min[3]), float(state.spec.action_max[3])],
                    },
                    "history_steps": state.model.cfg.h_hist,
                    "horizon_steps": state.model.cfg.p_horizon,
                }
            )
        return out

    @app.get("/api/maps/{map_id}/cells")
    def cells(map_id: str, t: int = 0):
        ds, _ = state.get_map(map_id)
        if not 0 <= t < int(ds.meta["T"]):
            raise HTTPException(status_code=400, detail=f"t={t} outside [0, {ds.meta['T']})")
        acts = ds.actions.values[:, t]
        return [
            {
                "id": c.id,
                "x": c.x,
                "y": c.y,
                "height": c.height,
                "current_action": {
                    "power": float(acts[i, 0]),
                    "azimuth": float(acts[i, 1]),
                    "mtilt": float(acts[i, 2]),
                    "etilt": float(acts[i, 3]),
                },
                "active": bool(ds.graph.mask.mask[i, t]),
            }
            for i, c in enumerate(ds.graph.cells)
        ]

    @app.get("/api/maps/{map_id}/traffic")
    def traffic(
        map_id: str,
        from_: int = Query(0, alias="from"),
        to: int | None = Query(None, alias="to"),
    ):
        ds, _ = state.get_map(map_id)
        t_total = int(ds.meta["T"])
        to = t_total if to is None else to
        if not (0 <= from_ < to <= t_total):
            raise HTTPException(status_code=400, detail=f"bad window [{from_}, {to})")
        return {
            "map_id": map_id,
            "steps": list(range(from_, to)),
            "values": ds.traffic.values[:, from_:to].tolist(),
            "mask": ds.graph.mask.mask[:, from_:to].tolist(),
        }

    @app.post("/api/rollout")
    def rollout_endpoint(body: RolloutBody):
        try:
            payload = rollout_payload(state, body)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e))
        state.request_log.append({"path": "/api/rollout", "body": body.model_dump()})
        if len(state.request_log) > 200:
            del state.request_log[:-200]
        return payload

    return app


def serve(ckpt_path, data_dirs, host: str = "127.0.0.1", port: int = 8700):
    import uvicorn

    state = load_server_state(ckpt_path, data_dirs)
    app = build_app(state)
    uvicorn.run(app, host=host, port=port, log_level="warning")
