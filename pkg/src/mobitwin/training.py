"""Optimization loop with masked loss, the JSD/MAE/NRMSE evaluation
protocol, the persistence baseline, and map-level dataset splitting."""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import data as datamod
from .data import PreparedMap, make_inputs, window_index
from .fstcore import ModelConfig, WorldModel, save_checkpoint
from .netcore import NormalizationSpec

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-4
    warmup_steps: int = 200
    total_steps: int = 2000
    batch_maps: int = 2            # windows per batch (each from some map)
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    seed: int = 0
    val_every: int = 200
    window_stride: int | None = None   # default: P
    loss: str = "mae"                  # "mae" | "mse"
    deterministic: bool = False        # single-threaded reproducibility mode
    # ablations (mirrored into the model config)
    no_fa: bool = False
    no_od: bool = False
    no_trn: bool = False
    no_spe: bool = False
    no_lg: bool = False
    no_action: bool = False

    def __post_init__(self):
        if self.lr < 0 or self.total_steps <= 0 or self.batch_maps <= 0:
            raise ValueError("rates and step counts must be positive")
        if self.loss not in ("mae", "mse"):
            raise ValueError(f"unknown loss {self.loss!r}")


def masked_loss(s_hat: torch.Tensor, s_true: torch.Tensor, mask: torch.Tensor, kind: str = "mae"):
    """Masked mean error over unmasked future entries, in normalized space.
    An empty mask yields 0 with a warning."""
    if s_hat.shape != s_true.shape or s_hat.shape != mask.shape:
        raise ValueError(f"shape mismatch: {s_hat.shape} vs {s_true.shape} vs {mask.shape}")
    weight = mask.sum()
    if weight.item() == 0:
        warnings.warn("masked_loss: empty mask, loss defined as 0", stacklevel=2)
        return s_hat.sum() * 0.0
    err = (s_hat - s_true).abs() if kind == "mae" else (s_hat - s_true) ** 2
    return (err * mask).sum() / weight


@dataclass
class TrainResult:
    checkpoint: str
    best_val_loss: float
    history: list = field(default_factory=list)
    digest: str = ""


def _apply_ablations(model_cfg: ModelConfig, cfg: TrainConfig) -> ModelConfig:
    d = asdict(model_cfg)
    for flag in ("no_fa", "no_od", "no_trn", "no_spe", "no_lg", "no_action"):
        d[flag] = d[flag] or getattr(cfg, flag)
    return ModelConfig(**d)


def train(
    model_cfg: ModelConfig,
    train_maps: list[PreparedMap],
    val_maps: list[PreparedMap],
    cfg: TrainConfig,
    norm_spec: NormalizationSpec,
    out_ckpt: str | Path,
) -> TrainResult:
    """Seeded training to the best-validation checkpoint.

    The model is constructed here, after seeding, so identical configs give
    identical runs. Divergence (non-finite loss) aborts with diagnostics.
    """
    if cfg.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    model_cfg = _apply_ablations(model_cfg, cfg)
    model = WorldModel(model_cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    stride = cfg.window_stride or model_cfg.p_horizon
    train_windows = window_index(train_maps, model_cfg.h_hist, model_cfg.p_horizon, stride)
    val_windows = window_index(val_maps, model_cfg.h_hist, model_cfg.p_horizon, stride)
    if not train_windows:
        raise ValueError("no training windows (maps shorter than H+P?)")
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    best_val = float("inf")
    best_state = None
    t_start = time.time()

    for step in range(1, cfg.total_steps + 1):
        warm = min(1.0, step / max(1, cfg.warmup_steps))
        for group in opt.param_groups:
            group["lr"] = cfg.lr * warm
        picks = rng.integers(0, len(train_windows), size=cfg.batch_maps)
        batch = [train_windows[int(i)] for i in picks]
        inputs, target = make_inputs(train_maps, batch, model_cfg)
        model.train()
        pred = model(inputs)
        loss = masked_loss(pred, target, inputs.mask_future, cfg.loss)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if step % cfg.val_every == 0 or step == cfg.total_steps:
            val = validation_loss(model, val_maps, model_cfg, stride, cfg.loss)
            history.append(
                {"step": step, "train_loss": float(loss.item()), "val_loss": val, "elapsed_s": time.time() - t_start}
            )
            log.info("step %d train %.4f val %.4f", step, loss.item(), val)
            if val < best_val:
                best_val = val
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        elif step % 50 == 0:
            history.append({"step": step, "train_loss": float(loss.item()), "elapsed_s": time.time() - t_start})

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    digest = save_checkpoint(out_ckpt, model, norm_spec, extra={"train_config": asdict(cfg)})
    curve_path = Path(out_ckpt).with_suffix(".curve.json")
    curve_path.write_text(json.dumps(history, indent=1))
    return TrainResult(str(out_ckpt), best_val, history, digest)


@torch.no_grad()
def validation_loss(model, maps, model_cfg, stride, loss_kind="mae") -> float:
    model.eval()
    windows = window_index(maps, model_cfg.h_hist, model_cfg.p_horizon, stride)
    if not windows:
        return float("nan")
    total, weight = 0.0, 0.0
    for i in range(0, len(windows), 8):
        chunk = windows[i : i + 8]
        inputs, target = make_inputs(maps, chunk, model_cfg)
        pred = model(inputs)
        err = (pred - target).abs() if loss_kind == "mae" else (pred - target) ** 2
        total += float((err * inputs.mask_future).sum())
        weight += float(inputs.mask_future.sum())
    return total / max(weight, 1.0)


def persistence_loss(maps: list[PreparedMap], model_cfg: ModelConfig, stride: int | None = None, loss_kind="mae") -> float:
    """Baseline that repeats the last observed value over the horizon,
    computed directly from the data on the same windows as validation."""
    stride = stride or model_cfg.p_horizon
    windows = window_index(maps, model_cfg.h_hist, model_cfg.p_horizon, stride)
    total, weight = 0.0, 0.0
    h, p = model_cfg.h_hist, model_cfg.p_horizon
    for i, t0 in windows:
        m = maps[i]
        last = m.traffic_norm[:, t0 + h - 1 : t0 + h]
        true = m.traffic_norm[:, t0 + h : t0 + h + p]
        mask = m.mask[:, t0 + h : t0 + h + p]
        err = (last.expand_as(true) - true).abs() if loss_kind == "mae" else (last - true) ** 2
        total += float((err * mask).sum())
        weight += float(mask.sum())
    return total / max(weight, 1.0)


# ---------------------------------------------------------------------------
# Metrics


def jsd_histogram(p_values: np.ndarray, q_values: np.ndarray, bins: int = 100) -> float:
    """Jensen-Shannon divergence (base 2, in [0, 1]) between equal-width
    histograms of the two pooled samples over their common min-max range.
    Zero-probability bins contribute 0 through the usual convention."""
    p_values = np.asarray(p_values, dtype=np.float64).ravel()
    q_values = np.asarray(q_values, dtype=np.float64).ravel()
    if p_values.size == 0 or q_values.size == 0:
        raise ValueError("empty sample for JSD")
    lo = min(p_values.min(), q_values.min())
    hi = max(p_values.max(), q_values.max())
    if hi <= lo:
        return 0.0
    hp, _ = np.histogram(p_values, bins=bins, range=(lo, hi))
    hq, _ = np.histogram(q_values, bins=bins, range=(lo, hi))
    p = hp / hp.sum()
    q = hq / hq.sum()
    m = (p + q) / 2.0

    def kl(a, b):
        sel = a > 0
        return float(np.sum(a[sel] * np.log2(a[sel] / b[sel])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


@dataclass
class EvalReport:
    jsd: float
    mae: float
    nrmse: float
    per_scenario: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.jsd <= 1.0 + 1e-9):
            raise ValueError(f"jsd out of range: {self.jsd}")
        if self.mae < 0 or self.nrmse < 0:
            raise ValueError("mae and nrmse must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def _metrics(pred: np.ndarray, true: np.ndarray) -> dict:
    mae = float(np.mean(np.abs(pred - true))) if pred.size else 0.0
    rmse = float(np.sqrt(np.mean((pred - true) ** 2))) if pred.size else 0.0
    rng = float(true.max() - true.min()) if pred.size else 0.0
    nrmse = 0.0 if rmse == 0.0 else (float("inf") if rng == 0.0 else rmse / rng)
    jsd = jsd_histogram(pred, true) if pred.size else 0.0
    return {"jsd": jsd, "mae": mae, "nrmse": nrmse, "n_values": int(pred.size)}


@torch.no_grad()
def evaluate(
    model: WorldModel,
    maps: list[PreparedMap],
    spec: NormalizationSpec,
    horizon_mode: str = "oneshot",
    stride: int | None = None,
) -> EvalReport:
    """Denormalized MAE / NRMSE over unmasked entries plus histogram JSD of
    pooled predicted vs true traffic. horizon_mode 'oneshot' scores direct
    P-step windows; 'rollout' scores one long autoregressive rollout per map."""
    if not maps:
        raise ValueError("empty evaluation set")
    model.eval()
    cfg = model.cfg
    stride = stride or cfg.p_horizon
    preds: dict[str, list] = {}
    trues: dict[str, list] = {}
    kinds = {m.map_id: m.kind for m in maps}
    if horizon_mode == "oneshot":
        windows = window_index(maps, cfg.h_hist, cfg.p_horizon, stride)
        for i in range(0, len(windows), 8):
            chunk = windows[i : i + 8]
            inputs, target = make_inputs(maps, chunk, cfg)
            out = model(inputs).cpu().numpy()
            tgt = target.cpu().numpy()
            msk = inputs.mask_future.cpu().numpy().astype(bool)
            for row, (mi, _) in enumerate(chunk):
                mid = maps[mi].map_id
                preds.setdefault(mid, []).append(
                    spec.denormalize_traffic(out[row][msk[row]])
                )
                trues.setdefault(mid, []).append(
                    spec.denormalize_traffic(tgt[row][msk[row]])
                )
    elif horizon_mode == "rollout":
        from .rollout import RolloutRequest, rollout as run_rollout

        for m in maps:
            k = (m.n_steps - cfg.h_hist) // cfg.p_horizon
            if k < 1:
                continue
            req = RolloutRequest(map_data=m, t_start=0, k_rounds=k)
            res = run_rollout(model, spec, req)
            horizon = k * cfg.p_horizon
            true_raw = m.traffic_raw[:, cfg.h_hist : cfg.h_hist + horizon]
            msk = m.mask[:, cfg.h_hist : cfg.h_hist + horizon].numpy().astype(bool)
            preds.setdefault(m.map_id, []).append(res.predicted[msk])
            trues.setdefault(m.map_id, []).append(true_raw[msk])
    else:
        raise ValueError(f"unknown horizon_mode {horizon_mode!r}")

    all_p = np.concatenate([np.concatenate(v) for v in preds.values()])
    all_t = np.concatenate([np.concatenate(v) for v in trues.values()])
    top = _metrics(all_p, all_t)
    per: dict[str, dict] = {}
    for mid in preds:
        per[mid] = _metrics(np.concatenate(preds[mid]), np.concatenate(trues[mid]))
        per[mid]["scenario"] = kinds[mid]
    for kind in sorted({k["scenario"] for k in per.values()}):
        sel_p = np.concatenate([np.concatenate(preds[m]) for m in preds if kinds[m] == kind])
        sel_t = np.concatenate([np.concatenate(trues[m]) for m in trues if kinds[m] == kind])
        per[f"scenario:{kind}"] = _metrics(sel_p, sel_t)
    return EvalReport(
        jsd=top["jsd"],
        mae=top["mae"],
        nrmse=top["nrmse"],
        per_scenario=per,
        config={"horizon_mode": horizon_mode, "stride": stride, "model": asdict(cfg)},
    )


split_maps = datamod.split_maps
fit_normalization = datamod.fit_normalization
prepare_maps = datamod.prepare_maps
