"""Neural world-model backbone: factorized spatio-temporal attention blocks
with a learned topology bias, shared Fourier coordinate encoding, learnable
embedding-table time encoding, gated multimodal conditioning, and the
encoder/decoder that maps (traffic history, action trajectory, context) to
future per-cell traffic in normalized space.

Checkpoints are a versioned binary container (config + normalization spec +
named little-endian f32 tensors + content digest).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .context import ContextEmbeddings, FacilityEncoder, ODEncoder, POIEncoder
from .netcore import NormalizationSpec

# Additive logit for masked keys: finite (no poisoned softmax on fully
# masked rows) but far enough below any real logit that exp underflows to
# exactly 0.0 in f32 after row-max subtraction.
MASKED_LOGIT = -1.0e9


@dataclass
class ModelConfig:
    d: int = 64                 # hidden width
    n_h: int = 4                # attention heads
    l_e: int = 3                # encoder blocks
    l_d: int = 3                # decoder blocks
    h_hist: int = 96            # history window (steps)
    p_horizon: int = 24         # prediction horizon (steps)
    fourier_bands: int = 6      # L, log-spaced from pi to pi*2^(L-1)
    q_slots: int = 96           # slots per day
    ffn_mult: int = 4
    dropout: float = 0.1
    # context geometry
    poi_k: int = 8
    grid_s: int = 16
    fac_h: int = 128
    fac_w: int = 128
    od_stride: int = 4          # OD slices subsampling for the tokenizer
    # ablation flags
    no_fa: bool = False         # drop facility-map conditioning
    no_od: bool = False         # drop OD-flow conditioning
    no_trn: bool = False        # topology bias forced to zero
    no_spe: bool = False        # spatial coordinate encoding forced to zero
    no_lg: bool = False         # all gates forced closed
    no_action: bool = False     # action conditioning forced off

    def __post_init__(self):
        if self.d % self.n_h != 0:
            raise ValueError(f"d={self.d} must be divisible by n_h={self.n_h}")
        if self.h_hist < 1 or self.p_horizon < 1:
            raise ValueError("h_hist and p_horizon must be >= 1")
        if self.fourier_bands < 1:
            raise ValueError("fourier_bands must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# Attention-shape instrumentation (factorization checks)

_ATTN_SHAPE_LOG: list | None = None


@contextmanager
def record_attention_shapes():
    """Collect (kind, logits_shape) for every attention materialized inside
    the context; used to verify the factorized cost pattern."""
    global _ATTN_SHAPE_LOG
    prev = _ATTN_SHAPE_LOG
    _ATTN_SHAPE_LOG = []
    try:
        yield _ATTN_SHAPE_LOG
    finally:
        _ATTN_SHAPE_LOG = prev


def _log_attn(kind: str, shape):
    if _ATTN_SHAPE_LOG is not None:
        _ATTN_SHAPE_LOG.append((kind, tuple(int(s) for s in shape)))


def masked_softmax(logits: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dim with masked keys excluded exactly.

    key_mask broadcasts against logits; 0 marks masked keys. Rows with every
    key masked come out as a uniform distribution over masked keys; callers
    zero those rows via their query mask.
    """
    logits = logits.masked_fill(key_mask == 0, MASKED_LOGIT)
    return torch.softmax(logits, dim=-1)


# ---------------------------------------------------------------------------
# Positional encodings


class TemporalPE(nn.Module):
    """Learnable slot-of-day and day-of-week embedding tables."""

    def __init__(self, d: int, q_slots: int = 96):
        super().__init__()
        self.q_slots = q_slots
        self.slot = nn.Embedding(q_slots, d)
        self.dow = nn.Embedding(7, d)

    def forward(self, slots: torch.Tensor, dows: torch.Tensor) -> torch.Tensor:
        if slots.numel() and (slots.min() < 0 or slots.max() >= self.q_slots):
            raise ValueError(f"slot index out of range [0, {self.q_slots})")
        if dows.numel() and (dows.min() < 0 or dows.max() >= 7):
            raise ValueError("day-of-week index out of range [0, 7)")
        return self.slot(slots) + self.dow(dows)


def fourier_features(coords: torch.Tensor, freqs: torch.Tensor) -> torch.Tensor:
    """[..., 2] normalized coords -> [..., 4L]: per axis (x then y), sines
    over ascending bands then cosines over ascending bands."""
    x = coords[..., 0:1] * freqs
    y = coords[..., 1:2] * freqs
    return torch.cat([torch.sin(x), torch.cos(x), torch.sin(y), torch.cos(y)], dim=-1)


def _rowwise_linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Linear layer evaluated per row with a fixed reduction order, so the
    result for a given coordinate does not depend on the batch shape it was
    submitted in (BLAS gemv/gemm pick different roundings)."""
    return (x.unsqueeze(-2) * weight).sum(-1) + bias


class SpatialPE(nn.Module):
    """Shared Fourier coordinate encoding: log-spaced bands from pi to
    pi*2^(L-1), one shared MLP. Every modality (cells, grid zones, facility
    pixels) calls this same module on extent-normalized coordinates; equal
    locations get bit-identical encodings regardless of the call path."""

    def __init__(self, d: int, n_bands: int, disabled: bool = False):
        super().__init__()
        self.disabled = disabled
        freqs = math.pi * (2.0 ** torch.arange(n_bands, dtype=torch.float32))
        self.register_buffer("freqs", freqs)
        self.lin1 = nn.Linear(4 * n_bands, d)
        self.lin2 = nn.Linear(d, d)
        self.out_dim = d

    def forward(self, coords_norm: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(coords_norm).all():
            raise ValueError("non-finite coordinates")
        if self.disabled:
            return coords_norm.new_zeros(coords_norm.shape[:-1] + (self.out_dim,))
        h = _rowwise_linear(fourier_features(coords_norm, self.freqs), self.lin1.weight, self.lin1.bias)
        return _rowwise_linear(F.gelu(h), self.lin2.weight, self.lin2.bias)


# ---------------------------------------------------------------------------
# Topology bias (learned pairwise distance / bearing / validity bias)


class TopoBias(nn.Module):
    """Per-pair additive attention logits from geometry and validity.

    Distance and bearing features each pass through their own input
    projection and then one shared feed-forward map; the two embeddings are
    summed and multiplied elementwise with a pair-validity embedding,
    yielding one logit per attention head. i==j uses bearing 0 by
    convention; everything stays finite and translation-invariant.
    """

    def __init__(self, n_h: int, hidden: int = 16, disabled: bool = False):
        super().__init__()
        self.disabled = disabled
        self.n_h = n_h
        self.dist_in = nn.Linear(1, hidden)
        self.bear_in = nn.Linear(2, hidden)
        self.shared = nn.Sequential(nn.GELU(), nn.Linear(hidden, n_h))
        self.pair_valid = nn.Embedding(2, n_h)

    def forward(self, coords_norm: torch.Tensor, cell_valid: torch.Tensor) -> torch.Tensor:
        b, n, _ = coords_norm.shape
        if self.disabled:
            return coords_norm.new_zeros(b, self.n_h, n, n)
        delta = coords_norm[:, :, None, :] - coords_norm[:, None, :, :]   # [B,N,N,2]
        d = torch.sqrt((delta**2).sum(-1) + 1e-12)
        near = d < 1e-6
        denom = torch.where(near, torch.ones_like(d), d)
        sin_a = torch.where(near, torch.zeros_like(d), delta[..., 0] / denom)
        cos_a = torch.where(near, torch.ones_like(d), delta[..., 1] / denom)
        e_feat = self.shared(self.dist_in(d.unsqueeze(-1))) + self.shared(
            self.bear_in(torch.stack([sin_a, cos_a], dim=-1))
        )
        valid = cell_valid.to(torch.long)
        pair = (valid[:, :, None] * valid[:, None, :])
        e_mask = self.pair_valid(pair)
        bias = e_feat * e_mask                                            # [B,N,N,n_h]
        return bias.permute(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Factorized attention


class SpatialAttention(nn.Module):
    """Per-timestep multi-head attention over the N cells, with the
    topology bias added to the logits and masked cells excluded."""

    def __init__(self, d: int, n_h: int, dropout: float):
        super().__init__()
        self.n_h = n_h
        self.d_k = d // n_h
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, topo_bias: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, n, t, d = x.shape
        qkv = self.qkv(x).reshape(b, n, t, 3, self.n_h, self.d_k)
        qkv = qkv.permute(3, 0, 2, 4, 1, 5)          # [3, B, T, n_h, N, d_k]
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)   # [B, T, n_h, N, N]
        logits = logits + topo_bias[:, None]
        _log_attn("spatial", logits.shape)
        key_mask = mask.permute(0, 2, 1)[:, :, None, None, :]    # [B, T, 1, 1, N]
        attn = self.drop(masked_softmax(logits, key_mask))
        out = attn @ v                                           # [B, T, n_h, N, d_k]
        out = out.permute(0, 3, 1, 2, 4).reshape(b, n, t, d)
        return self.out(out) * mask.unsqueeze(-1)


class TemporalAttention(nn.Module):
    """Per-cell multi-head attention over time. With `memory`, keys and
    values span [memory ; x] while queries stay on x (the decoder's bridge
    to the encoded history); without it, plain self-attention."""

    def __init__(self, d: int, n_h: int, dropout: float):
        super().__init__()
        self.n_h = n_h
        self.d_k = d // n_h
        self.q_proj = nn.Linear(d, d)
        self.kv_proj = nn.Linear(d, 2 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor,
        memory: torch.Tensor | None = None,
        memory_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        b, n, t, d = x.shape
        if memory is not None:
            kv_src = torch.cat([memory, x], dim=2)
            kv_mask = torch.cat([memory_mask, mask], dim=2)
        else:
            kv_src, kv_mask = x, mask
        t_kv = kv_src.shape[2]
        q = self.q_proj(x).reshape(b, n, t, self.n_h, self.d_k).permute(0, 1, 3, 2, 4)
        kv = self.kv_proj(kv_src).reshape(b, n, t_kv, 2, self.n_h, self.d_k)
        kv = kv.permute(3, 0, 1, 4, 2, 5)            # [2, B, N, n_h, T_kv, d_k]
        k, v = kv[0], kv[1]
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)   # [B, N, n_h, T, T_kv]
        _log_attn("temporal", logits.shape)
        key_mask = kv_mask[:, :, None, None, :]
        attn = self.drop(masked_softmax(logits, key_mask))
        out = attn @ v
        out = out.permute(0, 1, 3, 2, 4).reshape(b, n, t, d)
        return self.out(out) * mask.unsqueeze(-1)


class FeedForward(nn.Module):
    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d, mult * d), nn.GELU(), nn.Dropout(dropout), nn.Linear(mult * d, d)
        )

    def forward(self, x):
        return self.net(x)


class FSTBlock(nn.Module):
    """Spatial attention, temporal attention, FFN; residual around each,
    pre-norm inside each sublayer, masked positions pinned to zero."""

    def __init__(self, d: int, n_h: int, ffn_mult: int, dropout: float):
        super().__init__()
        self.ln_s = nn.LayerNorm(d)
        self.ln_t = nn.LayerNorm(d)
        self.ln_f = nn.LayerNorm(d)
        self.spatial = SpatialAttention(d, n_h, dropout)
        self.temporal = TemporalAttention(d, n_h, dropout)
        self.ffn = FeedForward(d, ffn_mult, dropout)

    def forward(self, x, topo_bias, mask, memory=None, memory_mask=None):
        x = x + self.spatial(self.ln_s(x), topo_bias, mask)
        x = x + self.temporal(self.ln_t(x), mask, memory, memory_mask)
        x = x + self.ffn(self.ln_f(x)) * mask.unsqueeze(-1)
        return x


class ConditionGate(nn.Module):
    """sigma(g) * Linear(LayerNorm(h)): a scalar learnable gate over an
    aligned projection of one condition. g starts at a small negative value
    so injections begin nearly closed."""

    def __init__(self, d: int, init: float = -5.0):
        super().__init__()
        self.g = nn.Parameter(torch.tensor(float(init)))
        self.ln = nn.LayerNorm(d)
        self.proj = nn.Linear(d, d)

    def forward(self, h: torch.Tensor, enabled: bool = True) -> torch.Tensor:
        if not enabled:
            return h.new_zeros(h.shape)
        return torch.sigmoid(self.g) * self.proj(self.ln(h))


# ---------------------------------------------------------------------------
# Model inputs


@dataclass
class ModelInputs:
    """One window batch, everything already normalized / extent-normalized."""

    traffic_hist: torch.Tensor      # [B, N, H]
    actions: torch.Tensor           # [B, N, H+P, 4]
    mask_hist: torch.Tensor         # [B, N, H] float
    mask_future: torch.Tensor       # [B, N, P] float
    coords: torch.Tensor            # [B, N, 2] extent-normalized
    slots: torch.Tensor             # [B, H+P] int64
    dows: torch.Tensor              # [B, H+P] int64
    poi: torch.Tensor | None = None     # [B, S, S, K]
    od: torch.Tensor | None = None      # [B, S, S, T_od]
    fac: torch.Tensor | None = None     # [B, H_f, W_f]
    grid_coords: torch.Tensor | None = None   # [B, S, S, 2]
    fine_coords: torch.Tensor | None = None   # [B, H_f/4, W_f/4, 2]

    def to(self, device):
        for f in fields(self):
            v = getattr(self, f.name)
            if torch.is_tensor(v):
                setattr(self, f.name, v.to(device))
        return self


class WorldModel(nn.Module):
    """Encoder-decoder traffic dynamics model over graph batches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.state_embed = nn.Linear(1, d)
        self.action_embed = nn.Linear(4, d)
        self.temporal_pe = TemporalPE(d, cfg.q_slots)
        self.spatial_pe = SpatialPE(d, cfg.fourier_bands, disabled=cfg.no_spe)
        self.topo = TopoBias(cfg.n_h, disabled=cfg.no_trn)
        self.encoder_blocks = nn.ModuleList(
            [FSTBlock(d, cfg.n_h, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.l_e)]
        )
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder_blocks = nn.ModuleList(
            [FSTBlock(d, cfg.n_h, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.l_d)]
        )
        self.head = nn.Linear(d, 1)
        self.poi_enc = POIEncoder(cfg.poi_k, d)
        self.od_enc = ODEncoder(d)
        self.fac_enc = FacilityEncoder(d)
        self.gate_f = ConditionGate(d)
        self.gate_o = ConditionGate(d)
        self.gate_p = ConditionGate(d)
        self.gate_a = ConditionGate(d)

    # gate enablement under the ablation flags
    def _fa_on(self) -> bool:
        return not (self.cfg.no_fa or self.cfg.no_lg)

    def _od_on(self) -> bool:
        return not (self.cfg.no_od or self.cfg.no_lg)

    def _poi_on(self) -> bool:
        return not self.cfg.no_lg

    def _act_on(self) -> bool:
        return not (self.cfg.no_action or self.cfg.no_lg)

    def encode_context(self, poi, od, fac, grid_coords, fine_coords) -> ContextEmbeddings:
        pe_coarse = self.spatial_pe(grid_coords)
        pe_fine = self.spatial_pe(fine_coords)
        h_p = self.poi_enc(poi, pe_coarse)
        od_sub = od[..., :: self.cfg.od_stride] if self.cfg.od_stride > 1 else od
        h_o = self.od_enc(od_sub, pe_coarse)
        h_ff, h_fc, h_f = self.fac_enc(fac, pe_fine, pe_coarse)
        return ContextEmbeddings(h_p, h_o, h_f, h_ff, h_fc)

    def encode_action(self, actions_norm, slots, dows) -> torch.Tensor:
        """[B, N, H+P, 4] normalized actions -> [B, N, H+P, d] step-local
        tokens with the temporal encoding added."""
        h = self.action_embed(actions_norm)
        return h + self.temporal_pe(slots, dows)[:, None, :, :]

    def encode_state(self, traffic_hist, h_a, coords, slots, dows, mask_hist, topo_bias):
        h = self.cfg.h_hist
        if traffic_hist.shape[2] != h:
            raise ValueError(f"history length {traffic_hist.shape[2]} != configured H={h}")
        x = self.state_embed(traffic_hist.unsqueeze(-1))
        x = x + self.temporal_pe(slots[:, :h], dows[:, :h])[:, None]
        x = x + self.spatial_pe(coords)[:, :, None, :]
        x = x + self.gate_a(h_a[:, :, :h], enabled=self._act_on())
        x = x * mask_hist.unsqueeze(-1)
        for blk in self.encoder_blocks:
            x = blk(x, topo_bias, mask_hist)
        return self.encoder_norm(x) * mask_hist.unsqueeze(-1)

    def decode_state(self, z_h, h_a, ctx, coords, slots, dows, mask_hist, mask_future, topo_bias):
        b, n, h, d = z_h.shape
        p = self.cfg.p_horizon
        pe_t = self.temporal_pe(slots[:, h : h + p], dows[:, h : h + p])[:, None]
        x = (pe_t + self.spatial_pe(coords)[:, :, None, :]).expand(b, n, p, d)
        x = x + self.gate_a(h_a[:, :, h : h + p], enabled=self._act_on())
        if ctx is not None:
            x = x + self.gate_f(ctx.h_f, enabled=self._fa_on())[:, None, None, :]
            x = x + self.gate_o(ctx.h_o, enabled=self._od_on())[:, None, None, :]
            x = x + self.gate_p(ctx.h_p, enabled=self._poi_on())[:, None, None, :]
        elif self._fa_on() or self._od_on() or self._poi_on():
            raise ValueError("context missing but context gates are enabled; set ablation flags")
        x = x * mask_future.unsqueeze(-1)
        for blk in self.decoder_blocks:
            x = blk(x, topo_bias, mask_future, memory=z_h, memory_mask=mask_hist)
        return self.head(x).squeeze(-1) * mask_future

    def forward(self, inp: ModelInputs) -> torch.Tensor:
        have_ctx = inp.poi is not None and inp.od is not None and inp.fac is not None
        ctx = (
            self.encode_context(inp.poi, inp.od, inp.fac, inp.grid_coords, inp.fine_coords)
            if have_ctx
            else None
        )
        h_a = self.encode_action(inp.actions, inp.slots, inp.dows)
        valid = (inp.mask_hist.sum(2) + inp.mask_future.sum(2)) > 0
        topo_bias = self.topo(inp.coords, valid)
        z_h = self.encode_state(
            inp.traffic_hist, h_a, inp.coords, inp.slots, inp.dows, inp.mask_hist, topo_bias
        )
        return self.decode_state(
            z_h, h_a, ctx, inp.coords, inp.slots, inp.dows, inp.mask_hist, inp.mask_future, topo_bias
        )

    def with_flags(self, **flags) -> "WorldModel":
        """Same weights, different ablation flags (e.g. action conditioning
        switched off at inference)."""
        import copy

        clone = copy.deepcopy(self)
        cfg = ModelConfig(**{**asdict(self.cfg), **flags})
        clone.cfg = cfg
        clone.spatial_pe.disabled = cfg.no_spe
        clone.topo.disabled = cfg.no_trn
        return clone


# ---------------------------------------------------------------------------
# Checkpoint container

CKPT_MAGIC = b"MWTC"
CKPT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: WorldModel,
    norm_spec: NormalizationSpec,
    extra: dict | None = None,
) -> str:
    """Write the versioned checkpoint; returns the content digest."""
    state = model.state_dict()
    blob = io.BytesIO()
    index = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blob.write(raw)
        offset += len(raw)
    payload = blob.getvalue()
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "magic": "MWTC",
        "version": CKPT_VERSION,
        "config": asdict(model.cfg),
        "norm_spec": norm_spec.as_dict(),
        "tensors": index,
        "digest": digest,
        "extra": extra or {},
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(hdr).to_bytes(8, "little"))
        f.write(hdr)
        f.write(payload)
    return digest


def load_checkpoint(path: str | Path):
    """-> (model in eval mode, norm_spec, header dict). Shapes are validated
    against a model freshly built from the stored config."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        hdr_len = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hdr_len).decode("utf-8"))
        payload = f.read()
    if header["version"] != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["digest"]:
        raise ValueError(f"{path}: checkpoint payload digest mismatch")
    cfg = ModelConfig.from_dict(header["config"])
    model = WorldModel(cfg)
    expected = model.state_dict()
    state = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise ValueError(f"checkpoint tensor {name} not in model")
        if tuple(expected[name].shape) != shape:
            raise ValueError(
                f"checkpoint tensor {name} shape {shape} != model {tuple(expected[name].shape)}"
            )
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        state[name] = torch.from_numpy(arr).to(expected[name].dtype)
    missing = set(expected) - set(state)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)}")
    model.load_state_dict(state)
    model.eval()
    spec = NormalizationSpec.from_dict(header["norm_spec"])
    return model, spec, header
