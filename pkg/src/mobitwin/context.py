"""Environmental context: synthetic POI / OD-flow / facility rasters for
generated maps, and the three encoders that compress them into the
fixed-width condition vectors consumed by the decoder gates.

The encoders receive the one shared coordinate encoding module so that
identical locations produce bit-identical positional signals across
modalities; they take normalized coordinate grids, never raw meters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .netcore import MapBounds, MapGraph


# ---------------------------------------------------------------------------
# Synthesis (numpy, deterministic per seed)


def grid_centers(bounds: MapBounds, s: int) -> np.ndarray:
    """Meter coordinates [S, S, 2] of grid-zone centers, x-major."""
    xs = bounds.x_min + (np.arange(s) + 0.5) / s * (bounds.x_max - bounds.x_min)
    ys = bounds.y_min + (np.arange(s) + 0.5) / s * (bounds.y_max - bounds.y_min)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def pixel_block_centers(bounds: MapBounds, h: int, w: int, stride: int) -> np.ndarray:
    """Meter coordinates [h//stride, w//stride, 2] of stride-block centers."""
    xs = bounds.x_min + (np.arange(w // stride) * stride + stride / 2.0) / w * (bounds.x_max - bounds.x_min)
    ys = bounds.y_min + (np.arange(h // stride) * stride + stride / 2.0) / h * (bounds.y_max - bounds.y_min)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx, gy], axis=-1)


def poi_intensity(hotspots, centers: np.ndarray, base_rates: np.ndarray, affinities) -> np.ndarray:
    """Poisson intensity [S, S, K]; uniform per category when no hotspots."""
    s = centers.shape[0]
    k = len(base_rates)
    lam = np.tile(base_rates, (s, s, 1)).astype(np.float64)
    for h, cats in zip(hotspots, affinities):
        inside = np.hypot(centers[..., 0] - h.x, centers[..., 1] - h.y) <= h.radius
        for c in cats:
            lam[..., c] = np.where(inside, lam[..., c] * h.amplitude, lam[..., c])
    return lam


def synth_context(
    graph: MapGraph,
    hotspots,
    seed: int,
    grid_s: int,
    poi_k: int,
    fac_hw: tuple[int, int],
    t_steps: int,
    demand,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Synthesize (POI [S,S,K], OD [S,S,T], facility [H,W] in [0,1]).

    POI categories follow the demand hotspots; OD tracks the deterministic
    demand intensity at zone centers; the facility raster holds building
    rectangles (values <= 0.8) plus one exact-1.0 marker pixel per cell site.
    """
    bounds = graph.bounds
    centers = grid_centers(bounds, grid_s)
    rng_poi = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    base_rates = rng_poi.uniform(0.5, 2.0, size=poi_k)
    affinities = [rng_poi.choice(poi_k, size=rng_poi.integers(1, 3), replace=False) for _ in hotspots]
    lam = poi_intensity(hotspots, centers, base_rates, affinities)
    poi = rng_poi.poisson(lam).astype(np.float64)

    rng_od = np.random.default_rng(np.random.SeedSequence([seed, 102]))
    boost = demand.hotspot_boost(centers.reshape(-1, 2)).reshape(grid_s, grid_s)
    slots = np.arange(t_steps) % 96
    dows = (np.arange(t_steps) // 96) % 7
    temporal = demand.base_profile[slots] * demand.day_multipliers[dows]   # [T]
    noise = np.exp(0.15 * rng_od.standard_normal((grid_s, grid_s, t_steps)))
    od = boost[:, :, None] * temporal[None, None, :] * noise

    h_f, w_f = fac_hw
    rng_fac = np.random.default_rng(np.random.SeedSequence([seed, 103]))
    fac = np.zeros((h_f, w_f))
    n_buildings = max(8, int(0.004 * h_f * w_f))
    for _ in range(n_buildings):
        if hotspots and rng_fac.uniform() < 0.5:
            h = hotspots[rng_fac.integers(len(hotspots))]
            cx, cy = h.x + rng_fac.standard_normal() * h.radius, h.y + rng_fac.standard_normal() * h.radius
        else:
            cx = rng_fac.uniform(bounds.x_min, bounds.x_max)
            cy = rng_fac.uniform(bounds.y_min, bounds.y_max)
        rel = bounds.normalize(np.array([[cx, cy]]))[0]
        px = int(rel[0] * w_f)
        py = int(rel[1] * h_f)
        bw = int(rng_fac.integers(2, 9))
        bh = int(rng_fac.integers(2, 9))
        val = rng_fac.uniform(0.3, 0.8)
        fac[max(0, py) : min(h_f, py + bh), max(0, px) : min(w_f, px + bw)] = val

    site_pixels = set()
    for c in graph.cells:
        rel = bounds.normalize(np.array([[c.x, c.y]]))[0]
        px = min(w_f - 1, max(0, int(rel[0] * w_f)))
        py = min(h_f - 1, max(0, int(rel[1] * h_f)))
        if (py, px) in site_pixels:
            raise ValueError(
                f"two cell sites rasterize to the same facility pixel ({py},{px}); "
                "raise the raster resolution or the cell separation"
            )
        site_pixels.add((py, px))
        fac[py, px] = 1.0
    return poi, od, fac


# ---------------------------------------------------------------------------
# Encoders (torch)


@dataclass
class ContextEmbeddings:
    """Condition vectors for one batch of maps, all width d."""

    h_p: torch.Tensor          # [B, d]
    h_o: torch.Tensor          # [B, d]
    h_f: torch.Tensor          # [B, d]
    h_ff: torch.Tensor         # [B, d, H_f/4, W_f/4] fine facility map
    h_fc: torch.Tensor         # [B, d, S, S] coarse facility map


class POIEncoder(nn.Module):
    """Multi-scale conv branches -> 1x1 projection -> +coarse PE -> GAP."""

    def __init__(self, k_categories: int, d: int, branch_channels: int = 16):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(k_categories, branch_channels, ks, padding=ks // 2) for ks in (3, 5, 7)]
        )
        self.proj = nn.Conv2d(3 * branch_channels, d, 1)

    def forward(self, poi: torch.Tensor, pe_coarse: torch.Tensor) -> torch.Tensor:
        # poi [B, S, S, K]; pe_coarse [B, S, S, d] from the shared coordinate encoder
        x = poi.permute(0, 3, 1, 2)
        feats = torch.cat([b(x) for b in self.branches], dim=1)
        feats = self.proj(F.gelu(feats))
        feats = feats + pe_coarse.permute(0, 3, 1, 2)
        return feats.mean(dim=(2, 3))


class ODEncoder(nn.Module):
    """Slice-local spatial tokenizer, then one learnable query attends over
    the T slice tokens. No temporal ordering signal on the slices: the
    output conditions a whole window, so slice order is deliberately
    discarded."""

    def __init__(self, d: int):
        super().__init__()
        self.tokenizer = nn.Conv2d(1, d, 3, padding=1)
        self.query = nn.Parameter(torch.randn(d) * 0.02)
        self.w_k = nn.Linear(d, d)
        self.w_v = nn.Linear(d, d)
        self.scale = d**-0.5

    def forward(self, od: torch.Tensor, pe_coarse: torch.Tensor) -> torch.Tensor:
        # od [B, S, S, T]; pe_coarse [B, S, S, d]
        b, s, _, t = od.shape
        slices = od.permute(0, 3, 1, 2).reshape(b * t, 1, s, s)
        feats = self.tokenizer(slices).reshape(b, t, -1, s, s)
        feats = feats + pe_coarse.permute(0, 3, 1, 2).unsqueeze(1)
        tokens = feats.mean(dim=(3, 4))                      # [B, T, d]
        k = self.w_k(tokens)
        v = self.w_v(tokens)
        logits = torch.einsum("d,btd->bt", self.query, k) * self.scale
        attn = torch.softmax(logits, dim=1)
        return torch.einsum("bt,btd->bd", attn, v)


class FacilityEncoder(nn.Module):
    """Strided conv pyramid: fine map at stride 4 (+fine PE), coarse map
    resampled to the SxS grid (+coarse PE), global vector by average
    pooling the coarse map."""

    def __init__(self, d: int, trunk_channels: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(1, trunk_channels, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(trunk_channels, d, 3, stride=2, padding=1)

    def forward(self, fac: torch.Tensor, pe_fine: torch.Tensor, pe_coarse: torch.Tensor):
        # fac [B, H_f, W_f]; pe_fine [B, H_f/4, W_f/4, d]; pe_coarse [B, S, S, d]
        x = fac.unsqueeze(1)
        x = self.conv2(F.gelu(self.conv1(x)))                # [B, d, H/4, W/4]
        h_ff = x + pe_fine.permute(0, 3, 1, 2)
        s = pe_coarse.shape[1]
        h_fc = F.adaptive_avg_pool2d(h_ff, s) + pe_coarse.permute(0, 3, 1, 2)
        h_f = h_fc.mean(dim=(2, 3))
        return h_ff, h_fc, h_f
