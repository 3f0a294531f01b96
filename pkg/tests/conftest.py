import numpy as np
import pytest
import torch

from mobitwin.data import fit_normalization, prepare_maps
from mobitwin.fstcore import ModelConfig
from mobitwin.netcore import load_dataset
from mobitwin.physics import ScenarioConfig, generate_scenario

torch.set_num_threads(1)


# small model config matching the tiny scenario geometry below
TINY_MODEL = dict(
    d=16, n_h=2, l_e=1, l_d=1, h_hist=12, p_horizon=4,
    fourier_bands=3, poi_k=4, grid_s=8, fac_h=32, fac_w=32, dropout=0.0,
)

TINY_SCENARIO = dict(
    n_cells=8, n_ues=60, t_steps=96, extent_m=1200.0, grid_s=8, poi_k=4,
    fac_h=32, fac_w=32, k_neighbors=3, outage_events=0,
)


def tiny_model_config(**over) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **over})


def tiny_scenario_config(seed=0, **over) -> ScenarioConfig:
    return ScenarioConfig(**{**TINY_SCENARIO, "seed": seed, **over})


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyds")
    for seed in (0, 1):
        generate_scenario(tiny_scenario_config(seed=seed), root)
    return root


@pytest.fixture(scope="session")
def tiny_maps(tiny_dataset_dir):
    """(prepared maps, norm spec, raw datasets) for the tiny scenarios."""
    datasets = [load_dataset(d) for d in sorted(tiny_dataset_dir.iterdir())]
    spec = fit_normalization(datasets)
    return prepare_maps(datasets, spec), spec, datasets


# ---------------------------------------------------------------------------
# Finite-difference oracle (central differences; computed in float64 so the
# oracle's own roundoff stays far below the 1e-3 gate)


def fd_gradient(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(ad: torch.Tensor, fd: torch.Tensor, floor_frac: float = 1e-2) -> float:
    """Elementwise relative error with a floor tied to the gradient scale,
    so near-zero entries are judged on absolute noise."""
    scale = max(ad.abs().max().item(), 1e-12)
    denom = torch.maximum(torch.maximum(ad.abs(), fd.abs()), torch.full_like(ad, floor_frac * scale))
    return ((ad - fd).abs() / denom).max().item()


def check_gradient(module_fn, x: torch.Tensor, tol: float = 1e-3) -> float:
    """Autodiff-vs-central-differences check of a scalar-valued function of
    one input tensor. Returns the max relative error (asserted < tol)."""
    x = x.detach().double().requires_grad_(True)

    def f():
        return module_fn(x)

    out = f()
    (grad,) = torch.autograd.grad(out, x)
    with torch.no_grad():
        fd = fd_gradient(f, x.data)
    err = max_rel_err(grad, fd)
    assert err < tol, f"gradient mismatch: max rel err {err:.3e} >= {tol}"
    return err
