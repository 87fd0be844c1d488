"""Small ready-made cases used for verification and demos."""
from __future__ import annotations

import numpy as np

from .assemble import DARCY
from .model import (
    FluidModel,
    GridModel,
    NumericalControls,
    SimulationCase,
    WellControl,
    WellSpec,
)


def peaceman_index(grid: GridModel, cell: int, rw: float = 0.1, skin: float = 0.0) -> float:
    """Well index for a vertical well in a Cartesian cell (isotropic form)."""
    k = float(np.sqrt(grid.perm_x[cell] * grid.perm_y[cell]))
    ro = 0.14 * np.hypot(grid.dx, grid.dy)
    return DARCY * 2.0 * np.pi * k * grid.dz / (np.log(ro / rw) + skin)


def darcy_pair_case(q=10.0, k=100.0, mu_w=1.0, length=10.0, area=10.0, bhp=100.0,
                    controls: NumericalControls | None = None) -> SimulationCase:
    """Two water-filled cells in a row: rate injector left, BHP producer right.

    All compressibilities are zero, so the first step is already the steady
    state and the cell pressure difference is Darcy's ``q mu L / (k A)``.
    """
    grid = GridModel(nx=2, ny=1, dx=length, dy=area, dz=1.0, perm_x=k, perm_y=k, porosity=0.25)
    fluid = FluidModel(mu_w=mu_w, mu_o=1.0, c_o=0.0, c_w=0.0, c_r=0.0, p_ref=bhp)
    wells = [
        WellSpec("INJ", 0, "injector", 1.0, [WellControl(0.0, 1.0, "rate", q)]),
        WellSpec("PROD", 1, "producer", 1.0, [WellControl(0.0, 1.0, "bhp", bhp)]),
    ]
    controls = controls or NumericalControls(solver_kind="direct", dt_max=1.0, maxchange_press=1e4)
    return SimulationCase(grid, fluid, wells, controls, horizon_days=1.0, report_interval_days=1.0,
                          p_init=bhp, sw_init=1.0)


def lognormal_field(nx, ny, mean_log=np.log(100.0), std_log=1.0, corr_len=3.0, rng=None) -> np.ndarray:
    """Moving-average smoothed Gaussian field, exponentiated (row-major, x fastest)."""
    from scipy.ndimage import uniform_filter

    rng = np.random.default_rng(rng)
    z = rng.standard_normal((ny, nx))
    size = max(1, int(round(corr_len)))
    if size > 1:
        z = uniform_filter(z, size=size, mode="reflect")
    sd = z.std()
    z = (z - z.mean()) / (sd if sd > 0 else 1.0)
    return np.exp(mean_log + std_log * z).ravel()


def quarter_five_spot(nx=20, ny=20, perm=None, porosity=None, horizon=365.0, report=30.0,
                      inj_rate=None, prod_bhp=150.0, p_init=200.0, sw_init=0.1,
                      controls: NumericalControls | None = None, fluid: FluidModel | None = None,
                      dx=20.0, dy=20.0, dz=10.0) -> SimulationCase:
    """Water injector in one corner, BHP producer in the opposite corner."""
    if perm is None:
        perm = lognormal_field(nx, ny, rng=1234)
    if porosity is None:
        porosity = np.clip(0.2 + 0.03 * np.log(np.asarray(perm) / 100.0), 0.05, 0.35)
    grid = GridModel(nx=nx, ny=ny, dx=dx, dy=dy, dz=dz, perm_x=perm, perm_y=perm, porosity=porosity)
    pore_volume = float(np.sum(grid.porosity) * grid.cell_volume)
    if inj_rate is None:
        inj_rate = 0.6 * pore_volume / horizon  # ~0.6 pore volumes over the horizon
    inj = grid.cell_index(0, 0)
    prod = grid.cell_index(nx - 1, ny - 1)
    wells = [
        WellSpec("INJ1", inj, "injector", peaceman_index(grid, inj),
                 [WellControl(0.0, horizon, "rate", inj_rate)]),
        WellSpec("PROD1", prod, "producer", peaceman_index(grid, prod),
                 [WellControl(0.0, horizon, "bhp", prod_bhp)]),
    ]
    return SimulationCase(grid, fluid or FluidModel(), wells, controls or NumericalControls(),
                          horizon_days=horizon, report_interval_days=report,
                          p_init=p_init, sw_init=sw_init)


def reference_case(controls: NumericalControls | None = None) -> SimulationCase:
    """The 20x20 heterogeneous verification case."""
    return quarter_five_spot(nx=20, ny=20, controls=controls)
