import numpy as np
import pytest

from forchup.errors import DomainError
from forchup.experiments import (
    CompressibleConfig,
    FieldSpec,
    GridSpec,
    IncompressibleConfig,
    TransientConfig,
    pivot,
    run_compressible,
    run_incompressible,
    run_transient_comparison,
    write_pivot_csv,
    write_rows_csv,
)

SMALL = GridSpec(20, 20, 2, 2)


def test_incompressible_layered_small():
    cfg = IncompressibleConfig(grid=SMALL, field=FieldSpec("horizontal-stratified", layer_count=4),
                               ratios=(0.0, 10.0), workers=1)
    rows = run_incompressible(cfg)
    assert len(rows) == 6
    err = {(r["method"], r["ratio"]): r["vel_err"] for r in rows}
    for ratio in (0.0, 10.0):
        assert err["num", ratio] < 1e-6 and err["par", ratio] < 1e-6
    assert err["perp", 0.0] < 1e-6 < err["perp", 10.0]
    assert all(r["unique_blocks"] == 1 for r in rows)


def test_incompressible_darcy_column_shared():
    cfg = IncompressibleConfig(grid=SMALL, field=FieldSpec("random", seed=2), ratios=(0.0,), workers=1)
    errs = [r["vel_err"] for r in run_incompressible(cfg)]
    assert max(errs) - min(errs) < 1e-12


def test_compressible_rows():
    cfg = CompressibleConfig(grid=GridSpec(16, 16, 2, 2), field=FieldSpec(layer_count=4),
                             patterns=("random",), alphas=(1 / 3,), variants=("i", "iv"), refine=2, workers=1)
    rows = run_compressible(cfg)
    assert len(rows) == 4
    for r in rows:
        assert 0 <= r["pi_err"] < 0.2 and 0 <= r["vel_err"] < 0.2
        assert r["J_fine"] > 0 and r["J_coarse"] > 0
    iv = [r for r in rows if r["variant"] == "iv"]
    assert all(r["phi_flux_residual"] < 1e-8 for r in iv)


def test_transient_comparison_small():
    cfg = TransientConfig(grid=GridSpec(16, 16, 2, 2), field=FieldSpec("random", seed=1), refine=2,
                          dt=0.005, T=0.05, workers=1)
    res = run_transient_comparison(cfg)
    s = res["series"]
    assert len(s) == 10
    assert s[-1]["dev_fine"] < s[0]["dev_fine"]
    assert abs(s[-1]["J_fine"] - res["J_pss_fine"]) < abs(s[0]["J_fine"] - res["J_pss_fine"])


def test_pivot_and_csv(tmp_path):
    rows = [{"m": "a", "r": 1, "v": 0.5}, {"m": "a", "r": 2, "v": 0.25}, {"m": "b", "r": 1, "v": 1.0}]
    rk, ck, tab = pivot(rows, "m", "r", "v")
    assert rk == ["a", "b"] and ck == [1, 2]
    assert tab[0, 1] == 0.25 and np.isnan(tab[1, 1])
    write_rows_csv(tmp_path / "long.csv", rows)
    assert (tmp_path / "long.csv").read_text().splitlines()[1] == "a,1,0.5"
    write_pivot_csv(tmp_path / "wide.csv", rows, "m", "r", "v", "method")
    assert (tmp_path / "wide.csv").read_text().splitlines()[0] == "method,1,2"


def test_config_validation():
    with pytest.raises(DomainError):
        GridSpec(10, 10, 3, 3).partition()
