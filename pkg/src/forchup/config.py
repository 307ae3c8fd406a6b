"""Run configuration: INI files with named presets.

A config file is plain INI.  ``[run] preset = well-desk`` starts from a
named preset and the remaining keys override it.  Lists are comma
separated.  Example::

    [run]
    preset = pressure-drop-desk
    seed = 3

    [field]
    pattern = random

    [gstar]
    eps_n = 0.05
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .errors import DomainError
from .experiments import (
    CompressibleConfig,
    FieldSpec,
    GridSpec,
    IncompressibleConfig,
    TransientConfig,
)
from .fem import FACES, PICARD_MAX_ITER, PICARD_TOL
from .upscaling import VARIANTS, GStarControls

BC_PRESETS = ("pressure-drop", "well")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run, flattened into INI sections."""

    grid: GridSpec = GridSpec(100, 100, 10, 10)
    field: FieldSpec = FieldSpec()
    # nonlinearity
    law: str = "two-term"
    beta_min: float = 8e-6
    ratios: tuple = (0.0, 1.0, 10.0, 100.0)
    alphas: tuple = (1 / 3, 1 / 4, 1 / 5)
    laws: tuple = ("darcy", "two-term")
    phi_scale: float = 0.1
    # boundary conditions and well
    bc: str = "pressure-drop"
    p0: float = 0.0
    p1: float = 1.0
    Q: float = 50.0
    gamma: float = 1.0
    well_face: str = "right"
    # upscaling
    variant: str = "i"
    variants: tuple = ("i",)
    methods: tuple = ("par", "perp", "num")
    patterns: tuple = ("vertical-stratified", "horizontal-stratified", "random", "linear")
    refine: int = 4
    gstar: GStarControls = GStarControls()
    range_factor: Optional[float] = 4.0
    # solver
    picard_tol: float = PICARD_TOL
    picard_max_iter: int = PICARD_MAX_ITER
    # transient
    dt: float = 0.001
    T: float = 0.1
    store_every: int = 1
    perturbation: float = 0.5
    well_model: str = "equipotential"
    # execution
    seed: int = 0
    workers: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS or any(v not in VARIANTS for v in self.variants):
            raise DomainError(f"variant must be one of {VARIANTS}")
        if self.bc not in BC_PRESETS:
            raise DomainError(f"bc must be one of {BC_PRESETS}")
        if self.well_face not in FACES:
            raise DomainError(f"unknown well face {self.well_face!r}")
        for name in ("picard_tol", "dt", "T"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.refine < 1:
            raise DomainError("refine must be >= 1")
        self.grid.partition()  # divisibility check

    # -- derived run configs ---------------------------------------------

    def with_overrides(self, **kw) -> "RunConfig":
        if "seed" in kw and kw["seed"] is not None:
            kw["field"] = replace(kw.get("field", self.field), seed=kw["seed"])
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def _common(self):
        return dict(grid=self.grid, field=self.field, refine=self.refine, controls=self.gstar,
                    range_factor=self.range_factor, workers=self.workers,
                    tol=self.picard_tol, max_iter=self.picard_max_iter)

    def incompressible(self) -> IncompressibleConfig:
        return IncompressibleConfig(beta_min=self.beta_min, ratios=self.ratios, methods=self.methods,
                                    p0=self.p0, p1=self.p1, **self._common())

    def compressible(self) -> CompressibleConfig:
        return CompressibleConfig(patterns=self.patterns, alphas=self.alphas, laws=self.laws,
                                  variants=self.variants, phi_scale=self.phi_scale, Q=self.Q,
                                  gamma=self.gamma, well_face=self.well_face, **self._common())

    def transient(self) -> TransientConfig:
        return TransientConfig(alpha=self.alphas[0], law=self.law, variant=self.variant,
                               phi_scale=self.phi_scale, Q=self.Q, gamma=self.gamma,
                               well_face=self.well_face, well_model=self.well_model, dt=self.dt,
                               T=self.T, store_every=self.store_every, perturbation=self.perturbation,
                               **self._common())

    # -- serialization ---------------------------------------------------

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in _LAYOUT.items():
            cp[section] = {}
            for key, (attr, sub) in keys.items():
                obj = getattr(self, attr) if sub else self
                cp[section][key] = _format(getattr(obj, sub or attr))
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        """SHA-256 of the canonical INI text."""
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


# section -> ini key -> (RunConfig attribute, sub-attribute or None)
_LAYOUT = {
    "run": {"seed": ("seed", None), "workers": ("workers", None), "variant": ("variant", None),
            "variants": ("variants", None), "refine": ("refine", None)},
    "grid": {k: ("grid", k) for k in ("nx", "ny", "mx", "my", "Lx", "Ly")},
    "field": {k: ("field", k) for k in ("pattern", "k_min", "contrast", "layer_count", "profile")},
    "law": {k: (k, None) for k in ("law", "laws", "beta_min", "ratios", "alphas", "phi_scale")},
    "bc": {k: (k, None) for k in ("bc", "p0", "p1", "Q", "gamma", "well_face")},
    "sweep": {k: (k, None) for k in ("methods", "patterns")},
    "gstar": dict({k: ("gstar", k) for k in ("eps_n", "eps", "eps_d", "eta1", "eta2", "xi_ref", "n_angles",
                                              "max_levels", "max_bisect", "local_bc", "normalization",
                                              "r_max")},
                  range_factor=("range_factor", None)),
    "solver": {"picard_tol": ("picard_tol", None), "picard_max_iter": ("picard_max_iter", None)},
    "transient": {k: (k, None) for k in ("dt", "T", "store_every", "perturbation", "well_model")},
}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, like):
    t = text.strip()
    if t.lower() == "none":
        return None
    if isinstance(like, bool):
        return t.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float) or like is None:
        # fractions such as 1/3 are allowed for exponents
        return float(Fraction(t)) if "/" in t else float(t)
    return t


def _parse(text: str, like):
    if isinstance(like, tuple):
        proto = like[0] if like else ""
        return tuple(_parse_scalar(p, proto) for p in text.split(",") if p.strip())
    return _parse_scalar(text, like)


# -- presets -------------------------------------------------------------------

_PRESSURE_DROP = dict(bc="pressure-drop", law="two-term", beta_min=8e-6, ratios=(0.0, 1.0, 10.0, 100.0),
                      field=FieldSpec(pattern="horizontal-stratified", layer_count=40), refine=4)
_WELL = dict(bc="well", Q=50.0, gamma=1.0, well_face="right", refine=8,
             field=FieldSpec(pattern="vertical-stratified", layer_count=64))

PRESETS = {
    "default": {},
    "pressure-drop": dict(_PRESSURE_DROP, grid=GridSpec(400, 400, 20, 20)),
    "pressure-drop-desk": dict(_PRESSURE_DROP, grid=GridSpec(100, 100, 10, 10),
                               field=FieldSpec(pattern="horizontal-stratified", layer_count=20)),
    "well": dict(_WELL, grid=GridSpec(256, 256, 4, 4)),
    "well-desk": dict(_WELL, grid=GridSpec(64, 64, 2, 2)),
}


def preset(name: str) -> RunConfig:
    try:
        return RunConfig(**PRESETS[name])
    except KeyError:
        raise DomainError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    base_name = cp.get("run", "preset", fallback="default")
    cfg = preset(base_name)
    top, subs = {}, {}
    for section in cp.sections():
        if section not in _LAYOUT:
            raise DomainError(f"unknown config section [{section}]")
        for key, text_value in cp[section].items():
            if section == "run" and key == "preset":
                continue
            if key not in _LAYOUT[section]:
                raise DomainError(f"unknown key {key!r} in [{section}]")
            attr, sub = _LAYOUT[section][key]
            if sub:
                like = getattr(getattr(cfg, attr), sub)
                subs.setdefault(attr, {})[sub] = _parse(text_value, like)
            else:
                top[attr] = _parse(text_value, getattr(cfg, attr))
    for attr, kw in subs.items():
        obj = getattr(cfg, attr)
        known = {f.name for f in fields(obj)}
        top[attr] = replace(obj, **{k: v for k, v in kw.items() if k in known})
    if "seed" in top:
        top["field"] = replace(top.get("field", cfg.field), seed=top["seed"])
    return replace(cfg, **top)


def load_config(source: Optional[str]) -> RunConfig:
    """Config from a file path, a preset name or ``None`` (defaults)."""
    if source is None:
        return preset("default")
    if source in PRESETS:
        return preset(source)
    path = Path(source)
    if not path.exists():
        raise DomainError(f"config {source!r} is neither a file nor a preset")
    return parse_config(path.read_text())
