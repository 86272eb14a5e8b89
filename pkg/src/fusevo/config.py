"""Flat runtime configuration with TOML loading and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - py310 path
    import tomli as tomllib

__all__ = ["Config", "load_config"]


@dataclass
class Config:
    # -- geometry / sampling
    z_min: float = 1e-4
    border: int = 3

    # -- pyramid
    num_levels: int = 4

    # -- features
    max_corners: int = 600
    min_shi_tomasi: float = 50.0
    fast_threshold: float = 20.0
    cell_size: int = 10
    match_threshold: int = 64
    ratio_test: float = 0.8
    search_window: float = 15.0
    corner_quota: int = 50
    pixel_quota: int = 150
    g_th: float = 1.5
    match_failure_limit: int = 5

    # -- residuals
    gamma_p: float = 9.0
    gamma_g: float = 1.5
    variance_floor: float = 1e-4

    # -- joint tracker
    max_iterations_per_level: int = 10
    lm_lambda_init: float = 1e-4
    lm_lambda_up: float = 5.0
    lm_lambda_down: float = 0.5
    convergence_eps: float = 1e-6
    outlier_energy_factor: float = 3.0
    min_track_points: int = 50

    # -- utility schedule (hard-coded constants, override only for ablation)
    utility_scale: float = 5.0
    utility_level_decay: float = 2.0
    utility_midpoint: float = 30.0
    utility_width: float = 4.0

    # -- mapper
    window_size: int = 7
    ba_iterations: int = 15
    ba_step_eps: float = 1e-6
    ba_gauge_fix_affine: bool = True
    ba_gauge_fix_depth: bool = True
    marg_epsilon: float = 1e-3
    b_min: float = 1e-4
    kf_flow_weight: float = 0.06
    kf_affine_weight: float = 0.2
    kf_drop_ratio: float = 0.6
    activation_var_ratio: float = 0.01
    depth_obs_sigma: float = 1.0
    depth_var_floor: float = 1e-8
    filter_warmup_frames: int = 10

    def apply_overrides(self, pairs: list[str]) -> "Config":
        """Apply ``key=value`` strings, coercing values to the field's type."""
        out = self
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ValueError(f"override {pair!r} is not of the form key=value")
            out = out._with(key.strip(), raw.strip())
        return out

    def _with(self, key: str, raw: str) -> "Config":
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise KeyError(f"unknown config key {key!r}")
        ftype = fields[key].type
        if ftype == "bool" or isinstance(getattr(self, key), bool):
            value: object = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(getattr(self, key), int):
            value = int(raw)
        elif isinstance(getattr(self, key), float):
            value = float(raw)
        else:
            value = raw
        return dataclasses.replace(self, **{key: value})


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> Config:
    """Config from a TOML file (flat keys, or under a ``[config]`` table)."""
    cfg = Config()
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        table = data.get("config", data)
        known = {f.name for f in dataclasses.fields(Config)}
        unknown = set(table) - known
        if unknown:
            raise KeyError(f"unknown config keys in {path}: {sorted(unknown)}")
        cfg = dataclasses.replace(cfg, **table)
    if overrides:
        cfg = cfg.apply_overrides(overrides)
    return cfg
