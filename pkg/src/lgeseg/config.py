"""Pipeline configuration and its flat ``key=value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .affinereg import AffineConfig
from .contour import ForceConfig
from .ffdreg import FFDConfig, PatternIntensityParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    affine: AffineConfig = field(default_factory=AffineConfig)
    ffd: FFDConfig = field(default_factory=FFDConfig)
    forces: ForceConfig = field(default_factory=ForceConfig)
    histogram_bins: int = 256
    vertices: int = 80
    output_dir: str = "out"

    def __post_init__(self):
        if self.histogram_bins < 2:
            raise ConfigError("histogram_bins must be >= 2")
        if self.vertices < 8:
            raise ConfigError("vertices must be >= 8")


# key -> (section, attribute, parser); section None addresses PipelineConfig itself
_KEYS = {
    "eps_scale": ("affine", "eps_scale", float),
    "eps_translate": ("affine", "eps_translate", float),
    "affine_max_iters": ("affine", "max_iters", int),
    "affine_step_tolerance": ("affine", "step_tolerance", float),
    "ffd_spacing_x": ("ffd", "spacing_x", float),
    "ffd_spacing_y": ("ffd", "spacing_y", float),
    "ffd_lambda": ("ffd", "lambda_", float),
    "ffd_max_iters": ("ffd", "max_iters", int),
    "ffd_step_size": ("ffd", "step_size", float),
    "ffd_step_tolerance": ("ffd", "step_tolerance", float),
    "ffd_fd_delta": ("ffd", "fd_delta", float),
    "ffd_metric": ("ffd", "metric", str),
    "nmi_bins": ("ffd", "nmi_bins", int),
    "pi_radius": ("pi", "r", int),
    "pi_sigma": ("pi", "sigma", float),
    "gamma": ("forces", "gamma", float),
    "alpha": ("forces", "alpha", float),
    "beta": ("forces", "beta", float),
    "theta": ("forces", "theta", float),
    "band": ("forces", "band", int),
    "contour_iters": ("forces", "iters", int),
    "contour_stop_move": ("forces", "stop_move", float),
    "edge_noise_floor": ("forces", "noise_floor", float),
    "scar_step_min": ("forces", "scar_step_min", float),
    "histogram_bins": (None, "histogram_bins", int),
    "vertices": (None, "vertices", int),
    "output_dir": (None, "output_dir", str),
}


def config_keys() -> tuple[str, ...]:
    return tuple(_KEYS)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Build a config from ``key=value`` lines; unknown keys are rejected."""
    updates: dict[str, dict] = {"affine": {}, "ffd": {}, "pi": {}, "forces": {}, None: {}}
    for n, ln in enumerate(text.splitlines(), 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        key, sep, value = ln.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {n}: expected key=value, got {ln!r}")
        if key not in _KEYS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        section, attr, conv = _KEYS[key]
        try:
            updates[section][attr] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key!r}: {value!r}") from exc
    return apply_updates(base or PipelineConfig(), updates)


def apply_updates(base: PipelineConfig, updates: dict) -> PipelineConfig:
    try:
        pi = replace(base.ffd.pi_params, **updates.get("pi", {}))
        ffd = replace(base.ffd, pi_params=pi, **updates.get("ffd", {}))
        return replace(
            base,
            affine=replace(base.affine, **updates.get("affine", {})),
            ffd=ffd,
            forces=replace(base.forces, **updates.get("forces", {})),
            **updates.get(None, {}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_from_mapping(values: dict) -> PipelineConfig:
    """Same as :func:`parse_config` but from an already split mapping."""
    return parse_config("\n".join(f"{k}={v}" for k, v in values.items()))


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_config(Path(path).read_text())


def dump_config(cfg: PipelineConfig) -> str:
    lines = []
    for key, (section, attr, _) in _KEYS.items():
        if section is None:
            obj = cfg
        elif section == "pi":
            obj = cfg.ffd.pi_params
        else:
            obj = getattr(cfg, section)
        lines.append(f"{key}={getattr(obj, attr)}")
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError",
    "PipelineConfig",
    "PatternIntensityParams",
    "parse_config",
    "load_config",
    "dump_config",
    "config_keys",
]
