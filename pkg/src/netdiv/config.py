"""Flat key=value pipeline configuration.

Every key can be overridden by a CLI flag of the same name; the config
round-trips through its text serialization losslessly and its hash goes
into the run manifest.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, fields, replace
from typing import Any

from .errors import InputError


@dataclass
class PipelineConfig:
    # input files; messages may be a comma-separated list
    messages: str = ""
    activity: str = ""
    areas: str = ""
    out_dir: str = "out"
    # message schema
    dimensions: str = "knowledge,support"
    message_id_col: str = "message_id"
    sender_col: str = "sender"
    receiver_col: str = "receiver"
    timestamp_col: str = "timestamp"
    score_col_template: str = "{dim}"
    # thresholds and graphs
    alpha: float = 0.99
    min_weight: int = 4
    # geo-referencing
    n_min: int = 3
    purity: float = 0.95
    # penetration filter
    sd_mult: float = 1.0
    min_users: int = 1000
    restrict_to_included: bool = True
    # diversity
    diversity_direction: str = "out"  # out | all
    include_k1: bool = True
    area_count_mode: str = "included"  # included | all
    # geographic span
    null_runs: int = 50
    span_n_bins: int = 5
    bin_universe: str = "unthresholded"  # unthresholded | thresholded
    ci_method: str = "spread"  # spread | sem | bootstrap
    ratio_aggregation: str = "per_run"  # per_run | mean_first
    delta_variants: str = "tie,message"
    # regression
    normalize: bool = True
    regression_specs: str = ""
    step_aic: bool = False
    # random baseline
    baseline_runs: int = 50
    baseline_fraction: float = 0.01
    baseline_include_density: bool = False
    # temporal window (UTC seconds, half-open)
    window_start: float | None = None
    window_end: float | None = None
    # reproducibility
    seed: int = 0

    def dims(self) -> tuple[str, ...]:
        return tuple(d.strip() for d in self.dimensions.split(",") if d.strip())

    def variants(self) -> tuple[str, ...]:
        return tuple(v.strip() for v in self.delta_variants.split(",") if v.strip())

    def window(self) -> tuple[float | None, float | None] | None:
        if self.window_start is None and self.window_end is None:
            return None
        return (self.window_start, self.window_end)

    def models(self) -> list[tuple[str, list[str]]]:
        """Model specs as (name, feature tokens); tokens are 'density',
        '(social|spatial)_full', or '(social|spatial)_<dimension>'."""
        spec = self.regression_specs.strip() or self.default_regression_specs()
        out = []
        for model in spec.split(";"):
            model = model.strip()
            if not model:
                continue
            tokens = [t.strip() for t in model.split("+") if t.strip()]
            if not tokens:
                raise InputError(f"empty regression model in spec: {spec!r}")
            out.append((model, tokens))
        if not out:
            raise InputError("no regression models configured")
        return out

    def default_regression_specs(self) -> str:
        dims = self.dims()
        models = ["density", "density+spatial_full"]
        if len(dims) >= 2:
            models.append(f"density+spatial_{dims[0]}+spatial_{dims[1]}")
        elif dims:
            models.append(f"density+spatial_{dims[0]}")
        return ";".join(models)

    def validate(self) -> None:
        if not self.dims():
            raise InputError("at least one dimension is required")
        if not 0.0 < self.alpha < 1.0:
            raise InputError("alpha must be in (0, 1)")
        if self.min_weight < 1:
            raise InputError("min_weight must be >= 1")
        if self.n_min < 1:
            raise InputError("n_min must be >= 1")
        if not 0.5 < self.purity <= 1.0:
            raise InputError("purity must be in (0.5, 1]")
        if self.sd_mult <= 0:
            raise InputError("sd_mult must be > 0")
        if self.min_users < 0:
            raise InputError("min_users must be >= 0")
        if self.null_runs < 2:
            raise InputError("null_runs must be >= 2")
        if self.span_n_bins < 2:
            raise InputError("span_n_bins must be >= 2")
        if not 0.0 < self.baseline_fraction <= 1.0:
            raise InputError("baseline_fraction must be in (0, 1]")
        if self.baseline_runs < 1:
            raise InputError("baseline_runs must be >= 1")
        for name, allowed in (
            ("diversity_direction", ("out", "all")),
            ("area_count_mode", ("included", "all")),
            ("bin_universe", ("unthresholded", "thresholded")),
            ("ci_method", ("spread", "sem", "bootstrap")),
            ("ratio_aggregation", ("per_run", "mean_first")),
        ):
            if getattr(self, name) not in allowed:
                raise InputError(f"{name} must be one of {allowed}")
        for v in self.variants():
            if v not in ("tie", "message"):
                raise InputError("delta_variants entries must be tie or message")
        if (
            self.window_start is not None
            and self.window_end is not None
            and self.window_end <= self.window_start
        ):
            raise InputError("window_end must be after window_start")
        self.models()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _coerce(name: str, raw: str) -> Any:
    ftype = _FIELD_TYPES.get(name)
    if ftype is None:
        raise InputError(f"unknown config key: {name}")
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
        if ftype == "float | None":
            return None if raw == "" else float(raw)
    except ValueError:
        raise InputError(f"config key {name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    updates = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"config line {lineno}: expected key=value")
        key, _, raw = line.partition("=")
        updates[key.strip()] = _coerce(key.strip(), raw)
    return replace(cfg, **updates)


def load_config(path: str, base: PipelineConfig | None = None) -> PipelineConfig:
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)
