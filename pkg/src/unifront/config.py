"""Run configuration: dotted-key text files, flag overrides, presets.

A config file holds ``section.key = value`` lines ('#' starts a comment);
values are parsed as JSON scalars where possible and kept as strings
otherwise.  Command-line ``--set key=value`` flags override file values,
which override the defaults below.  The resolved mapping is echoed into
every artifact a command writes.
"""
from __future__ import annotations

import json
from pathlib import Path

from .aux_model import AuxConfig
from .inference import DecodeOptions
from .main_model import MainConfig
from .training import BucketingParams, OptimParams, Schedule


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, object] = {
    "seed": 0,
    "preset": "desk",  # "desk" | "full" model widths
    "data.n_pos": None,  # preset default: desk 8, full 99
    "data.embed_dim": None,  # preset default: desk 32, full 300
    "aux.variant": "dcnn",
    "aux.tasks": "cws,pos",
    "aux.cws_head": "crf",
    "aux.pos_head": "softmax",
    "aux.dropout": 0.1,
    "schedule.start_step": 20000,
    "schedule.decay_steps": 50000,
    "bucketing.n_buckets": 13,
    "bucketing.upper_bound": 90,
    "bucketing.batch_size": 32,
    "optim.lr": 1e-3,
    "optim.clip_norm": 1.0,
    "optim.smoothing": 0.1,
    "train.steps": 200,
    "train.aux_steps": 200,
    "train.use_aux": True,
    "train.freeze_aux": False,
    "train.log_every": 50,
    "decode.mode": "sar",
    "decode.stop_threshold": 0.5,
    "decode.apply_postnet": True,
}

# width fields applied on top of the preset when present as main.<field>
_MAIN_FIELDS = set(MainConfig.desk().to_dict())

_AUX_DESK = {
    "dcnn_filters": 32,
    "te_lstm_units": 32,
    "te_heads": 4,
    "te_max_len": 90,
}


def parse_value(raw: str) -> object:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config_file(path: str | Path) -> dict[str, object]:
    values: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            values[key.strip()] = parse_value(raw)
    return values


class RunConfig:
    """Resolved dotted-key mapping with typed accessors."""

    def __init__(self, values: dict[str, object]):
        self.values = dict(DEFAULTS)
        unknown = [
            k for k in values if k not in DEFAULTS and not self._is_open_key(k)
        ]
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        self.values.update(values)

    @staticmethod
    def _is_open_key(key: str) -> bool:
        if key.startswith("paths."):
            return True
        if key.startswith("main.") and key.split(".", 1)[1] in _MAIN_FIELDS:
            return True
        if key.startswith("aux.") and key.split(".", 1)[1] in AuxConfig().to_dict():
            return True
        if key.startswith("decode.") and key.split(".", 1)[1] in DecodeOptions().to_dict():
            return True
        return False

    def path(self, name: str, flag_value: str | None = None) -> str | None:
        """Resolve a path: explicit flag wins over a ``paths.<name>`` entry."""
        if flag_value is not None:
            return flag_value
        value = self.values.get(f"paths.{name}")
        return None if value is None else str(value)

    @classmethod
    def from_sources(
        cls,
        config_path: str | Path | None = None,
        overrides: dict[str, object] | None = None,
    ) -> "RunConfig":
        values: dict[str, object] = {}
        if config_path is not None:
            values.update(load_config_file(config_path))
        if overrides:
            values.update(overrides)
        return cls(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def _section(self, prefix: str) -> dict[str, object]:
        plen = len(prefix) + 1
        return {
            k[plen:]: v for k, v in self.values.items() if k.startswith(prefix + ".")
        }

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def is_full_preset(self) -> bool:
        preset = self.values["preset"]
        if preset not in ("desk", "full"):
            raise ConfigError(f"unknown preset {preset!r}")
        return preset == "full"

    def n_pos(self) -> int:
        value = self.values["data.n_pos"]
        if value is None:
            return 99 if self.is_full_preset else 8
        return int(value)

    def embed_dim(self) -> int:
        value = self.values["data.embed_dim"]
        if value is None:
            return 300 if self.is_full_preset else 32
        return int(value)

    def echo(self) -> dict[str, object]:
        """Full resolved mapping, JSON-serializable, for artifact metadata."""
        out = {k: self.values[k] for k in sorted(self.values)}
        out["data.n_pos"] = self.n_pos()
        out["data.embed_dim"] = self.embed_dim()
        return out

    def aux_config(self) -> AuxConfig:
        raw = self._section("aux")
        if not self.is_full_preset:
            for key, val in _AUX_DESK.items():
                raw.setdefault(key, val)
        tasks = raw.get("tasks", "cws,pos")
        if isinstance(tasks, str):
            raw["tasks"] = tuple(t.strip() for t in tasks.split(",") if t.strip())
        known = AuxConfig().to_dict()
        return AuxConfig.from_dict({k: v for k, v in raw.items() if k in known})

    def main_config(self, aux_dense_width: int = 0) -> MainConfig:
        cfg = MainConfig() if self.is_full_preset else MainConfig.desk()
        raw = cfg.to_dict()
        raw.update(self._section("main"))
        raw["embed_dim"] = self.embed_dim()
        raw["aux_dense_width"] = aux_dense_width
        raw["positional_max_len"] = int(self.values["bucketing.upper_bound"])
        return MainConfig.from_dict(raw)

    def schedule(self) -> Schedule:
        return Schedule(
            start_step=int(self.values["schedule.start_step"]),
            decay_steps=int(self.values["schedule.decay_steps"]),
        )

    def bucketing(self) -> BucketingParams:
        return BucketingParams(
            n_buckets=int(self.values["bucketing.n_buckets"]),
            upper_bound=int(self.values["bucketing.upper_bound"]),
            batch_size=int(self.values["bucketing.batch_size"]),
        )

    def optim(self) -> OptimParams:
        return OptimParams(
            lr=float(self.values["optim.lr"]),
            clip_norm=float(self.values["optim.clip_norm"]),
            smoothing=float(self.values["optim.smoothing"]),
        )

    def decode_options(self, mode: str | None = None) -> DecodeOptions:
        raw = self._section("decode")
        if mode is not None:
            raw["mode"] = mode
        known = DecodeOptions().to_dict()
        return DecodeOptions(**{k: v for k, v in raw.items() if k in known})
