"""Sectioned key=value run configuration with a fixed schema."""

from __future__ import annotations

import configparser
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _floats(v):
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).replace(",", " ").split()]


def _ints(v):
    if isinstance(v, (list, tuple)):
        return [int(x) for x in v]
    return [int(x) for x in str(v).replace(",", " ").split()]


def _names(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _opt_str(v):
    s = str(v).strip()
    return s or None


# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (int, 1), "threads": (int, 0)},
    "channel": {"file": (_opt_str, None), "taps": (_floats, [1.0, 0.4, 0.2, 0.1]),
                "pre_cursors": (int, 0), "modulation": (str, "pam4")},
    "sweep": {"snr": (_floats, [14.0, 16.0, 18.0]), "symbols": (int, 1_000_000),
              "roster": (_names, ["ffe", "ffe+dfe", "fb", "neuraleq"])},
    "ffe": {"taps": (int, 8), "unbiased": (_bool, True)},
    "dfe": {"ff_taps": (int, 8), "fb_taps": (int, 3), "unbiased": (_bool, True)},
    "fb": {"state_cap": (int, 2 ** 20), "block": (int, 2048)},
    "neuraleq": {"T": (int, 12), "D": (int, 4), "N": (int, 32), "checkpoint": (_opt_str, None)},
    "mlp": {"hidden": (_ints, [216, 376])},
    "train": {"batch_size": (int, 8192), "learning_rate": (float, 1e-3),
              "beta1": (float, 0.9), "beta2": (float, 0.999), "epsilon": (float, 1e-8),
              "train_symbols": (int, 20_000_000), "valid_symbols": (int, 2_000_000),
              "test_symbols": (int, 10_000_000), "snr_db": (_opt_str, None),
              "valid_every": (int, 100), "stop_after": (_opt_str, None)},
    "prune": {"target_sparsity": (float, 0.5), "finetune_batches": (int, 500),
              "fraction": (float, 0.1), "schedule": (str, "geometric"),
              "eval_windows": (_opt_str, None)},
    "robustness": {"p_values": (_floats, [0.0, 0.01, 0.02]), "trials": (int, 20),
                   "symbols": (int, 200_000), "snr_db": (float, 17.0)},
    "gridsearch": {"candidates": (_ints, [8, 16, 32]), "snr_db": (float, 11.0)},
}


class RunConfig:
    """Resolved configuration; ``cfg["train"]["batch_size"]`` style access."""

    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def set(self, dotted: str, raw) -> None:
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key=value")
        section, key = dotted.split(".", 1)
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        parser, _ = SCHEMA[section][key]
        try:
            self.values[section][key] = parser(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls.defaults()
        if path is not None:
            cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
            cp.optionxform = str
            try:
                text = path.read_text() if hasattr(path, "read_text") else Path(path).read_text()
                cp.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(str(exc)) from None
            for section in cp.sections():
                for key, raw in cp.items(section):
                    cfg.set(f"{section}.{key}", raw)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v.strip())
        return cfg

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for k, v in keys.items():
                if isinstance(v, (list, tuple)):
                    v = ", ".join(repr(float(x)) if isinstance(x, float) else str(x) for x in v)
                elif v is None:
                    v = ""
                elif isinstance(v, float):
                    v = repr(float(v))
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {s: dict(k) for s, k in self.values.items()}
