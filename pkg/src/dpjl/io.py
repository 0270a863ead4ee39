"""Text artifacts: curve CSVs, run configs with dotted overrides, and run manifests."""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import re
from pathlib import Path

import numpy as np

from dpjl import __version__
from dpjl.tradeoff import TradeoffCurve

__all__ = [
    "CurveTable",
    "export_curve_csv",
    "read_curve_csv",
    "format_spec_comment",
    "RunManifest",
    "ConfigError",
    "load_config",
    "apply_overrides",
    "fmt_float",
]

TRADEOFF_COLUMNS = ("alpha", "beta")
EPS_DELTA_COLUMNS = ("epsilon", "delta")
_SPEC_KEYS = ("sigma", "r", "p", "T", "delta_eps")


class ConfigError(ValueError):
    """Invalid or unreadable run configuration (a usage error)."""


def fmt_float(v: float) -> str:
    """17 significant digits: enough for every float64 to round-trip."""
    return format(float(v), ".17g")


def format_spec_comment(sigma, r, p, steps, delta_eps, **extra) -> str:
    """``# spec sigma=.. r=.. p=.. T=.. delta_eps=..`` plus optional ``key=value`` settings."""
    r_text = "exact" if r is None else str(int(r))
    parts = [f"sigma={fmt_float(sigma)}", f"r={r_text}", f"p={fmt_float(p)}", f"T={int(steps)}",
             f"delta_eps={fmt_float(delta_eps)}"]
    parts += [f"{k}={fmt_float(v) if isinstance(v, float) else v}" for k, v in extra.items()]
    return "# spec " + " ".join(parts)


@dataclasses.dataclass(frozen=True, eq=False)
class CurveTable:
    columns: tuple[str, str]
    x: np.ndarray
    y: np.ndarray
    spec: dict


def export_curve_csv(curve, path, spec_comment: str) -> Path:
    """Write a TradeoffCurve (``alpha,beta``) or an ``(epsilons, deltas)`` pair
    (``epsilon,delta``) after a leading ``# spec ...`` comment line."""
    if not spec_comment.startswith("# spec "):
        raise ValueError("spec comment must start with '# spec '")
    if isinstance(curve, TradeoffCurve):
        columns, x, y = TRADEOFF_COLUMNS, curve.alphas, curve.betas
    else:
        columns = EPS_DELTA_COLUMNS
        x, y = (np.asarray(c, dtype=np.float64) for c in curve)
        if x.shape != y.shape or x.ndim != 1:
            raise ValueError("epsilon and delta columns must be matching 1-d arrays")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(spec_comment.rstrip("\n") + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for a, b in zip(x.tolist(), y.tolist()):
            w.writerow([fmt_float(a), fmt_float(b)])
    return path


def _parse_spec(line: str) -> dict:
    body = line[len("# spec "):].strip()
    out = {}
    for token in body.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed spec token {token!r}")
        out[key] = value
    missing = [k for k in _SPEC_KEYS if k not in out]
    if missing:
        raise ValueError(f"spec comment lacks {missing}")
    return out


def read_curve_csv(path) -> CurveTable:
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith("# spec "):
            raise ValueError(f"{path}: first line must be the '# spec ...' comment")
        spec = _parse_spec(first)
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) not in (TRADEOFF_COLUMNS, EPS_DELTA_COLUMNS):
        raise ValueError(f"{path}: header must be alpha,beta or epsilon,delta")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]]).reshape(-1, 2)
    return CurveTable(tuple(rows[0]), data[:, 0].copy(), data[:, 1].copy(), spec)


# ---------------------------------------------------------------- configs


def load_config(path) -> dict:
    """A run config from JSON; a run manifest is accepted and its ``config`` used."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    if "format" in cfg and cfg.get("format") == RunManifest.FORMAT:
        cfg = cfg["config"]
    return cfg


_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON, else as strings."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not _KEY.match(key):
            raise ConfigError(f"override {item!r} is not of the form dotted.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not an object")
            node = child
        node[parts[-1]] = value
    return cfg


@dataclasses.dataclass
class RunManifest:
    """Everything needed to rerun a command bit-exactly."""

    FORMAT = "dpjl-run-manifest-v1"

    command: str
    config: dict
    seed: int
    outputs: dict
    accountant: dict
    code_version: str = __version__
    results: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": self.FORMAT, **dataclasses.asdict(self)}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        if d.pop("format", None) != cls.FORMAT:
            raise ValueError(f"{path}: not a run manifest")
        return cls(**d)
