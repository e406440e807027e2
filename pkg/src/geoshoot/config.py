"""Flat key=value run configuration.

UTF-8 text, one `key = value` per line, `#` comments.  Keys are namespaced
(kernel.a, patch.size, train.lr, ...); unknown keys are rejected.  Command
line flags override file values, and every run writes a resolved snapshot
next to its outputs so it can be reproduced from the snapshot alone.
"""

from __future__ import annotations

__all__ = ["DEFAULTS", "load_config", "resolve", "write_snapshot", "write_run_meta"]

DEFAULTS = {
    "kernel.a": 0.01,
    "kernel.b": 0.01,
    "kernel.c": 0.001,
    "sigma": 0.2,
    "shoot.steps": 10,
    "shoot.integrator": "rk4",
    "patch.size": 15,
    "patch.stride": 14,
    "patch.prune_threshold": 0.01,
    "train.lr": 0.0001,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.eps": 1e-8,
    "train.epochs": 10,
    "train.batch_size": 32,
    "train.dropout": 0.2,
    "train.weight_decay": 0.0,
    "opt.max_iters": 200,
    "opt.grad_tol": 1e-6,
    "opt.ls_shrink": 0.5,
    "opt.ls_c1": 0.0001,
    "opt.step0": 1.0,
    "mc.samples": 50,
    "synth.n_pairs": 200,
    "synth.momentum_scale": 2.0,
    "synth.smoothness": 8.0,
    "synth.template": "shapes",
    "synth.max_disp": 6.0,
    "seed": 7,
    "workers": 1,
}

_STR_KEYS = {"shoot.integrator", "synth.template"}
_INT_KEYS = {"shoot.steps", "patch.size", "patch.stride", "train.epochs",
             "train.batch_size", "opt.max_iters", "mc.samples",
             "synth.n_pairs", "seed", "workers"}


def _coerce(key: str, raw: str):
    if key in _STR_KEYS:
        return raw
    if key in _INT_KEYS:
        return int(raw)
    return float(raw)


def load_config(path) -> dict:
    """Parse a config file; raises on unknown keys or malformed lines."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, raw)
    return out


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> dict:
    """DEFAULTS <- config file <- explicit overrides."""
    cfg = dict(DEFAULTS)
    for layer in (file_cfg or {}), (overrides or {}):
        for key, val in layer.items():
            if key not in DEFAULTS:
                raise ValueError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    return cfg


def write_snapshot(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def write_run_meta(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in entries.items():
            fh.write(f"{key} {val}\n")
