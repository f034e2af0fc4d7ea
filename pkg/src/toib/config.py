"""Flat ``key = value`` run configuration with typed defaults and validation."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Any, Callable

from .data import GenSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


_nonneg = (lambda v: v >= 0)
_pos = (lambda v: v > 0)

KEYS: dict[str, Key] = {
    # run layout
    "name": Key(str, "default", "run name; outputs go to <run_dir>/<name>/"),
    "run_dir": Key(str, "run", "parent directory for run outputs"),
    "seed": Key(int, 0, "master seed for every random substream"),
    # model / training
    "n_users": Key(int, 2, "number of users N", lambda v: v >= 1, "n_users ≥ 1"),
    "epochs": Key(int, 100, "training epochs T", _nonneg, "epochs ≥ 0"),
    "batch_size": Key(int, 64, "mini-batch size V", lambda v: v >= 2, "batch_size ≥ 2"),
    "resamples": Key(int, 1, "channel resamples L per step", lambda v: v >= 1, "resamples ≥ 1"),
    "club_steps": Key(int, 5, "Phase-A steps M per pair", _nonneg, "club_steps ≥ 0"),
    "alpha": Key(float, 0.01, "orthogonality weight", _nonneg, "alpha ≥ 0"),
    "beta": Key(float, 0.01, "compression weight", _nonneg, "beta ≥ 0"),
    "lr": Key(float, 1e-4, "encoder/decoder learning rate", _nonneg, "lr ≥ 0"),
    "club_lr": Key(float, 1e-3, "CLUB estimator learning rate", _nonneg, "club_lr ≥ 0"),
    "latent_dim": Key(int, 16, "latent dimension d", lambda v: v >= 1, "latent_dim ≥ 1"),
    "encoder_hidden": Key(_ints, (128, 128), "encoder trunk widths", lambda v: len(v) >= 1 and min(v) >= 1,
                          "encoder_hidden non-empty, positive"),
    "decoder_hidden": Key(_ints, (128,), "decoder hidden widths", lambda v: all(x >= 1 for x in v),
                          "decoder_hidden positive"),
    "club_hidden": Key(_ints, (64,), "CLUB network hidden widths", lambda v: len(v) >= 1 and min(v) >= 1,
                       "club_hidden non-empty, positive"),
    "logvar_clamp": Key(float, 10.0, "log-variance clamp magnitude", _pos, "logvar_clamp > 0"),
    "club_mode": Key(str, "mle", "Phase-A objective: mle | vclub_ascent",
                     lambda v: v in ("mle", "vclub_ascent"), "club_mode ∈ {mle, vclub_ascent}"),
    "objective": Key(str, "toib", "toib | vib (vib builds no estimators)",
                     lambda v: v in ("toib", "vib"), "objective ∈ {toib, vib}"),
    # channel
    "channel": Key(str, "awgn", "awgn | rayleigh", lambda v: v in ("awgn", "rayleigh"),
                   "channel ∈ {awgn, rayleigh}"),
    "train_snr_db": Key(float, 5.0, "training SNR in dB (inf = noiseless)", lambda v: not math.isnan(v),
                        "train_snr_db is a number"),
    "equalize": Key(_bool, True, "divide Rayleigh output by the known gain"),
    "p_max": Key(float, 1.0, "total transmit power", _pos, "p_max > 0"),
    "power_mode": Key(str, "equal", "equal | custom", lambda v: v in ("equal", "custom"),
                      "power_mode ∈ {equal, custom}"),
    "powers": Key(_floats, (), "per-user powers when power_mode = custom", lambda v: all(x >= 0 for x in v),
                  "powers ≥ 0"),
    # data
    "num_classes": Key(int, 4, "classes K", lambda v: v >= 2, "num_classes ≥ 2"),
    "input_dim": Key(int, 8, "input dimension d_x", lambda v: v >= 1, "input_dim ≥ 1"),
    "n_train": Key(int, 2000, "training samples per user", lambda v: v >= 2, "n_train ≥ 2"),
    "n_test": Key(int, 2000, "held-out samples per user", lambda v: v >= 2, "n_test ≥ 2"),
    "c_sep": Key(float, 4.0, "class-center radius", _pos, "c_sep > 0"),
    "sigma_x": Key(float, 1.0, "within-class noise std", _pos, "sigma_x > 0"),
    "label_mode": Key(str, "shared", "shared | independent", lambda v: v in ("shared", "independent"),
                      "label_mode ∈ {shared, independent}"),
    # evaluation
    "eval_snrs": Key(_floats, (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0), "sweep SNR grid in dB"),
    "eval_snr_db": Key(float, 0.0, "SNR for eval and cross-decode"),
    "eval_channel": Key(str, "", "channel used at test time (empty = training channel)",
                        lambda v: v in ("", "awgn", "rayleigh"), "eval_channel ∈ {awgn, rayleigh}"),
    "n_eval": Key(int, 2000, "evaluation samples", lambda v: v >= 2, "n_eval ≥ 2"),
    "n_latents": Key(int, 500, "samples per user in the latent export", lambda v: v >= 1, "n_latents ≥ 1"),
    "latent_mean": Key(_bool, False, "decode from the encoder mean instead of a sample"),
}


def _coerce(key: str, raw: str):
    spec = KEYS[key]
    try:
        value = spec.parse(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{key}: constraint violated ({spec.rule}), got {raw!r}")
    return value


def read_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def parse_config(path=None, overrides: dict[str, str] | None = None, env=None) -> dict[str, Any]:
    """Resolve a config: flag overrides > file > $TOIB_SEED (seed only) > defaults."""
    env = os.environ if env is None else env
    values = {k: spec.default for k, spec in KEYS.items()}
    if env.get("TOIB_SEED"):
        values["seed"] = _coerce("seed", env["TOIB_SEED"])
    if path is not None:
        with open(path) as fh:
            for k, v in read_config_text(fh.read(), str(path)).items():
                values[k] = _coerce(k, v)
    for k, v in (overrides or {}).items():
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        values[k] = _coerce(k, v)
    if values["power_mode"] == "custom":
        if len(values["powers"]) != values["n_users"]:
            raise ConfigError("powers: need one entry per user when power_mode = custom")
        if abs(sum(values["powers"]) - values["p_max"]) > 1e-12:
            raise ConfigError("powers: must sum to p_max")
    return values


def render_config(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {_fmt_value(values[k])}\n" for k in KEYS)


def train_config(values: dict[str, Any]) -> TrainConfig:
    names = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: values[k] for k in names})


def gen_spec(values: dict[str, Any]) -> GenSpec:
    names = GenSpec.__dataclass_fields__
    return GenSpec(**{k: values[k] for k in names})
