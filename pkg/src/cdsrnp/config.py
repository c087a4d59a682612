"""Flat ``key=value`` run configuration shared by every CLI verb.

Precedence is built-in defaults, then a config file, then ``--set`` overrides.
Unknown keys are rejected wherever they appear.
"""
from dataclasses import fields

from .data import SynthConfig
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    # data
    "data": "",
    "k_u": "",  # empty: keep the natural overlap ratio
    "min_user": 10,
    "min_item": 5,
    "split_ratios": "0.8,0.1,0.1",
    # synthetic world
    "users": 2000,
    "items_a": 200,
    "items_b": 200,
    "overlap_frac": 0.5,
    "latent_dim": 2,
    "min_len": 10,
    "max_len": 20,
    "sharpness": 6.0,
    # model
    "D": 32,
    "T": 15,
    "mlp_hidden": 0,
    "heads": 1,
    "epsilon_mode": "sample",
    "variant": "full",
    "embed_std": 0.01,
    # training
    "learning_rate": 1e-3,
    "lambda_reg": 1e-5,
    "reg_norm": "squared",
    "epochs": 20,
    "episodes_per_epoch": 0,
    "n_support": 10,
    "n_query": 20,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "val_negatives": 199,
    "validate": True,
    # evaluation
    "checkpoint": "",
    "n_negatives": 999,
    "eval_seeds": "0,1,2,3,4",
    "eval_split": "test",
    # ablation
    "variants": "one_embedding,no_adaptive,all_user_support",
    "ablate_seeds": "0",
    # gradient audit
    "audit_T": 5,
    "audit_D": 8,
    "audit_support": 4,
    "audit_query": 4,
    "audit_step": 1e-5,
}

_SYNTH_KEYS = [f.name for f in fields(SynthConfig)]
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return type(default)(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(default).__name__})") from None
    return raw


def parse_assignment(text):
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, _, value = text.partition("=")
    key = key.strip()
    return key, _coerce(key, value)


def read_config_file(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                key, value = parse_assignment(line)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
            out[key] = value
    return out


def resolve(config_path=None, overrides=(), seed=None):
    values = dict(DEFAULTS)
    if config_path:
        values.update(read_config_file(config_path))
    for item in overrides:
        key, value = parse_assignment(item)
        values[key] = value
    if seed is not None:
        values["seed"] = int(seed)
    return values


def write_config(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            v = values[key]
            fh.write(f"{key}={str(v).lower() if isinstance(v, bool) else v}\n")


def int_list(text):
    return [int(s) for s in str(text).split(",") if s.strip()]


def k_u_value(values):
    raw = values["k_u"]
    if raw in ("", None):
        return None
    k = float(raw)
    if not 0.0 <= k < 1.0:
        raise ConfigError(f"k_u must lie in [0, 1), got {k}")
    return k


def split_ratios(values):
    ratios = tuple(float(s) for s in str(values["split_ratios"]).split(","))
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split_ratios must be three non-negative numbers summing to 1, got {values['split_ratios']}")
    return ratios


def synth_config(values):
    cfg = SynthConfig(**{k: values[k] for k in _SYNTH_KEYS})
    cfg.validate()
    return cfg


def model_config(values, vocab=None, variant=None):
    return ModelConfig(
        D=values["D"], T=values["T"], mlp_hidden=values["mlp_hidden"], heads=values["heads"],
        epsilon_mode=values["epsilon_mode"], variant=variant or values["variant"],
        n_items_a=vocab.size("A") if vocab else 0, n_items_b=vocab.size("B") if vocab else 0,
        embed_std=values["embed_std"],
    )


def train_config(values, seed=None):
    return TrainConfig(
        learning_rate=values["learning_rate"], lambda_reg=values["lambda_reg"], reg_norm=values["reg_norm"],
        epochs=values["epochs"], episodes_per_epoch=values["episodes_per_epoch"],
        n_support=values["n_support"], n_query=values["n_query"],
        seed=values["seed"] if seed is None else seed,
        adam_beta1=values["adam_beta1"], adam_beta2=values["adam_beta2"], adam_eps=values["adam_eps"],
        val_negatives=values["val_negatives"], validate=values["validate"],
    )
