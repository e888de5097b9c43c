"""Run configuration: one nested mapping from a YAML/JSON file plus ``--set`` overrides.

Keys are addressed with dots (``data.t_c``).  Every key except the
dataset thresholds has a default; the thresholds are mandatory.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .dataset import DatasetConfig
from .errors import ConfigError
from .evalkit import OracleSettings
from .losses import LossConfig
from .model import ModelConfig
from .trainer import TrainConfig

MANDATORY = ("data.t_c", "data.t_r")

DEFAULTS: dict[str, Any] = {
    "oracle": {
        "seed": 0,
        "len_min": 10,
        "len_max": 11,
        "noise_sd": 0.6,
        "n_motifs": 2,
        "motif_len": 3,
        "motif_bonus": 1.0,
        "composition_sd": 0.5,
        "shared_fraction": 0.8,
        "position_sd": 0.15,
        "motif_rate": 0.3,
        "n_targets": 3,
        "n_per_target": 2000,
    },
    "data": {"n_pairs": 10, "k_context": 5, "val_fraction": 0.05, "seed": 0},
    "model": {"d_model": 64, "n_layers": 2, "n_heads": 4, "d_ff": 256, "max_len": 128, "seed": 0},
    "pretrain": {
        "corpus_size": 2500,
        "concentration": None,
        "chain": 4,
        "lr": 1e-3,
        "epochs": 2,
        "batch_size": 64,
        "grad_accum": 1,
        "eval_every": 100,
        "val_fraction": 0.1,
        "seed": 0,
    },
    "train": {"lr": 1e-3, "epochs": 10, "batch_size": 16, "grad_accum": 1, "eval_every": 50, "seed": 0},
    "loss": {"variant": "kto", "beta": 0.1, "kto_lambda_w": 1.0, "kto_lambda_u": 1.0},
    "search": {"mode": "exhaustive", "max_subs": 2, "top_m": 8, "topk": 3, "k_subs": 2},
}

# sections whose seed follows the global --seed flag
SEEDED = ("oracle", "data", "model", "pretrain", "train")


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def set_key(cfg: dict, dotted: str, value) -> None:
    node = cfg
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {p} is not a section")
    node[leaf] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return key, value


def build_config(path=None, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then the global seed."""
    cfg = _merge(DEFAULTS, load_file(path)) if path else copy.deepcopy(DEFAULTS)
    for item in overrides:
        set_key(cfg, *parse_override(item))
    if seed is not None:
        for section in SEEDED:
            cfg[section]["seed"] = seed
    return cfg


def get(cfg: Mapping, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            raise ConfigError(f"missing config key: {dotted}")
        node = node[part]
    if node is None and dotted in MANDATORY:
        raise ConfigError(f"missing config key: {dotted}")
    return node


def _typed(cfg, dotted, kind):
    value = get(cfg, dotted)
    try:
        if kind is int and (isinstance(value, bool) or float(value) != int(value)):
            raise ValueError
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{dotted}: expected {kind.__name__}, got {value!r}") from exc


def oracle_settings(cfg) -> OracleSettings:
    f = lambda k, t=float: _typed(cfg, f"oracle.{k}", t)
    try:
        return OracleSettings(
            seed=f("seed", int), len_min=f("len_min", int), len_max=f("len_max", int), noise_sd=f("noise_sd"),
            n_motifs=f("n_motifs", int), motif_len=f("motif_len", int), motif_bonus=f("motif_bonus"),
            composition_sd=f("composition_sd"), shared_fraction=f("shared_fraction"),
            position_sd=f("position_sd"), motif_rate=f("motif_rate"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dataset_config(cfg) -> DatasetConfig:
    for key in MANDATORY:
        get(cfg, key)
    return DatasetConfig(
        t_c=_typed(cfg, "data.t_c", float),
        t_r=_typed(cfg, "data.t_r", float),
        n=_typed(cfg, "data.n_pairs", int),
        k=_typed(cfg, "data.k_context", int),
        val_fraction=_typed(cfg, "data.val_fraction", float),
        seed=_typed(cfg, "data.seed", int),
    )


def model_config(cfg) -> ModelConfig:
    f = lambda k: _typed(cfg, f"model.{k}", int)
    mc = ModelConfig(d_model=f("d_model"), n_layers=f("n_layers"), n_heads=f("n_heads"), d_ff=f("d_ff"),
                     max_len=f("max_len"), seed=f("seed"))
    return mc


def loss_config(cfg) -> LossConfig:
    return LossConfig(
        variant=str(get(cfg, "loss.variant")),
        beta=_typed(cfg, "loss.beta", float),
        kto_lambda_w=_typed(cfg, "loss.kto_lambda_w", float),
        kto_lambda_u=_typed(cfg, "loss.kto_lambda_u", float),
    )


def train_config(cfg, phase: str) -> TrainConfig:
    section = "pretrain" if phase == "pretrain" else "train"
    f = lambda k, t=int: _typed(cfg, f"{section}.{k}", t)
    extra = {"val_fraction": f("val_fraction", float)} if phase == "pretrain" else {"loss": loss_config(cfg)}
    return TrainConfig(
        phase=phase, learning_rate=f("lr", float), batch_size=f("batch_size"), grad_accum=f("grad_accum"),
        epochs=f("epochs"), eval_every=f("eval_every"), seed=f("seed"), **extra,
    )


def dump(cfg: Mapping) -> str:
    return yaml.safe_dump(dict(cfg), sort_keys=True)
