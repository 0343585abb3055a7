"""Config schema and experiment assembly shared by the CLI and the sweep."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .backbone import Backbone, BackboneConfig
from .dataio import SyntheticTaskSpec, generate_dataset, load_dataset
from .prompts import KINDS, CouplerConfig, init_prompts
from .sweep import default_search_space
from .tensor import ConfigError
from .training import LossConfig, TrainRunConfig, evaluate, train

DEFAULT_CONFIG = {
    "seed": 0,
    "strategy": "vpt",
    "prompt_length": 4,
    "prompt_depth": 2,
    "init_mode": "gaussian",
    "backbone": {
        "text_width": 32,
        "vision_width": 32,
        "joint_width": 32,
        "text_layers": 4,
        "vision_layers": 4,
        "decoder_layers": 2,
        "patch_size": 8,
        "image_size": 32,
        "max_text_len": 16,
        "text_heads": 4,
        "vision_heads": 4,
        "use_upsampler": True,
    },
    "coupler": {
        "unified_dim": 32,
        "use_lora": False,
        "intermediate_dim": 32,
        "attn_heads": 4,
        "attn_dropout": 0.0,
        "attn_ff_dim": 64,
        "layernorm_first": True,
    },
    "train": {
        "steps": 200,
        "micro_batch": 4,
        "grad_accum": 2,
        "learning_rate": 1e-3,
        "weight_decay": 1e-4,
        "eval_every": 50,
        "augment": False,
        "smooth": 1.0,
        "lambda_dice": 1.0,
        "lambda_ce": 0.2,
    },
    "data": {
        "n_classes": 2,
        "image_size": 32,
        "train": 64,
        "val": 16,
        "test": 16,
        "seed": 7,
        "align": 8,
        "path": "",        # load a saved fixture instead of generating
    },
    "sweep": {
        "n_trials": 20,
        "steps": 40,
        "depth_max": 3,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def load_config(path=None, overrides=None) -> dict:
    cfg = default_config()
    if path is not None:
        user = json.loads(Path(path).read_text())
        _merge(cfg, user, prefix="")
    for key, raw in overrides or []:
        apply_override(cfg, key, raw)
    if cfg["strategy"] not in KINDS:
        raise ConfigError(f"unknown strategy {cfg['strategy']!r}")
    if cfg["backbone"]["image_size"] != cfg["data"]["image_size"]:
        raise ConfigError("backbone.image_size must equal data.image_size")
    return cfg


def _merge(cfg: dict, user: dict, prefix: str) -> None:
    for key, value in user.items():
        full = f"{prefix}{key}"
        if key not in cfg:
            raise ConfigError(f"unknown config key {full!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {full!r} expects an object")
            _merge(cfg[key], value, prefix=f"{full}.")
        else:
            cfg[key] = _coerce(full, cfg[key], value)


def _coerce(key: str, default, value):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"config key {key!r} expects an integer, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"config key {key!r} expects a number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"config key {key!r} expects a string, got {value!r}")
    return value


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Apply one ``a.b.c=value`` CLI override, type-checked against the schema."""
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[leaf] = _coerce(dotted, node[leaf], value)


# -- assembly ----------------------------------------------------------------


def build_backbone(cfg: dict, use_upsampler=None) -> Backbone:
    b = dict(cfg["backbone"])
    if use_upsampler is not None:
        b["use_upsampler"] = use_upsampler
    return Backbone(BackboneConfig(**b), seed=cfg["seed"])


def build_coupler(cfg: dict, strategy: str, trial: dict | None = None) -> CouplerConfig:
    c = dict(cfg["coupler"])
    trial = trial or {}
    if strategy == "maple":
        c["unified_dim"] = cfg["backbone"]["text_width"]
    elif strategy == "shared-separate" and "shared_dim" in trial:
        c["unified_dim"] = int(trial["shared_dim"])
    for key in ("intermediate_dim", "attn_heads", "attn_ff_dim"):
        if key in trial:
            c[key] = int(trial[key])
    if "use_lora" in trial:
        c["use_lora"] = bool(trial["use_lora"])
    if "attn_dropout" in trial:
        c["attn_dropout"] = float(trial["attn_dropout"])
    if "layernorm_first" in trial:
        c["layernorm_first"] = bool(trial["layernorm_first"])
    return CouplerConfig(**c)


def build_state(cfg: dict, backbone: Backbone, trial: dict | None = None,
                seed: int | None = None):
    strategy = cfg["strategy"]
    trial = trial or {}
    depth = int(trial.get("prompt_depth", cfg["prompt_depth"]))
    if strategy == "coop":
        depth = 1
    return init_prompts(
        strategy,
        B=cfg["prompt_length"],
        J=depth,
        backbone=backbone,
        coupler=build_coupler(cfg, strategy, trial),
        init_mode=cfg["init_mode"],
        seed=cfg["seed"] if seed is None else seed,
    )


def build_run_cfg(cfg: dict, trial: dict | None = None,
                  seed: int | None = None) -> TrainRunConfig:
    t = cfg["train"]
    trial = trial or {}
    return TrainRunConfig(
        steps=t["steps"],
        micro_batch=t["micro_batch"],
        grad_accum=t["grad_accum"],
        learning_rate=float(trial.get("learning_rate", t["learning_rate"])),
        weight_decay=float(trial.get("weight_decay", t["weight_decay"])),
        seed=cfg["seed"] if seed is None else seed,
        eval_every=t["eval_every"],
        augment=t["augment"],
        loss=LossConfig(lambda_dice=t["lambda_dice"], lambda_ce=t["lambda_ce"],
                        smooth=t["smooth"]),
    )


def get_dataset(cfg: dict) -> dict:
    d = cfg["data"]
    if d["path"]:
        return load_dataset(d["path"])
    spec = SyntheticTaskSpec(
        n_classes=d["n_classes"],
        image_size=d["image_size"],
        samples_per_split={"train": d["train"], "val": d["val"], "test": d["test"]},
        seed=d["seed"],
        align=d["align"],
    )
    return generate_dataset(spec)


def run_training(cfg: dict, out_dir=None, dataset=None, trial: dict | None = None,
                 seed: int | None = None):
    """One full experiment: build, train, evaluate.  Returns
    (artifacts, test_dice, model, state)."""
    dataset = dataset if dataset is not None else get_dataset(cfg)
    model = build_backbone(cfg)
    state = build_state(cfg, model, trial=trial, seed=seed)
    run_cfg = build_run_cfg(cfg, trial=trial, seed=seed)
    artifacts = train(model, state, dataset, run_cfg, out_dir=out_dir)
    test_dice = evaluate(model, state, dataset.get("test", []))
    return artifacts, test_dice, model, state


def make_objective(cfg: dict, dataset: dict):
    """Adapt sweep trial configs to full training runs.  The sweep's training
    budget (sweep.steps) replaces the standalone budget."""
    sweep_cfg = copy.deepcopy(cfg)
    sweep_cfg["train"]["steps"] = cfg["sweep"]["steps"]

    def objective(trial: dict, seed: int):
        artifacts, test_dice, _, _ = run_training(
            sweep_cfg, dataset=dataset, trial=trial, seed=seed
        )
        return artifacts.final_val_dice, test_dice

    return objective


def sweep_space(cfg: dict):
    return default_search_space(cfg["sweep"]["depth_max"])
