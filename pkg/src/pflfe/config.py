"""Run configuration: TOML sections [model] [federation] [protocol] [data] [seeds] [output]."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data_synth import DEFAULT_AUG_A, DEFAULT_AUG_B, AugmentationSpec, ClientDataConfig
from .federation import RoundPlan, TrainConfig
from .segnet import ModelConfig, PartitionBoundary

PRESETS = ("bench5",)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    clients: list[ClientDataConfig]
    plan: RoundPlan
    train: TrainConfig
    seeds: list[int]
    threads: int = 1
    out_dir: str = "out"
    checkpoints: bool = False
    features_per_class: int = 200
    adapt_epochs: int = 3
    adapt_rounds: int | None = None
    source: str = ""
    raw: dict[str, Any] = field(default_factory=dict, repr=False)

    def with_overrides(
        self,
        protocol: str | None = None,
        rounds: int | None = None,
        seed: int | None = None,
        out_dir: str | None = None,
        threads: int | None = None,
    ) -> "RunConfig":
        cfg = replace(self)
        plan = cfg.plan
        if protocol is not None:
            plan = replace(plan, protocol=protocol)
        if rounds is not None:
            plan = replace(plan, total_rounds=rounds)
            cfg.adapt_rounds = rounds
        cfg.plan = plan
        if seed is not None:
            cfg.seeds = [seed]
        if out_dir is not None:
            cfg.out_dir = out_dir
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be >= 1")
            cfg.threads = threads
        return cfg


def preset_path(name: str) -> Path:
    return Path(str(resources.files("pflfe") / "presets" / f"{name}.toml"))


def resolve_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    if p.exists():
        return p
    if str(path) in PRESETS:
        return preset_path(str(path))
    raise ConfigError(f"config file not found: {path}")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(value)


def _pick(table: dict, section: str, allowed: set[str]) -> dict:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return table


def parse_config(raw: dict, source: str = "<memory>") -> RunConfig:
    try:
        return _parse(raw, source)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def _parse(raw: dict, source: str) -> RunConfig:
    model_tbl = _pick(_section(raw, "model"), "model", {
        "input_channels", "image_side", "encoder_widths", "decoder_widths", "num_classes",
        "projector_hidden", "projector_out", "skip_connections", "input_mean", "input_std",
    })
    model = ModelConfig(**model_tbl)

    fed_tbl = _pick(_section(raw, "federation"), "federation", {"threads", "weighting", "eval_point"})
    proto_tbl = _pick(_section(raw, "protocol"), "protocol", {
        "name", "rounds", "lfe_epochs", "sup_epochs", "boundary", "finetune_epochs",
        "learning_rate", "lfe_learning_rate", "momentum", "batch_size", "ema_decay",
        "adapt_epochs", "adapt_rounds",
    })
    data_tbl = _pick(_section(raw, "data"), "data", {
        "preset", "clients", "num_train", "num_test", "augment_a", "augment_b",
    })
    if "seeds" not in raw:
        raise ConfigError(f"{source}: [seeds] section is required (no implicit seeding)")
    seeds_tbl = _pick(_section(raw, "seeds"), "seeds", {"values"})
    out_tbl = _pick(_section(raw, "output"), "output", {"dir", "checkpoints", "features_per_class"})

    if "preset" in data_tbl:
        preset = data_tbl.pop("preset")
        if preset not in PRESETS:
            raise ConfigError(f"unknown data preset {preset!r}")
        with open(preset_path(preset), "rb") as fh:
            base = _section(tomllib.load(fh), "data")
        base.pop("preset", None)
        base.update(data_tbl)
        data_tbl = base
    client_tbls = data_tbl.get("clients")
    if not client_tbls:
        raise ConfigError(f"{source}: [data] defines no clients")
    shared_keys = {k: data_tbl[k] for k in ("num_train", "num_test") if k in data_tbl}
    clients = []
    for i, tbl in enumerate(client_tbls):
        tbl = {**shared_keys, **dict(tbl)}
        tbl.setdefault("client_id", i)
        tbl.setdefault("image_side", model.image_side)
        tbl.setdefault("num_classes", model.num_classes)
        clients.append(ClientDataConfig(**tbl))

    aug_a = AugmentationSpec.from_config(data_tbl["augment_a"]) if "augment_a" in data_tbl else DEFAULT_AUG_A
    aug_b = AugmentationSpec.from_config(data_tbl["augment_b"]) if "augment_b" in data_tbl else DEFAULT_AUG_B

    plan = RoundPlan(
        protocol=proto_tbl.get("name", "pflfe"),
        lfe_epochs=int(proto_tbl.get("lfe_epochs", 1)),
        sup_epochs=int(proto_tbl.get("sup_epochs", 1)),
        total_rounds=int(proto_tbl.get("rounds", 30)),
        boundary=PartitionBoundary.parse(proto_tbl.get("boundary", "all_decoder")),
        finetune_epochs=proto_tbl.get("finetune_epochs"),
    )
    train = TrainConfig(
        learning_rate=float(proto_tbl.get("learning_rate", 0.01)),
        momentum=float(proto_tbl.get("momentum", 0.9)),
        batch_size=int(proto_tbl.get("batch_size", 8)),
        ema_decay=float(proto_tbl.get("ema_decay", 0.99)),
        lfe_learning_rate=proto_tbl.get("lfe_learning_rate"),
        aug_a=aug_a,
        aug_b=aug_b,
        weighting=fed_tbl.get("weighting", "equal"),
        eval_point=fed_tbl.get("eval_point", "after_aggregation"),
    )
    seeds = seeds_tbl.get("values")
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"{source}: [seeds] values must be a non-empty list of integers")
    threads = int(fed_tbl.get("threads", 1))
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    return RunConfig(
        model=model,
        clients=clients,
        plan=plan,
        train=train,
        seeds=list(seeds),
        threads=threads,
        out_dir=str(out_tbl.get("dir", "out")),
        checkpoints=bool(out_tbl.get("checkpoints", False)),
        features_per_class=int(out_tbl.get("features_per_class", 200)),
        adapt_epochs=int(proto_tbl.get("adapt_epochs", 3)),
        adapt_rounds=proto_tbl.get("adapt_rounds"),
        source=source,
        raw=raw,
    )


def load_config(path: str | os.PathLike) -> RunConfig:
    resolved = resolve_path(path)
    try:
        with open(resolved, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {resolved}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{resolved}: {exc}") from exc
    return parse_config(raw, str(resolved))
