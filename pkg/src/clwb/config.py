"""Experiment configuration: INI-style sections, strict key checking.

Unknown sections or keys are errors so a typo in a hyperparameter sweep
fails loudly instead of silently running defaults. The raw text is kept
verbatim for report and checkpoint audit trails. `#` and `;` start comments.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config"]


class ConfigError(ValueError):
    """Bad config file; the message names the offending section.key."""


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _int_list(raw: str) -> list[int]:
    return [int(v) for v in raw.replace(",", " ").split()]


def _float_list(raw: str) -> list[float]:
    return [float(v) for v in raw.replace(",", " ").split()]


@dataclass
class DataCfg:
    source: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    dim: int = 4
    separation: float = 8.0
    per_class: int = 50
    test_per_class: int = 0  # 0: per_class // 4


@dataclass
class TasksCfg:
    count: int = 2
    classes_per_task: int = 2
    shuffle_classes: bool = False
    # ablation: exclude rotation-ambiguous classes before splitting;
    # remaining classes are re-numbered densely
    drop_classes: list[int] = field(default_factory=list)


@dataclass
class BackboneCfg:
    kind: str = "hat"
    hidden: list[int] = field(default_factory=lambda: [100, 100])
    s_max: float = 400.0
    lambdas: list[float] = field(default_factory=lambda: [1.0, 0.75])
    sparsity: float = 50.0
    epochs: int = 20
    lr: float = 0.1
    batch: int = 16


@dataclass
class LossCfg:
    kind: str = "ce"
    contrastive_epochs: int = 0  # 0: same as backbone epochs
    head_epochs: int = 0
    head_lr: float = 0.0
    temperature: float = 0.5
    flip_prob: float = 0.5
    noise_sigma: float = 0.05


@dataclass
class OodCfg:
    scorer: str = "msp"
    odin_tau: float = 5.0
    odin_eps: float = 0.0014
    odin_grid: bool = False
    validation_fraction: float = 0.1


@dataclass
class PredictCfg:
    route: str = "concat-argmax"
    tp: str = "sigmoid-maxlogit"
    nu: float = 0.1
    tau: float = 5.0


@dataclass
class CalibrateCfg:
    buffer: int = 200
    iters: int = 160
    lr: float = 0.01
    batch: int = 15


@dataclass
class ExperimentConfig:
    seed: int
    out: str = "runs"
    data: DataCfg = field(default_factory=DataCfg)
    tasks: TasksCfg = field(default_factory=TasksCfg)
    backbone: BackboneCfg = field(default_factory=BackboneCfg)
    loss: LossCfg = field(default_factory=LossCfg)
    ood: OodCfg = field(default_factory=OodCfg)
    predict: PredictCfg = field(default_factory=PredictCfg)
    calibrate: CalibrateCfg = field(default_factory=CalibrateCfg)
    text: str = ""  # verbatim source for audit


_ENUMS = {
    ("data", "source"): ("synthetic", "idx"),
    ("backbone", "kind"): ("hat", "sup"),
    ("loss", "kind"): ("ce", "rotation-ce", "contrastive"),
    ("ood", "scorer"): ("msp", "maxlogit", "odin", "rotation-ensemble"),
    ("predict", "route"): ("concat-argmax", "compose", "calibrated"),
    ("predict", "tp"): ("sigmoid-maxlogit", "maxsoftmax-temp", "scorer"),
}

_PARSERS = {int: int, float: float, str: str, bool: _bool,
             list[int]: _int_list, list[float]: _float_list}

_SECTIONS = {
    "data": DataCfg, "tasks": TasksCfg, "backbone": BackboneCfg,
    "loss": LossCfg, "ood": OodCfg, "predict": PredictCfg,
    "calibrate": CalibrateCfg,
}


def _fill(section: str, cfg_obj, parser: configparser.ConfigParser) -> None:
    known = {f.name: f.type for f in fields(type(cfg_obj))}
    if not parser.has_section(section):
        return
    for key, raw in parser.items(section):
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
        ftype = known[key]
        if isinstance(ftype, str):  # dataclass stores annotations as strings
            ftype = {"int": int, "float": float, "str": str, "bool": bool,
                     "list[int]": list[int], "list[float]": list[float]}[ftype]
        try:
            value = _PARSERS[ftype](raw)
        except (ValueError, KeyError) as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}") from e
        allowed = _ENUMS.get((section, key))
        if allowed and value not in allowed:
            raise ConfigError(
                f"{section}.{key} must be one of {allowed}, got {value!r}")
        setattr(cfg_obj, key, value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"unparseable config: {e}") from e

    known_sections = set(_SECTIONS) | {"experiment"}
    for s in parser.sections():
        if s not in known_sections:
            raise ConfigError(f"unknown section [{s}]")

    if not parser.has_section("experiment") or \
            not parser.has_option("experiment", "seed"):
        raise ConfigError("experiment.seed is mandatory")
    for key, _ in parser.items("experiment"):
        if key not in ("seed", "out"):
            raise ConfigError(f"unknown key experiment.{key}")
    try:
        seed = parser.getint("experiment", "seed")
    except ValueError as e:
        raise ConfigError(f"bad value for experiment.seed: {e}") from e
    cfg = ExperimentConfig(seed=seed, text=text)
    if parser.has_option("experiment", "out"):
        cfg.out = parser.get("experiment", "out")

    for name, _cls in _SECTIONS.items():
        _fill(name, getattr(cfg, name), parser)

    if cfg.data.source == "idx":
        import os
        for key in ("train_images", "train_labels", "test_images",
                    "test_labels"):
            path = getattr(cfg.data, key)
            if not path:
                raise ConfigError(f"data.{key} required for idx source")
            if not os.path.exists(path):
                raise ConfigError(f"data.{key}: no such file {path!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
