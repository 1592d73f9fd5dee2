"""The four yaml configuration files that tie training to deployment.

``data.yaml`` describes classes/colors/splits, ``net.yaml`` the architecture,
``train.yaml`` the optimization, and ``nodes.yaml`` the named graph nodes of a
frozen model. Key names are normative (lower_snake_case); unknown keys are
hard errors so a typo can never silently change a training run.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import yaml

from .errors import (ConfigError, ConfigParseError, MissingConfigFile,
                     UnknownKeyError)

KINDS = ("data", "net", "train", "nodes")

OPTIMIZERS = ("sgd_momentum", "adam_like")
WEIGHTING_POLICIES = ("none", "inverse_frequency", "log_inverse")

_HEX_COLOR = re.compile(r"^#[0-9a-fA-F]{6}$")


def parse_color(text: str) -> tuple[int, int, int]:
    if not isinstance(text, str) or not _HEX_COLOR.match(text):
        raise ConfigError(f"color must look like '#RRGGBB', got {text!r}", field="color")
    return tuple(int(text[i:i + 2], 16) for i in (1, 3, 5))


def format_color(rgb: tuple[int, int, int]) -> str:
    return "#{:02X}{:02X}{:02X}".format(*rgb)


class _Keys:
    """Strict mapping reader: every key must be consumed exactly once."""

    def __init__(self, mapping, context):
        if not isinstance(mapping, dict):
            raise ConfigParseError(f"{context}: expected a mapping, got {type(mapping).__name__}")
        self._m = dict(mapping)
        self._ctx = context

    def take(self, key, default=...):
        if key in self._m:
            return self._m.pop(key)
        if default is ...:
            raise ConfigError(f"{self._ctx}: missing required key '{key}'", field=key)
        return default

    def finish(self):
        if self._m:
            key = sorted(self._m)[0]
            raise UnknownKeyError(f"{self._ctx}: unknown key '{key}'", field=key)


def _require(cond, message, fieldname):
    if not cond:
        raise ConfigError(message, field=fieldname)


def _as_number(v, fieldname, ctx):
    _require(isinstance(v, (int, float)) and not isinstance(v, bool),
             f"{ctx}: '{fieldname}' must be a number, got {v!r}", fieldname)
    return float(v)


def _as_int(v, fieldname, ctx):
    _require(isinstance(v, int) and not isinstance(v, bool),
             f"{ctx}: '{fieldname}' must be an integer, got {v!r}", fieldname)
    return v


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassDef:
    id: int
    name: str
    color: tuple[int, int, int]


@dataclass(frozen=True)
class DataConfig:
    classes: tuple[ClassDef, ...]
    inference_size: tuple[int, int]  # (width, height)
    dataset_location: str
    split: tuple[float, float, float]  # train, valid, test fractions

    def __post_init__(self):
        ids = [c.id for c in self.classes]
        _require(len(ids) > 0, "data: 'classes' must not be empty", "classes")
        _require(sorted(ids) == list(range(len(ids))),
                 f"data: class ids must be dense from 0, got {sorted(ids)}", "classes")
        colors = [c.color for c in self.classes]
        _require(len(set(colors)) == len(colors), "data: class colors must be unique", "classes")
        w, h = self.inference_size
        _require(w > 0 and h > 0,
                 f"data: 'inference_size' must be positive, got {self.inference_size}",
                 "inference_size")
        _require(all(0.0 <= f <= 1.0 for f in self.split),
                 f"data: split fractions must lie in [0, 1], got {self.split}", "split")
        _require(abs(sum(self.split) - 1.0) <= 1e-9,
                 f"data: split fractions must sum to 1, got {sum(self.split)}", "split")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_by_id(self, cid: int) -> ClassDef:
        for c in self.classes:
            if c.id == cid:
                return c
        raise ConfigError(f"no class with id {cid}", field="classes")

    def color_table(self):
        return {c.color: c.id for c in self.classes}

    @staticmethod
    def from_dict(d) -> "DataConfig":
        k = _Keys(d, "data")
        raw_classes = k.take("classes")
        _require(isinstance(raw_classes, list), "data: 'classes' must be a list", "classes")
        classes = []
        for entry in raw_classes:
            ek = _Keys(entry, "data.classes")
            classes.append(ClassDef(
                id=_as_int(ek.take("id"), "id", "data.classes"),
                name=str(ek.take("name")),
                color=parse_color(ek.take("color")),
            ))
            ek.finish()
        size = k.take("inference_size")
        _require(isinstance(size, list) and len(size) == 2,
                 "data: 'inference_size' must be [width, height]", "inference_size")
        location = str(k.take("dataset_location"))
        sk = _Keys(k.take("split"), "data.split")
        split = tuple(_as_number(sk.take(name), name, "data.split")
                      for name in ("train", "valid", "test"))
        sk.finish()
        k.finish()
        return DataConfig(tuple(classes),
                          (_as_int(size[0], "inference_size", "data"),
                           _as_int(size[1], "inference_size", "data")),
                          location, split)

    def to_dict(self):
        return {
            "classes": [{"id": c.id, "name": c.name, "color": format_color(c.color)}
                        for c in self.classes],
            "inference_size": list(self.inference_size),
            "dataset_location": self.dataset_location,
            "split": {"train": self.split[0], "valid": self.split[1], "test": self.split[2]},
        }


@dataclass(frozen=True)
class NetConfig:
    architecture: str
    layers_per_stage: tuple[int, ...]
    kernels_per_layer: tuple[int, ...]
    dropout_keep: float
    bn_decay: float

    def __post_init__(self):
        _require(bool(self.architecture), "net: 'architecture' must be non-empty", "architecture")
        _require(len(self.layers_per_stage) > 0,
                 "net: 'layers_per_stage' must not be empty", "layers_per_stage")
        _require(all(n >= 0 for n in self.layers_per_stage),
                 "net: 'layers_per_stage' entries must be >= 0", "layers_per_stage")
        _require(len(self.kernels_per_layer) == len(self.layers_per_stage),
                 f"net: 'kernels_per_layer' must have one entry per stage "
                 f"({len(self.layers_per_stage)}), got {len(self.kernels_per_layer)}",
                 "kernels_per_layer")
        _require(all(n >= 1 for n in self.kernels_per_layer),
                 "net: 'kernels_per_layer' entries must be >= 1", "kernels_per_layer")
        _require(0.0 < self.dropout_keep <= 1.0,
                 f"net: 'dropout_keep' must lie in (0, 1], got {self.dropout_keep}",
                 "dropout_keep")
        _require(0.0 <= self.bn_decay < 1.0,
                 f"net: 'bn_decay' must lie in [0, 1), got {self.bn_decay}", "bn_decay")

    @staticmethod
    def from_dict(d) -> "NetConfig":
        k = _Keys(d, "net")
        cfg = NetConfig(
            architecture=str(k.take("architecture")),
            layers_per_stage=tuple(k.take("layers_per_stage")),
            kernels_per_layer=tuple(k.take("kernels_per_layer")),
            dropout_keep=_as_number(k.take("dropout_keep"), "dropout_keep", "net"),
            bn_decay=_as_number(k.take("bn_decay"), "bn_decay", "net"),
        )
        k.finish()
        return cfg

    def to_dict(self):
        return {
            "architecture": self.architecture,
            "layers_per_stage": list(self.layers_per_stage),
            "kernels_per_layer": list(self.kernels_per_layer),
            "dropout_keep": self.dropout_keep,
            "bn_decay": self.bn_decay,
        }


@dataclass(frozen=True)
class AugmentSpec:
    """Geometric/photometric augmentation ranges; every range contains the identity."""

    flip_prob: float = 0.0
    rotation_deg: float = 0.0
    shear: float = 0.0
    stretch: tuple[float, float] = (1.0, 1.0)
    gamma: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        _require(0.0 <= self.flip_prob <= 1.0,
                 f"augment: 'flip_prob' must lie in [0, 1], got {self.flip_prob}", "flip_prob")
        _require(self.rotation_deg >= 0.0,
                 f"augment: 'rotation_deg' must be >= 0, got {self.rotation_deg}",
                 "rotation_deg")
        _require(self.shear >= 0.0,
                 f"augment: 'shear' must be >= 0, got {self.shear}", "shear")
        _require(0.0 < self.stretch[0] <= 1.0 <= self.stretch[1],
                 f"augment: 'stretch' range must contain 1, got {self.stretch}", "stretch")
        _require(0.0 < self.gamma[0] <= 1.0 <= self.gamma[1],
                 f"augment: 'gamma' range must contain 1, got {self.gamma}", "gamma")

    @property
    def is_identity(self) -> bool:
        return (self.flip_prob == 0.0 and self.rotation_deg == 0.0 and self.shear == 0.0
                and self.stretch == (1.0, 1.0) and self.gamma == (1.0, 1.0))

    @staticmethod
    def from_dict(d) -> "AugmentSpec":
        k = _Keys(d, "train.augment")
        def pair(v, name):
            _require(isinstance(v, list) and len(v) == 2,
                     f"train.augment: '{name}' must be [low, high]", name)
            return (_as_number(v[0], name, "train.augment"),
                    _as_number(v[1], name, "train.augment"))
        spec = AugmentSpec(
            flip_prob=_as_number(k.take("flip_prob", 0.0), "flip_prob", "train.augment"),
            rotation_deg=_as_number(k.take("rotation_deg", 0.0), "rotation_deg", "train.augment"),
            shear=_as_number(k.take("shear", 0.0), "shear", "train.augment"),
            stretch=pair(k.take("stretch", [1.0, 1.0]), "stretch"),
            gamma=pair(k.take("gamma", [1.0, 1.0]), "gamma"),
        )
        k.finish()
        return spec

    def to_dict(self):
        return {
            "flip_prob": self.flip_prob,
            "rotation_deg": self.rotation_deg,
            "shear": self.shear,
            "stretch": list(self.stretch),
            "gamma": list(self.gamma),
        }


@dataclass(frozen=True)
class TrainConfig:
    learn_rate: float
    lr_decay: float = 1.0
    batch_size: int = 8
    num_workers: int = 1
    momentums: tuple[float, ...] = (0.9,)
    optimizer: str = "sgd_momentum"
    weighting_policy: str = "none"
    focal_gamma: float = 0.0
    cache_images: int = 4
    max_epochs: int = 10
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    save_debug_images: bool = False
    checkpoint_gradients: int | None = None

    def __post_init__(self):
        _require(self.learn_rate > 0,
                 f"train: 'learn_rate' must be positive, got {self.learn_rate}", "learn_rate")
        _require(0.0 < self.lr_decay <= 1.0,
                 f"train: 'lr_decay' must lie in (0, 1], got {self.lr_decay}", "lr_decay")
        _require(self.batch_size >= 1,
                 f"train: 'batch_size' must be >= 1, got {self.batch_size}", "batch_size")
        _require(self.num_workers >= 1,
                 f"train: 'num_workers' must be >= 1, got {self.num_workers}", "num_workers")
        _require(self.optimizer in OPTIMIZERS,
                 f"train: 'optimizer' must be one of {OPTIMIZERS}, got {self.optimizer!r}",
                 "optimizer")
        want = 2 if self.optimizer == "adam_like" else 1
        _require(len(self.momentums) == want,
                 f"train: 'momentums' must hold {want} value(s) for optimizer "
                 f"'{self.optimizer}', got {len(self.momentums)}", "momentums")
        _require(all(0.0 <= m < 1.0 for m in self.momentums),
                 f"train: 'momentums' entries must lie in [0, 1), got {self.momentums}",
                 "momentums")
        _require(self.weighting_policy in WEIGHTING_POLICIES,
                 f"train: 'weighting_policy' must be one of {WEIGHTING_POLICIES}, "
                 f"got {self.weighting_policy!r}", "weighting_policy")
        _require(self.focal_gamma >= 0.0,
                 f"train: 'focal_gamma' must be >= 0, got {self.focal_gamma}", "focal_gamma")
        _require(self.cache_images >= 1,
                 f"train: 'cache_images' must be >= 1, got {self.cache_images}", "cache_images")
        _require(self.max_epochs >= 1,
                 f"train: 'max_epochs' must be >= 1, got {self.max_epochs}", "max_epochs")
        if self.checkpoint_gradients is not None:
            _require(self.checkpoint_gradients >= 1,
                     f"train: 'checkpoint_gradients' must be >= 1, "
                     f"got {self.checkpoint_gradients}", "checkpoint_gradients")

    @staticmethod
    def from_dict(d) -> "TrainConfig":
        k = _Keys(d, "train")
        moms = k.take("momentums")
        _require(isinstance(moms, list) and len(moms) >= 1,
                 "train: 'momentums' must be a list of one or two values", "momentums")
        ckpt = k.take("checkpoint_gradients", None)
        cfg = TrainConfig(
            learn_rate=_as_number(k.take("learn_rate"), "learn_rate", "train"),
            lr_decay=_as_number(k.take("lr_decay", 1.0), "lr_decay", "train"),
            batch_size=_as_int(k.take("batch_size", 8), "batch_size", "train"),
            num_workers=_as_int(k.take("num_workers", 1), "num_workers", "train"),
            momentums=tuple(_as_number(m, "momentums", "train") for m in moms),
            optimizer=str(k.take("optimizer", "sgd_momentum")),
            weighting_policy=str(k.take("weighting_policy", "none")),
            focal_gamma=_as_number(k.take("focal_gamma", 0.0), "focal_gamma", "train"),
            cache_images=_as_int(k.take("cache_images", 4), "cache_images", "train"),
            max_epochs=_as_int(k.take("max_epochs", 10), "max_epochs", "train"),
            augment=AugmentSpec.from_dict(k.take("augment", {})),
            save_debug_images=bool(k.take("save_debug_images", False)),
            checkpoint_gradients=None if ckpt is None else _as_int(
                ckpt, "checkpoint_gradients", "train"),
        )
        k.finish()
        return cfg

    def to_dict(self):
        return {
            "learn_rate": self.learn_rate,
            "lr_decay": self.lr_decay,
            "batch_size": self.batch_size,
            "num_workers": self.num_workers,
            "momentums": list(self.momentums),
            "optimizer": self.optimizer,
            "weighting_policy": self.weighting_policy,
            "focal_gamma": self.focal_gamma,
            "cache_images": self.cache_images,
            "max_epochs": self.max_epochs,
            "augment": self.augment.to_dict(),
            "save_debug_images": self.save_debug_images,
            "checkpoint_gradients": self.checkpoint_gradients,
        }


@dataclass(frozen=True)
class NodesConfig:
    input: str
    code: str
    logits: str
    softmax: str
    argmax: str

    def __post_init__(self):
        names = (self.input, self.code, self.logits, self.softmax, self.argmax)
        _require(all(isinstance(n, str) and n for n in names),
                 "nodes: all five node names must be non-empty strings", "nodes")
        _require(len(set(names)) == 5,
                 f"nodes: the five node names must be distinct, got {names}", "nodes")

    @staticmethod
    def from_dict(d) -> "NodesConfig":
        k = _Keys(d, "nodes")
        cfg = NodesConfig(
            input=str(k.take("input")),
            code=str(k.take("code")),
            logits=str(k.take("logits")),
            softmax=str(k.take("softmax")),
            argmax=str(k.take("argmax")),
        )
        k.finish()
        return cfg

    def to_dict(self):
        return {"input": self.input, "code": self.code, "logits": self.logits,
                "softmax": self.softmax, "argmax": self.argmax}


_TYPES = {
    "data": DataConfig,
    "net": NetConfig,
    "train": TrainConfig,
    "nodes": NodesConfig,
}


def load_config(path, kind: str):
    """Load and validate one of the four config kinds from a yaml file."""
    if kind not in _TYPES:
        raise ConfigError(f"unknown config kind {kind!r}; expected one of {KINDS}", field="kind")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise MissingConfigFile(f"config file not found: {path}") from None
    try:
        doc = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        raise ConfigParseError(f"config file is empty: {path}")
    return _TYPES[kind].from_dict(doc)


def save_config(config, path):
    """Write a config back to yaml; the result re-loads to an equal config."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False, allow_unicode=True)


def randomize_hyperparams(net: NetConfig, train: TrainConfig, rng):
    """One random-search draw around a base (net, train) pair.

    Jitters the optimization knobs within sane ranges and leaves the
    architecture shape alone; every draw validates. Feed each draw to a
    separate single-worker run and keep the best validation score.
    """
    optimizer = train.optimizer
    if optimizer == "adam_like":
        momentums = (round(float(rng.uniform(0.8, 0.99)), 4),
                     round(float(rng.uniform(0.99, 0.9999)), 5))
    else:
        momentums = (round(float(rng.uniform(0.8, 0.99)), 4),)
    batch = int(train.batch_size * rng.choice([0.5, 1.0, 2.0]))
    new_train = TrainConfig(
        learn_rate=float(train.learn_rate * 10 ** rng.uniform(-0.7, 0.7)),
        lr_decay=round(float(rng.uniform(0.9, 1.0)), 4),
        batch_size=max(1, batch),
        num_workers=train.num_workers,
        momentums=momentums,
        optimizer=optimizer,
        weighting_policy=str(rng.choice(WEIGHTING_POLICIES)),
        focal_gamma=float(rng.choice([0.0, 0.5, 1.0, 2.0])),
        cache_images=train.cache_images,
        max_epochs=train.max_epochs,
        augment=train.augment,
        save_debug_images=train.save_debug_images,
        checkpoint_gradients=train.checkpoint_gradients,
    )
    new_net = NetConfig(
        architecture=net.architecture,
        layers_per_stage=net.layers_per_stage,
        kernels_per_layer=net.kernels_per_layer,
        dropout_keep=round(float(rng.uniform(0.85, 1.0)), 4),
        bn_decay=round(float(rng.uniform(0.8, 0.99)), 4),
    )
    return new_net, new_train
