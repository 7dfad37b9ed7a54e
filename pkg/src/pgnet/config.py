"""Flat ``key = value`` run configuration validated against a typed registry.

Keys are dotted (``encoder.patch_size``, ``train.lr``, ...). Blank lines and
``#`` comments are ignored; an unknown key, a duplicate key, a malformed line or
an out-of-range value raises :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

from .data import CUE_MODES, SyntheticSpec
from .encoder import EncoderConfig
from .errors import ConfigError
from .training import TrainConfig


@dataclass(frozen=True)
class Key:
    name: str
    kind: type
    default: Any
    help: str
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None

    def parse(self, text: str) -> Any:
        text = text.strip()
        try:
            if self.kind is bool:
                low = text.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = low in ("true", "1", "yes")
            elif self.kind is int:
                value = int(text, 0)
            elif self.kind is float:
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ConfigError(f"{self.name}: cannot parse {text!r} as {self.kind.__name__}") from None
        self.check(value)
        return value

    def check(self, value) -> None:
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.name}: {value!r} not one of {', '.join(map(str, self.choices))}")
        if self.lo is not None and value < self.lo:
            raise ConfigError(f"{self.name}: {value} below minimum {self.lo}")
        if self.hi is not None and value > self.hi:
            raise ConfigError(f"{self.name}: {value} above maximum {self.hi}")

    def describe(self) -> str:
        if self.choices:
            rng = "{" + "|".join(map(str, self.choices)) + "}"
        elif self.lo is not None or self.hi is not None:
            rng = f"[{'' if self.lo is None else self.lo}, {'' if self.hi is None else self.hi}]"
        else:
            rng = ""
        return f"  {self.name:<24} {self.kind.__name__:<6} default={self.default!r:<18} {rng}  {self.help}"


_enc = EncoderConfig()
_tc = TrainConfig()
_ds = SyntheticSpec()

REGISTRY: dict[str, Key] = {k.name: k for k in [
    Key("encoder.image_size", int, _enc.image_h, "square input side in pixels", 4, 4096),
    Key("encoder.patch_size", int, _enc.patch_size, "patch side s", 1, 512),
    Key("encoder.embed_dim", int, _enc.embed_dim, "token width C", 1, 8192),
    Key("encoder.depth", int, _enc.depth, "transformer blocks", 1, 64),
    Key("encoder.heads", int, _enc.heads, "attention heads", 1, 64),
    Key("encoder.mlp_ratio", float, _enc.mlp_ratio, "MLP hidden width / C", 0.25, 16.0),
    Key("encoder.r_max", int, _enc.r_max, "appendable prompt rows", 0, 64),
    Key("encoder.cls_first", bool, _enc.cls_first, "conventional [CLS, prompts, patches] order"),
    Key("encoder.seed", int, 0, "seed of the stand-in frozen weights", 0, 2**63 - 1),
    Key("encoder.checkpoint", str, "", "optional frozen-weight checkpoint path"),
    Key("pgn.kind", str, "pgn", "prompt source", choices=("pgn", "iip", "direct", "none")),
    Key("pgn.prompts", int, 8, "prompts per image K", 0, 4096),
    Key("pgn.library", int, 64, "token library rows N", 1, 65536),
    Key("pgn.backbone", str, "mlp_center_crop", "generator backbone",
        choices=("mlp_center_crop", "resnet10", "resnet18")),
    Key("pgn.head", str, "linear", "generator head", choices=("linear", "mlp")),
    Key("pgn.input_resolution", int, 32, "generator input side (bilinear resize)", 8, 1024),
    Key("train.epochs", int, _tc.epochs, "training epochs", 1, 100000),
    Key("train.warmup", int, _tc.warmup, "linear warmup epochs", 0, 100000),
    Key("train.lr", float, _tc.lr, "base learning rate", 0.0, 100.0),
    Key("train.momentum", float, _tc.momentum, "heavy-ball momentum", 0.0, 0.9999),
    Key("train.batch_size", int, _tc.batch_size, "minibatch size", 1, 65536),
    Key("train.eval_every", int, _tc.eval_every, "evaluate every n epochs (0 = only at the end)", 0, 100000),
    Key("train.classifier", str, "fixed", "classifier rows", choices=("fixed", "trainable")),
    Key("data.source", str, "synthetic", "dataset", choices=("synthetic", "cifar10", "cifar100")),
    Key("data.path", str, "", "CIFAR binary directory"),
    Key("data.num_classes", int, _ds.num_classes, "classes per domain", 1, 1000),
    Key("data.num_domains", int, _ds.num_domains, "synthetic domains", 1, 64),
    Key("data.train_size", int, _ds.train_size, "synthetic train images", 1, 10**7),
    Key("data.test_size", int, _ds.test_size, "synthetic test images", 1, 10**7),
    Key("data.cue_mode", str, _ds.cue_mode, "synthetic class cue", choices=CUE_MODES),
    Key("data.seed", int, _ds.seed, "synthetic generator seed", 0, 2**63 - 1),
    Key("serve.endpoint", str, "127.0.0.1:7341", "server address host:port"),
    Key("serve.mode", str, "f32", "client pixel encoding (u8 is lossy)", choices=("f32", "u8")),
    Key("serve.crc", bool, False, "request a CRC32 trailer on responses"),
]}

SECTIONS = ("encoder", "pgn", "train", "data", "serve")


class Config:
    """Validated values with registry defaults for anything not set."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: key.default for k, key in REGISTRY.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, name: str, value) -> None:
        key = REGISTRY.get(name)
        if key is None:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(value, str) and key.kind is not str:
            value = key.parse(value)
        else:
            key.check(value)
        self.values[name] = value

    def __getitem__(self, name: str):
        if name not in self.values:
            raise ConfigError(f"unknown config key {name!r}")
        return self.values[name]

    def section(self, prefix: str) -> dict[str, Any]:
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def dumps(self) -> str:
        return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in self.values.items())

    # -- typed views ------------------------------------------------------
    def encoder_config(self, num_classes: int | None = None) -> EncoderConfig:
        e = self.section("encoder")
        try:
            return EncoderConfig(image_h=e["image_size"], image_w=e["image_size"], patch_size=e["patch_size"],
                                 embed_dim=e["embed_dim"], depth=e["depth"], heads=e["heads"],
                                 mlp_ratio=e["mlp_ratio"], r_max=e["r_max"],
                                 num_classes=num_classes or self["data.num_classes"], cls_first=e["cls_first"])
        except ValueError as exc:
            raise ConfigError(f"encoder.*: {exc}") from exc

    def train_config(self, seed: int) -> TrainConfig:
        t = self.section("train")
        if t["warmup"] >= t["epochs"]:
            raise ConfigError("train.warmup: must be smaller than train.epochs")
        return TrainConfig(epochs=t["epochs"], warmup=t["warmup"], lr=t["lr"], momentum=t["momentum"],
                           batch_size=t["batch_size"], seed=seed, eval_every=t["eval_every"])

    def synthetic_spec(self) -> SyntheticSpec:
        d = self.section("data")
        return SyntheticSpec(num_classes=d["num_classes"], num_domains=d["num_domains"],
                             train_size=d["train_size"], test_size=d["test_size"],
                             image_size=self["encoder.image_size"], seed=d["seed"], cue_mode=d["cue_mode"])


def parse_config(text: str, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config()
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, sep, value = line.partition("=")
        name = name.strip()
        if not sep or not name:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        if name in seen:
            raise ConfigError(f"line {lineno}: duplicate key {name!r}")
        seen.add(name)
        try:
            cfg.set(name, value.strip())
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    for name, value in (overrides or {}).items():
        cfg.set(name, value)
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> Config:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def registry_help() -> str:
    lines = ["configuration keys (key = value, '#' starts a comment):"]
    for section in SECTIONS:
        lines += [key.describe() for name, key in REGISTRY.items() if name.startswith(section + ".")]
    return "\n".join(lines)


__all__ = ["Key", "REGISTRY", "Config", "parse_config", "load_config", "registry_help"]
