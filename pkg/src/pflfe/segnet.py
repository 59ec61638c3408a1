"""Encoder / decoder / projector networks and the shared-vs-personal split."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

SEGMENTS = ("encoder", "decoder", "projector")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    image_side: int = 32
    encoder_widths: tuple[int, ...] = (16, 32)
    decoder_widths: tuple[int, ...] = (32, 16)
    num_classes: int = 2
    projector_hidden: int = 32
    projector_out: int = 16
    skip_connections: bool = False
    # encoder input is (x - input_mean) / input_std
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(self.decoder_widths))
        self.validate()

    def validate(self) -> None:
        if not self.encoder_widths:
            raise ConfigError("encoder_widths must be non-empty")
        if len(self.decoder_widths) != len(self.encoder_widths):
            raise ConfigError("decoder_widths must have the same length as encoder_widths")
        if self.image_side % (2 ** len(self.encoder_widths)):
            raise ConfigError(
                f"image_side {self.image_side} not divisible by 2^{len(self.encoder_widths)}"
            )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if min(self.encoder_widths + self.decoder_widths) < 1 or self.input_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.projector_hidden < 1 or self.projector_out < 1:
            raise ConfigError("projector widths must be positive")
        if not self.input_std > 0:
            raise ConfigError("input_std must be positive")

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    @property
    def feature_side(self) -> int:
        return self.image_side // 2 ** self.depth

    @property
    def decoder_layer_count(self) -> int:
        return 2 * self.depth + 1


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    segment: str


class ParameterSet:
    """Ordered, named tensors tagged encoder / decoder / projector."""

    def __init__(self, entries: list[ParamEntry], config: ModelConfig | None = None):
        self.entries = list(entries)
        self.config = config
        self._index = {e.name: e for e in self.entries}
        if len(self._index) != len(self.entries):
            raise ValueError("duplicate parameter names")

    def __getitem__(self, name: str) -> Tensor:
        return self._index[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self) -> Iterator[str]:
        return (e.name for e in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(e.name, e.tensor) for e in self.entries]

    def segment_of(self, name: str) -> str:
        return self._index[name].segment

    def names(self, *segments: str) -> list[str]:
        if not segments:
            return [e.name for e in self.entries]
        return [e.name for e in self.entries if e.segment in segments]

    def subset(self, names) -> "ParameterSet":
        """View sharing tensors with this set, in this set's order."""
        wanted = set(names)
        missing = wanted - set(self._index)
        if missing:
            raise KeyError(f"unknown parameters: {sorted(missing)}")
        return ParameterSet([e for e in self.entries if e.name in wanted], self.config)

    def copy(self, names=None) -> "ParameterSet":
        src = self.entries if names is None else self.subset(names).entries
        return ParameterSet(
            [ParamEntry(e.name, Tensor(e.tensor.data), e.segment) for e in src], self.config
        )

    def assign_from(self, other: "ParameterSet", names=None) -> None:
        for name in (other if names is None else names):
            dst, src = self[name], other[name]
            if dst.shape != src.shape:
                raise ShapeError(f"{name}: {dst.shape} vs {src.shape}")
            dst.data[...] = src.data

    def num_elements(self, names=None) -> int:
        names = self if names is None else names
        return int(sum(self[n].size for n in names))

    def to_bytes(self, names=None) -> bytes:
        names = list(self) if names is None else names
        return b"".join(self[n].data.tobytes() for n in names)

    def digest(self, names=None) -> str:
        return hashlib.sha256(self.to_bytes(names)).hexdigest()

    def layers(self, segment: str) -> list[str]:
        """Layer prefixes (name minus trailing ``.weight``/``.bias``) in order."""
        seen: list[str] = []
        for e in self.entries:
            if e.segment == segment:
                prefix = e.name.rsplit(".", 1)[0]
                if prefix not in seen:
                    seen.append(prefix)
        return seen

    def set_requires_grad(self, names, flag: bool = True) -> None:
        for n in names:
            self[n].requires_grad = flag

    def zero_grad(self) -> None:
        for e in self.entries:
            e.tensor.grad = None


def _layer_specs(cfg: ModelConfig) -> list[tuple[str, str, tuple[int, ...], int]]:
    """(prefix, segment, weight shape, fan_in) for every layer, in order."""
    specs = []
    c = cfg.input_channels
    for k, w in enumerate(cfg.encoder_widths):
        specs.append((f"enc.{k}.conv", "encoder", (w, c, 3, 3), c * 9))
        specs.append((f"enc.{k}.down", "encoder", (w, w, 3, 3), w * 9))
        c = w
    for k, d in enumerate(cfg.decoder_widths):
        specs.append((f"dec.{k}.up", "decoder", (c, d, 2, 2), c))
        skip = cfg.encoder_widths[cfg.depth - 1 - k] if cfg.skip_connections else 0
        specs.append((f"dec.{k}.conv", "decoder", (d, d + skip, 3, 3), (d + skip) * 9))
        c = d
    specs.append(("dec.head", "decoder", (cfg.num_classes, c, 1, 1), c))
    last = cfg.encoder_widths[-1]
    specs.append(("proj.fc1", "projector", (cfg.projector_hidden, last), last))
    specs.append(("proj.fc2", "projector", (cfg.projector_out, cfg.projector_hidden), cfg.projector_hidden))
    return specs


def build_model(config: ModelConfig, seed: int) -> ParameterSet:
    """He-uniform weights ``U(-s, s)``, ``s = sqrt(6 / fan_in)``; zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    entries = []
    for prefix, segment, shape, fan_in in _layer_specs(config):
        bound = np.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=shape)
        bias_len = shape[1] if prefix.startswith("dec.") and prefix.endswith(".up") else shape[0]
        entries.append(ParamEntry(f"{prefix}.weight", Tensor(weight, requires_grad=True), segment))
        entries.append(ParamEntry(f"{prefix}.bias", Tensor(np.zeros(bias_len), requires_grad=True), segment))
    return ParameterSet(entries, config)


def _batched(params: ParameterSet, image) -> tuple[Tensor, bool]:
    cfg = params.config
    x = ag.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = ag.reshape(x, (1,) + x.shape)
    expected = (cfg.input_channels, cfg.image_side, cfg.image_side)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"image shape {tuple(image.shape)} does not match model input {expected}")
    return x, single


def encode(params: ParameterSet, x: Tensor) -> tuple[Tensor, list[Tensor]]:
    """Encoder on a batch ``(N,C,H,W)``; returns features and per-stage skips."""
    cfg = params.config
    x = ag.as_tensor(x)
    if cfg.input_mean != 0.0 or cfg.input_std != 1.0:
        x = ag.mul(ag.sub(x, cfg.input_mean), 1.0 / cfg.input_std)
    skips = []
    for k in range(params.config.depth):
        x = ag.relu(ag.conv2d(x, params[f"enc.{k}.conv.weight"], params[f"enc.{k}.conv.bias"], padding=1))
        skips.append(x)
        x = ag.relu(ag.conv2d(x, params[f"enc.{k}.down.weight"], params[f"enc.{k}.down.bias"], stride=2, padding=1))
    return x, skips


def decode(params: ParameterSet, features: Tensor, skips: list[Tensor]) -> Tensor:
    cfg = params.config
    x = features
    for k in range(cfg.depth):
        x = ag.relu(ag.conv_transpose2d(x, params[f"dec.{k}.up.weight"], params[f"dec.{k}.up.bias"], stride=2))
        if cfg.skip_connections:
            x = ag.concat([x, skips[cfg.depth - 1 - k]], axis=1)
        x = ag.relu(ag.conv2d(x, params[f"dec.{k}.conv.weight"], params[f"dec.{k}.conv.bias"], padding=1))
    logits = ag.conv2d(x, params["dec.head.weight"], params["dec.head.bias"])
    return ag.softmax(logits, axis=1)


def project(params: ParameterSet, features: Tensor) -> Tensor:
    pooled = ag.global_avg_pool(features)
    hidden = ag.relu(ag.linear(pooled, params["proj.fc1.weight"], params["proj.fc1.bias"]))
    return ag.linear(hidden, params["proj.fc2.weight"], params["proj.fc2.bias"])


def forward_segment(params: ParameterSet, image) -> Tensor:
    """Per-pixel class probabilities; ``(C,H,W)`` in gives ``(K,H,W)`` out."""
    x, single = _batched(params, image)
    features, skips = encode(params, x)
    probs = decode(params, features, skips)
    if single:
        probs = ag.reshape(probs, probs.shape[1:])
    return probs


def forward_project(params: ParameterSet, image) -> Tensor:
    """Embedding of pooled encoder features through the projector MLP."""
    x, single = _batched(params, image)
    features, _ = encode(params, x)
    emb = project(params, features)
    if single:
        emb = ag.reshape(emb, (emb.shape[1],))
    return emb


@dataclass(frozen=True)
class PartitionBoundary:
    """``all_decoder`` or ``last_k_layers`` with ``k`` personalized decoder layers.

    ``last_k_layers(0)`` personalizes nothing, i.e. the whole encoder+decoder
    is shared (the FedAvg arrangement).
    """

    mode: str = "all_decoder"
    k: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("all_decoder", "last_k_layers"):
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.mode == "last_k_layers" and (self.k is None or self.k < 0):
            raise ConfigError("last_k_layers requires k >= 0")

    @classmethod
    def all_decoder(cls) -> "PartitionBoundary":
        return cls("all_decoder")

    @classmethod
    def last_k_layers(cls, k: int) -> "PartitionBoundary":
        return cls("last_k_layers", k)

    @classmethod
    def parse(cls, text: str) -> "PartitionBoundary":
        text = text.strip()
        if text == "all_decoder":
            return cls.all_decoder()
        if text == "full":
            return cls.last_k_layers(0)
        if text.startswith("last_"):
            return cls.last_k_layers(int(text[len("last_"):]))
        raise ConfigError(f"cannot parse partition boundary {text!r}")

    def label(self) -> str:
        return "all_decoder" if self.mode == "all_decoder" else f"last_{self.k}"


@dataclass
class Partition:
    shared: ParameterSet
    personal: ParameterSet
    local_only: list[str] = field(default_factory=list)


def partition(params: ParameterSet, boundary: PartitionBoundary) -> Partition:
    """Split encoder+decoder into shared and personal views.

    The projector is never shared; its names are reported in ``local_only``.
    """
    decoder_layers = params.layers("decoder")
    if boundary.mode == "all_decoder":
        personal_layers = set(decoder_layers)
    else:
        if boundary.k > len(decoder_layers):
            raise ConfigError(f"k={boundary.k} exceeds {len(decoder_layers)} decoder layers")
        personal_layers = set(decoder_layers[len(decoder_layers) - boundary.k:])
    personal, shared = [], []
    for name in params.names("encoder", "decoder"):
        (personal if name.rsplit(".", 1)[0] in personal_layers else shared).append(name)
    return Partition(params.subset(shared), params.subset(personal), params.names("projector"))
