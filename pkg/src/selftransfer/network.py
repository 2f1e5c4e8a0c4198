"""Dual-head network: shared trunk, classifier head, and localizer head.

The localizer is a 1x1 convolution producing one score map per class,
followed by a global max or average pool over each map and a softmax.  The
classifier is a stack of fully connected layers on the flattened trunk
output.  Both heads are trained jointly with the weighted loss
``(1 - alpha) * loss_cls + alpha * loss_loc``.

Backward passes meet at the *junction*: the output of the last ReLU in the
trunk.  Each head's error is carried to the junction separately (through any
parameter-free trunk layers between the junction and that head's branch
point), summed, and then gated by the ReLU.  The intermediate tensors are
returned as a :class:`BackpropProbe` so tests can inspect them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .layers import (
    Conv1x1,
    Conv2d,
    Dropout,
    FullyConnected,
    GlobalAvgPool,
    GlobalMaxPool,
    MaxPool,
    ReLU,
    check_one_hot,
    conv_output_size,
    log_softmax,
    relu_backward,
)
from .rng import Rng

LAYER_KINDS = ("conv", "relu", "maxpool", "fully_connected", "dropout", "conv1x1",
               "global_max_pool", "global_avg_pool", "softmax")
POOL_KINDS = ("global_max_pool", "global_avg_pool")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    channels: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv", "maxpool") and (self.kernel < 1 or self.stride < 1):
            raise ConfigError(f"{self.kind}: kernel and stride must be >= 1")
        if self.pad < 0:
            raise ConfigError(f"{self.kind}: pad must be >= 0")
        if self.kind in ("conv", "conv1x1", "fully_connected") and self.channels < 1:
            raise ConfigError(f"{self.kind}: output width must be >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")


def conv(k, s, p, c):
    return LayerSpec("conv", k, s, p, c)


def pool(k, s):
    return LayerSpec("maxpool", k, s)


def fc(h):
    return LayerSpec("fully_connected", channels=h)


RELU = LayerSpec("relu")
SOFTMAX = LayerSpec("softmax")


def dropout(rate):
    return LayerSpec("dropout", rate=rate)


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of the dual-head network.

    ``localizer_branch`` is the number of trunk layers feeding the 1x1
    convolution (``None`` means the whole trunk).  Either head may be empty,
    which gives a single-head network sharing the same trunk.  ``gate``
    selects the junction rule: ``"relu"`` gates the summed error on the
    forward activation, ``"clamp"`` applies ``max(0, delta_cls + delta_loc)``
    literally.
    """

    trunk: tuple
    classifier_head: tuple
    localizer_head: tuple
    num_classes: int
    input_size: tuple
    in_channels: int = 1
    localizer_branch: int | None = None
    gate: str = "relu"
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(self.trunk))
        object.__setattr__(self, "classifier_head", tuple(self.classifier_head))
        object.__setattr__(self, "localizer_head", tuple(self.localizer_head))
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        validate_config(self)

    @property
    def pool_kind(self) -> str | None:
        for spec in self.localizer_head:
            if spec.kind in POOL_KINDS:
                return spec.kind
        return None

    @property
    def loc_branch(self) -> int:
        return len(self.trunk) if self.localizer_branch is None else self.localizer_branch

    def without_localizer(self) -> "NetworkConfig":
        return replace(self, localizer_head=(), localizer_branch=None,
                       name=self.name + "-cls")

    def without_classifier(self) -> "NetworkConfig":
        return replace(self, classifier_head=(), name=self.name + "-loc")

    def with_pool(self, kind: str) -> "NetworkConfig":
        kind = {"max": "global_max_pool", "avg": "global_avg_pool"}.get(kind, kind)
        if kind not in POOL_KINDS:
            raise ConfigError(f"unknown global pooling {kind!r}")
        head = tuple(LayerSpec(kind) if s.kind in POOL_KINDS else s for s in self.localizer_head)
        return replace(self, localizer_head=head)


def validate_config(cfg: NetworkConfig):
    k = cfg.num_classes
    if k < 2:
        raise ConfigError("num_classes must be >= 2")
    if len(cfg.input_size) != 2 or min(cfg.input_size) < 1:
        raise ConfigError(f"bad input_size {cfg.input_size}")
    if not cfg.classifier_head and not cfg.localizer_head:
        raise ConfigError("network needs at least one head")
    if cfg.gate not in ("relu", "clamp"):
        raise ConfigError(f"unknown gate {cfg.gate!r}")
    for spec in cfg.trunk:
        if spec.kind not in ("conv", "relu", "maxpool", "dropout"):
            raise ConfigError(f"trunk layer {spec.kind!r} not allowed")
    if cfg.classifier_head:
        head = cfg.classifier_head
        if head[-1].kind != "softmax":
            raise ConfigError("classifier head must end in softmax")
        dense = [s for s in head if s.kind == "fully_connected"]
        if not dense or dense[-1].channels != k:
            raise ConfigError(f"classifier head must end in a fully_connected layer of width {k}")
        for spec in head[:-1]:
            if spec.kind not in ("fully_connected", "relu", "dropout"):
                raise ConfigError(f"classifier layer {spec.kind!r} not allowed")
    if cfg.localizer_head:
        kinds = [s.kind for s in cfg.localizer_head]
        if len(kinds) != 3 or kinds[0] != "conv1x1" or kinds[1] not in POOL_KINDS \
                or kinds[2] != "softmax":
            raise ConfigError("localizer head must be conv1x1, global pooling, softmax")
        if cfg.localizer_head[0].channels != k:
            raise ConfigError(f"localizer conv1x1 must produce {k} maps, "
                              f"got {cfg.localizer_head[0].channels}")
        if not 0 <= cfg.loc_branch <= len(cfg.trunk):
            raise ConfigError("localizer_branch outside the trunk")
    j = junction_index(cfg)
    if cfg.localizer_head and cfg.loc_branch < j:
        raise ConfigError("localizer must branch at or after the last trunk ReLU")
    tail_end = max(len(cfg.trunk) if cfg.classifier_head else 0,
                   cfg.loc_branch if cfg.localizer_head else 0)
    for spec in cfg.trunk[j:tail_end]:
        if spec.kind in ("conv",):
            raise ConfigError("layers between the last trunk ReLU and a head must be parameter-free")
    shape = (1, cfg.in_channels) + cfg.input_size
    for i, spec in enumerate(cfg.trunk):
        shape = _spec_shape(spec, shape, f"trunk[{i}]")


def junction_index(cfg: NetworkConfig) -> int:
    """Position in the trunk activation list where the two heads' errors meet."""
    relus = [i for i, s in enumerate(cfg.trunk) if s.kind == "relu"]
    if relus:
        return relus[-1] + 1
    branches = []
    if cfg.classifier_head:
        branches.append(len(cfg.trunk))
    if cfg.localizer_head:
        branches.append(cfg.loc_branch)
    return min(branches)


def _spec_shape(spec, shape, where):
    n, c, h, w = shape
    if spec.kind == "conv":
        oh = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        ow = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if oh < 1 or ow < 1:
            raise ConfigError(f"{where}: conv output {oh}x{ow} is empty")
        return (n, spec.channels, oh, ow)
    if spec.kind == "maxpool":
        oh = conv_output_size(h, spec.kernel, spec.stride, spec.pad)
        ow = conv_output_size(w, spec.kernel, spec.stride, spec.pad)
        if oh < 1 or ow < 1:
            raise ConfigError(f"{where}: maxpool output {oh}x{ow} is empty")
        return (n, c, oh, ow)
    if spec.kind == "conv1x1":
        return (n, spec.channels, h, w)
    if spec.kind == "fully_connected":
        return (n, spec.channels, 1, 1)
    if spec.kind in POOL_KINDS:
        return (n, c, 1, 1)
    return shape


# ---------------------------------------------------------------------------
# presets

def desk_config(num_classes: int = 2, pool_kind: str = "avg", input_size=(64, 64),
                hidden: int = 128, channels=(16, 32, 32)) -> NetworkConfig:
    """Desk-scale analogue: three conv stages, global stride 8, 8x8 maps at 64x64.

    The third stage convolves with stride 2 so the trunk ends on a ReLU and
    both heads branch from the same tensor.
    """
    c1, c2, c3 = channels
    trunk = (conv(3, 1, 1, c1), RELU, pool(2, 2),
             conv(3, 1, 1, c2), RELU, pool(2, 2),
             conv(3, 2, 1, c3), RELU)
    cls = (fc(hidden), RELU, dropout(0.5), fc(hidden), RELU, dropout(0.5),
           fc(num_classes), SOFTMAX)
    loc = (LayerSpec("conv1x1", channels=num_classes), LayerSpec("global_max_pool"), SOFTMAX)
    cfg = NetworkConfig(trunk, cls, loc, num_classes, input_size, name="desk")
    return cfg.with_pool(pool_kind)


def paper_config(num_classes: int = 2, pool_kind: str = "avg",
                 input_size=(500, 500)) -> NetworkConfig:
    """Six conv layers, 2048-wide dense layers, 15x15 score maps at 500x500.

    The 1x1 convolution reads the conv6 activation before the final pooling;
    the classifier reads the pooled trunk output.
    """
    trunk = (conv(7, 2, 3, 96), RELU, pool(2, 2),
             conv(3, 1, 1, 256), RELU, pool(2, 2),
             conv(3, 1, 1, 384), RELU, pool(2, 2),
             conv(3, 1, 1, 384), RELU, pool(2, 2),
             conv(3, 1, 1, 256), RELU,
             conv(3, 1, 1, 256), RELU, pool(2, 2))
    cls = (fc(2048), RELU, dropout(0.5), fc(2048), RELU, dropout(0.5),
           fc(num_classes), SOFTMAX)
    loc = (LayerSpec("conv1x1", channels=num_classes), LayerSpec("global_max_pool"), SOFTMAX)
    cfg = NetworkConfig(trunk, cls, loc, num_classes, input_size,
                        localizer_branch=len(trunk) - 1, name="paper")
    return cfg.with_pool(pool_kind)


def alexnet_conv_config(num_classes: int = 2, pool_kind: str = "max",
                        input_size=(512, 512)) -> NetworkConfig:
    """AlexNet with its dense layers recast as convolutions (6x6 then 1x1)."""
    trunk = (conv(11, 4, 2, 96), RELU, pool(3, 2),
             conv(5, 1, 2, 256), RELU, pool(3, 2),
             conv(3, 1, 1, 384), RELU,
             conv(3, 1, 1, 384), RELU,
             conv(3, 1, 1, 256), RELU, pool(3, 2),
             conv(6, 1, 0, 4096), RELU,
             conv(1, 1, 0, 4096), RELU)
    loc = (LayerSpec("conv1x1", channels=num_classes), LayerSpec("global_max_pool"), SOFTMAX)
    cfg = NetworkConfig(trunk, (), loc, num_classes, input_size, name="alexnet-conv")
    return cfg.with_pool(pool_kind)


PRESETS = {
    "desk": desk_config,
    "paper": paper_config,
    "alexnet-conv": alexnet_conv_config,
}


def preset(name: str, num_classes: int = 2, pool_kind: str | None = None,
           input_size=None) -> NetworkConfig:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    kwargs = {"num_classes": num_classes}
    if pool_kind is not None:
        kwargs["pool_kind"] = pool_kind
    if input_size is not None:
        kwargs["input_size"] = tuple(input_size)
    return factory(**kwargs)


# ---------------------------------------------------------------------------
# plain-text config files

_KIND_ALIASES = {"fc": "fully_connected", "gmp": "global_max_pool",
                 "gap": "global_avg_pool", "pool": "maxpool"}


def _layer_line(spec: LayerSpec) -> str:
    if spec.kind == "conv":
        return f"conv {spec.kernel} {spec.stride} {spec.pad} {spec.channels}"
    if spec.kind == "maxpool":
        return f"maxpool {spec.kernel} {spec.stride} {spec.pad}"
    if spec.kind in ("fully_connected", "conv1x1"):
        return f"{spec.kind} {spec.channels}"
    if spec.kind == "dropout":
        return f"dropout {spec.rate!r}"
    return spec.kind


def config_to_text(cfg: NetworkConfig) -> str:
    lines = [f"name {cfg.name}",
             f"input {cfg.input_size[0]} {cfg.input_size[1]}",
             f"channels {cfg.in_channels}",
             f"classes {cfg.num_classes}",
             f"gate {cfg.gate}"]
    if cfg.localizer_branch is not None:
        lines.append(f"localizer_branch {cfg.localizer_branch}")
    for section, specs in (("trunk", cfg.trunk), ("classifier", cfg.classifier_head),
                           ("localizer", cfg.localizer_head)):
        lines.append(f"[{section}]")
        lines.extend(_layer_line(s) for s in specs)
    return "\n".join(lines) + "\n"


def _parse_layer(tokens, where):
    kind = _KIND_ALIASES.get(tokens[0], tokens[0])
    args = tokens[1:]
    try:
        if kind == "conv":
            k, s, p, c = (int(v) for v in args)
            return LayerSpec(kind, k, s, p, c)
        if kind == "maxpool":
            vals = [int(v) for v in args if v != "-"]
            k, s = vals[0], vals[1]
            p = vals[2] if len(vals) > 2 else 0
            return LayerSpec(kind, k, s, p)
        if kind in ("fully_connected", "conv1x1"):
            return LayerSpec(kind, channels=int(args[-1]))
        if kind == "dropout":
            return LayerSpec(kind, rate=float(args[-1]))
        if args:
            raise ValueError("unexpected arguments")
        return LayerSpec(kind)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (ValueError, IndexError):
        raise ConfigError(f"{where}: cannot parse layer {' '.join(tokens)!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> NetworkConfig:
    """Parse the line-oriented network format (see README)."""
    keys = {}
    sections = {"trunk": [], "classifier": [], "localizer": []}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise ConfigError(f"{where}: unknown section [{current}]")
            continue
        tokens = line.split()
        if current is None:
            keys[tokens[0]] = tokens[1:]
        else:
            sections[current].append(_parse_layer(tokens, where))
    try:
        size = tuple(int(v) for v in keys.get("input", []))
        if len(size) == 1:
            size = size * 2
        branch = keys.get("localizer_branch")
        return NetworkConfig(
            trunk=sections["trunk"],
            classifier_head=sections["classifier"],
            localizer_head=sections["localizer"],
            num_classes=int(keys.get("classes", ["2"])[0]),
            input_size=size,
            in_channels=int(keys.get("channels", ["1"])[0]),
            localizer_branch=int(branch[0]) if branch else None,
            gate=keys.get("gate", ["relu"])[0],
            name=keys.get("name", ["custom"])[0],
        )
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> NetworkConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


# ---------------------------------------------------------------------------
# geometry

@dataclass(frozen=True)
class Geometry:
    global_stride: tuple
    receptive_field: tuple
    layers: tuple = field(repr=False)

    def map_dims(self, input_size) -> tuple:
        h, w = input_size
        for kind, k, s, p in self.layers:
            h = conv_output_size(h, k, s, p)
            w = conv_output_size(w, k, s, p)
        return (h, w)

    @property
    def stride(self) -> int:
        return self.global_stride[0]


def geometry(cfg: NetworkConfig) -> Geometry:
    """Global stride and receptive field of the score maps.

    Uses the recurrence ``rf += (k - 1) * jump; jump *= stride`` over every
    spatial layer from the input up to the 1x1 convolution.
    """
    path = cfg.trunk[:cfg.loc_branch] if cfg.localizer_head else cfg.trunk
    spatial = []
    for spec in path:
        if spec.kind in ("conv", "maxpool"):
            spatial.append((spec.kind, spec.kernel, spec.stride, spec.pad))
        elif spec.kind not in ("relu", "dropout"):
            raise ConfigError(f"geometry undefined through {spec.kind!r}")
    rf, jump = 1, 1
    for _, k, s, _ in spatial:
        rf += (k - 1) * jump
        jump *= s
    return Geometry((jump, jump), (rf, rf), tuple(spatial))


# ---------------------------------------------------------------------------
# schedules

@dataclass(frozen=True)
class AlphaSchedule:
    """Loss weight on the localizer: ``initial`` before ``switch_epoch``, then ``final``.

    With ``ramp > 0`` the change is linear over ``ramp`` epochs starting at
    ``switch_epoch`` instead of a hard step.
    """

    initial: float = 0.1
    final: float = 0.9
    switch_epoch: int = 60
    ramp: int = 0

    def __post_init__(self):
        for v in (self.initial, self.final):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"alpha must lie in [0, 1], got {v}")
        if self.switch_epoch < 0 or self.ramp < 0:
            raise ConfigError("switch_epoch and ramp must be >= 0")

    @classmethod
    def constant(cls, alpha: float) -> "AlphaSchedule":
        return cls(alpha, alpha, 0)


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    if epoch < schedule.switch_epoch:
        return schedule.initial
    if schedule.ramp and epoch < schedule.switch_epoch + schedule.ramp:
        frac = (epoch - schedule.switch_epoch + 1) / schedule.ramp
        return schedule.initial + frac * (schedule.final - schedule.initial)
    return schedule.final


# ---------------------------------------------------------------------------
# the network

@dataclass
class Output:
    y_cls: np.ndarray | None
    y_loc: np.ndarray | None
    score_maps: np.ndarray | None
    logits_cls: np.ndarray | None = None
    logits_loc: np.ndarray | None = None


@dataclass
class BackpropProbe:
    """Errors at the junction (last trunk ReLU) and at the score maps.

    ``delta_cls`` and ``delta_loc`` are each head's weighted error carried to
    the junction's output; ``delta_shared`` is the gated sum at its input.
    """

    delta_shared: np.ndarray
    delta_cls: np.ndarray
    delta_loc: np.ndarray
    score_map_grad: np.ndarray | None


def _build(spec: LayerSpec, name: str, in_shape, dtype):
    c = in_shape[1]
    if spec.kind == "conv":
        return Conv2d(name, c, spec.channels, spec.kernel, spec.stride, spec.pad, dtype)
    if spec.kind == "conv1x1":
        return Conv1x1(name, c, spec.channels, dtype)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "maxpool":
        return MaxPool(spec.kernel, spec.stride)
    if spec.kind == "fully_connected":
        return FullyConnected(name, int(np.prod(in_shape[1:])), spec.channels, dtype)
    if spec.kind == "dropout":
        return Dropout(spec.rate)
    if spec.kind == "global_max_pool":
        return GlobalMaxPool()
    if spec.kind == "global_avg_pool":
        return GlobalAvgPool()
    raise ConfigError(f"cannot build {spec.kind!r}")


class STLNet:
    """Shared trunk with a classifier head and a localizer head.

    Parameters are named ``conv1.weight``, ``fc2.bias``, ``loc.weight`` and so
    on; names are stable across precisions so parameters can be copied
    between networks.
    """

    def __init__(self, config: NetworkConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.dropout_rng: Rng | None = None
        shape = (1, config.in_channels) + config.input_size
        self.trunk, shape = self._stack(config.trunk, shape, "conv")
        trunk_shape = shape
        self.classifier = []
        if config.classifier_head:
            self.classifier, _ = self._stack(config.classifier_head[:-1], trunk_shape, "fc")
        self.localizer = []
        self.score_shape = None
        if config.localizer_head:
            bshape = (1, config.in_channels) + config.input_size
            for spec in config.trunk[:config.loc_branch]:
                bshape = _spec_shape(spec, bshape, "trunk")
            conv1x1 = _build(config.localizer_head[0], "loc", bshape, self.dtype)
            self.score_shape = conv1x1.output_shape(bshape)
            self.localizer = [conv1x1, _build(config.localizer_head[1], "locpool",
                                              self.score_shape, self.dtype)]
        self.junction = junction_index(config)
        self.params = [p for layer in self.layers for p in layer.params]
        self.param_map = {p.name: p for p in self.params}
        self._cache = None

    def _stack(self, specs, shape, prefix):
        layers = []
        counter = 1
        for spec in specs:
            name = None
            if spec.kind in ("conv", "fully_connected"):
                name = f"{prefix}{counter}"
                counter += 1
            layer = _build(spec, name, shape, self.dtype)
            shape = _spec_shape(spec, shape, name or spec.kind)
            layers.append(layer)
        return layers, shape

    @property
    def layers(self):
        return self.trunk + self.classifier + self.localizer

    def set_dropout_rng(self, rng: Rng | None):
        self.dropout_rng = rng
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def num_params(self) -> int:
        return sum(p.value.size for p in self.params)

    def state_dict(self) -> dict:
        return {p.name: p.value.copy() for p in self.params}

    def load_state_dict(self, state: dict, strict: bool = True):
        for p in self.params:
            if p.name not in state:
                if strict:
                    raise ConfigError(f"missing tensor {p.name!r}")
                continue
            v = np.asarray(state[p.name])
            if v.shape != p.value.shape:
                raise ConfigError(f"tensor {p.name!r}: shape {v.shape} does not match "
                                  f"network shape {p.value.shape}")
            p.value[...] = v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    # -- forward -----------------------------------------------------------

    def forward(self, x, train: bool = False) -> Output:
        cfg = self.config
        x = np.asarray(x)
        expected = (cfg.in_channels,) + cfg.input_size
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ConfigError(f"{cfg.name}: batch shape {x.shape[1:]} does not match "
                              f"configured input {expected}")
        return self._run([x.astype(self.dtype, copy=False)], train)

    def forward_from(self, acts, start: int, train: bool = False) -> Output:
        """Re-run the network from trunk layer ``start`` reusing ``acts[:start + 1]``.

        ``acts`` is the activation list of an earlier forward on the same
        batch; layers before ``start`` keep the state of that pass.
        """
        return self._run(list(acts[:start + 1]), train)

    def activations(self) -> list:
        return list(self._require_cache()[0])

    def _run(self, acts, train):
        cfg = self.config
        for layer in self.trunk[len(acts) - 1:]:
            acts.append(layer.forward(acts[-1], train))
        out = Output(None, None, None)
        if self.classifier:
            h = acts[-1]
            for layer in self.classifier:
                h = layer.forward(h, train)
            out.logits_cls = h.reshape(h.shape[0], -1)
            out.y_cls = np.exp(log_softmax(out.logits_cls))
        if self.localizer:
            maps = self.localizer[0].forward(acts[cfg.loc_branch], train)
            pooled = self.localizer[1].forward(maps, train)
            out.score_maps = maps
            out.logits_loc = pooled.reshape(pooled.shape[0], -1)
            out.y_loc = np.exp(log_softmax(out.logits_loc))
        self._cache = (acts, out)
        return out

    def losses(self, targets, alpha: float):
        """(total, loss_cls, loss_loc) for the last forward; mean over the batch."""
        _, out = self._require_cache()
        t = check_one_hot(targets, self.config.num_classes)
        lc = ll = 0.0
        if out.logits_cls is not None:
            lc = float(-(t * log_softmax(out.logits_cls.astype(np.float64))).sum() / len(t))
        if out.logits_loc is not None:
            ll = float(-(t * log_softmax(out.logits_loc.astype(np.float64))).sum() / len(t))
        return (1.0 - alpha) * lc + alpha * ll, lc, ll

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError("backward needs a forward pass on the same batch "
                               "(cache is empty or already consumed)")
        return self._cache

    # -- backward ----------------------------------------------------------

    def backward(self, targets, alpha: float) -> BackpropProbe:
        """Fill ``param.grad`` for every parameter and return the junction probe.

        A head whose loss weight is exactly zero is skipped; its parameters
        get zero gradient.
        """
        if not 0.0 <= alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
        acts, out = self._require_cache()
        self._cache = None
        cfg = self.config
        t = check_one_hot(targets, cfg.num_classes).astype(self.dtype)
        n = t.shape[0]
        if n != acts[0].shape[0]:
            raise RuntimeError("targets do not match the cached batch")
        self.zero_grad()
        j = self.junction
        w_cls, w_loc = 1.0 - alpha, alpha

        delta_cls = delta_loc = score_grad = None
        if self.classifier and w_cls != 0.0:
            g = ((out.y_cls - t) / self.dtype.type(n)) * self.dtype.type(w_cls)
            g = g.reshape(n, -1, 1, 1)
            for layer in reversed(self.classifier):
                g = layer.backward(g)
            for layer in reversed(self.trunk[j:]):
                g = layer.backward(g)
            delta_cls = g
        if self.localizer and w_loc != 0.0:
            g = ((out.y_loc - t) / self.dtype.type(n)) * self.dtype.type(w_loc)
            g = self.localizer[1].backward(g.reshape(n, -1, 1, 1))
            score_grad = g
            g = self.localizer[0].backward(g)
            for layer in reversed(self.trunk[j:cfg.loc_branch]):
                g = layer.backward(g)
            delta_loc = g

        zeros = np.zeros_like(acts[j])
        if delta_cls is None and delta_loc is None:
            combined = zeros
        elif delta_loc is None:
            combined = delta_cls
        elif delta_cls is None:
            combined = delta_loc
        else:
            combined = delta_cls + delta_loc

        relu_at = j - 1
        if relu_at >= 0 and isinstance(self.trunk[relu_at], ReLU):
            if cfg.gate == "clamp":
                delta_shared = np.maximum(combined, 0)
            else:
                delta_shared = relu_backward(acts[relu_at], combined)
            below = relu_at
        else:
            delta_shared = combined
            below = j
        g = delta_shared
        for layer in reversed(self.trunk[:below]):
            g = layer.backward(g)
        return BackpropProbe(
            delta_shared=delta_shared,
            delta_cls=zeros if delta_cls is None else delta_cls,
            delta_loc=zeros if delta_loc is None else delta_loc,
            score_map_grad=score_grad,
        )

    # -- ReLU/pooling signature, used by the gradient checker ---------------

    def branch_signature(self) -> tuple:
        """Bytes identifying every ReLU mask and pooling argmax of the last forward."""
        parts = []
        for layer in self.layers:
            if isinstance(layer, ReLU) and layer._x is not None:
                parts.append(np.packbits(layer._x > 0).tobytes())
            elif isinstance(layer, (MaxPool, GlobalMaxPool)) and layer.argmax is not None:
                parts.append(layer.argmax.tobytes())
        return tuple(parts)


def init_params(net: STLNet, rng: Rng, std: float = 0.01, scheme: str = "gaussian"):
    """Draw weights from N(0, std^2) in parameter order; biases are exactly zero.

    ``scheme="fan_in"`` scales each weight tensor by ``sqrt(2 / fan_in)``
    instead of ``std``.  Gradient checks use it for conditioning, and the
    small from-scratch desk network needs it to leave the chance-level
    plateau that a flat 0.01 std leaves it on.
    """
    for p in net.params:
        if p.name.endswith(".bias"):
            p.value[...] = 0
            continue
        s = std
        if scheme == "fan_in":
            s = math.sqrt(2.0 / int(np.prod(p.value.shape[1:])))
        elif scheme != "gaussian":
            raise ConfigError(f"unknown init scheme {scheme!r}")
        p.value[...] = rng.normal(p.value.shape, s).astype(net.dtype)
        p.momentum[...] = 0
    return net


def stl_loss(y_cls, y_loc, targets, alpha: float):
    """Weighted cross-entropy of two probability batches.

    Returns (total, loss_cls, loss_loc), each a minibatch mean.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    y_cls = np.asarray(y_cls, dtype=np.float64)
    y_loc = np.asarray(y_loc, dtype=np.float64)
    t = check_one_hot(targets, y_cls.shape[1])
    n = t.shape[0]
    idx = (np.arange(n), t.argmax(axis=1))
    with np.errstate(divide="ignore"):
        loss_cls = float(-np.log(y_cls[idx]).sum() / n)
        loss_loc = float(-np.log(y_loc[idx]).sum() / n)
    return (1.0 - alpha) * loss_cls + alpha * loss_loc, loss_cls, loss_loc
