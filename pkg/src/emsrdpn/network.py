"""The dual-path super-resolution network as pure functions over a parameter store.

Data flow for one input ``x``::

    FEB (two 3x3 convs) -> D x [C dual-path units + transition unit]
        -> hierarchical fusion (1x1, 3x3, global residual) = H
        -> one reconstruction head per scale (sub-pixel stages + 3x3 to RGB)

The trunk up to ``H`` is shared by all scales. Parameters live in a plain
ordered ``dict`` mapping names to :class:`~emsrdpn.tensor.Tensor`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .image import dihedral, dihedral_inverse
from .tensor import Tensor, add, channel_concat, channel_split, conv2d, parameter, pixel_shuffle, relu, tally

DEFAULT_STAGES = {2: (2,), 3: (3,), 4: (2, 2), 8: (2, 2, 2)}

ParameterStore = dict  # name -> Tensor, insertion-ordered


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    D: int = 4
    C: int = 2
    G_r: int = 16
    G_d: int = 16
    G: int = 16
    scales: tuple[int, ...] = (2, 3, 4)
    bottleneck: int | None = None
    stages: dict[int, tuple[int, ...]] = field(default_factory=lambda: dict(DEFAULT_STAGES))

    def __post_init__(self) -> None:
        self.scales = tuple(int(s) for s in self.scales)
        self.stages = {int(s): tuple(int(r) for r in rs) for s, rs in self.stages.items()}
        self.validate()

    @classmethod
    def full(cls, scales=(2, 3, 4, 8)) -> "NetworkConfig":
        return cls(D=16, C=4, G_r=64, G_d=64, G=64, scales=tuple(scales))

    @property
    def width(self) -> int:
        """Feature width of the FEB, TU and HFIB outputs (``G_r + G_d``)."""
        return self.G_r + self.G_d

    @property
    def t(self) -> int:
        return self.width if self.bottleneck is None else self.bottleneck

    def stages_for(self, s: int) -> tuple[int, ...]:
        return self.stages[s]

    def validate(self) -> None:
        if self.D < 1 or self.C < 1:
            raise ConfigError(f"D and C must be >= 1 (got D={self.D}, C={self.C})")
        if min(self.G_r, self.G_d, self.G) < 0:
            raise ConfigError("path widths must be non-negative")
        if self.width < 1 or self.G_r + self.G < 1:
            raise ConfigError(f"degenerate widths G_r={self.G_r}, G_d={self.G_d}, G={self.G}")
        if self.t < 1:
            raise ConfigError(f"bottleneck width must be >= 1, got {self.t}")
        if not self.scales or len(set(self.scales)) != len(self.scales):
            raise ConfigError(f"scale set must be non-empty and unique, got {self.scales}")
        for s in self.scales:
            rs = self.stages.get(s)
            if rs is None:
                raise ConfigError(f"no upsampling stages defined for scale {s}")
            if int(np.prod(rs)) != s:
                raise ConfigError(f"stages {rs} do not multiply to scale {s}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        d["stages"] = {str(s): list(rs) for s, rs in sorted(self.stages.items())}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown network config fields: {sorted(unknown)}")
        if "stages" in d:
            d["stages"] = {int(k): tuple(v) for k, v in d["stages"].items()}
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)


def param_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor in the store, in canonical order."""
    W, t = config.width, config.t
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, k, c_in, c_out):
        shapes[f"{name}.weight"] = (c_out, c_in, k, k)
        shapes[f"{name}.bias"] = (1, c_out, 1, 1)

    conv("feb.conv1", 3, 3, W)
    conv("feb.conv2", 3, W, W)
    for d in range(1, config.D + 1):
        for c in range(1, config.C + 1):
            conv(f"dpb{d}.dpu{c}.t1x1", 1, W + (c - 1) * config.G, t)
            conv(f"dpb{d}.dpu{c}.w3x3", 3, t, config.G_r + config.G)
        conv(f"dpb{d}.tu", 1, W + config.C * config.G, W)
    conv("hfib.t1x1", 1, config.D * W, W)
    conv("hfib.w3x3", 3, W, W)
    for s in config.scales:
        for j, r in enumerate(config.stages_for(s), start=1):
            conv(f"rb_x{s}.stage{j}", 3, W, W * r * r)
        conv(f"rb_x{s}.final", 3, W, 3)
    return shapes


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """He-normal weights (fan-in ``k*k*c_in``) and zero biases."""
    rng = np.random.default_rng(seed)
    store: ParameterStore = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            c_in, k = shape[1], shape[2]
            arr = rng.normal(0.0, np.sqrt(2.0 / (k * k * c_in)), size=shape)
        store[name] = parameter(arr.astype(dtype), name)
    return store


def cast_params(params: ParameterStore, dtype) -> ParameterStore:
    return {n: parameter(p.data.astype(dtype), n) for n, p in params.items()}


# --------------------------------------------------------------------------
# building blocks


class DualPathState(NamedTuple):
    """Residual and dense feature groups; either may be ``None`` when its width is 0."""

    residual: Tensor | None
    dense: Tensor | None

    def widths(self) -> tuple[int, int]:
        return (self.residual.shape[1] if self.residual is not None else 0,
                self.dense.shape[1] if self.dense is not None else 0)


def _concat(parts) -> Tensor:
    parts = [p for p in parts if p is not None]
    return parts[0] if len(parts) == 1 else channel_concat(parts)


def _split(x: Tensor, widths) -> list[Tensor | None]:
    nonzero = [w for w in widths if w > 0]
    if len(nonzero) == 1:
        return [x if w > 0 else None for w in widths]
    pieces = iter(channel_split(x, nonzero))
    return [next(pieces) if w > 0 else None for w in widths]


def _conv(x: Tensor, params: ParameterStore, name: str) -> Tensor:
    return conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def feb_forward(x: Tensor, params: ParameterStore, config: NetworkConfig) -> tuple[Tensor, DualPathState]:
    if x.shape[1] != 3:
        raise ConfigError(f"network input must have 3 channels, got {x.shape[1]}")
    b_minus1 = _conv(x, params, "feb.conv1")
    b0 = _conv(b_minus1, params, "feb.conv2")
    r, dn = _split(b0, [config.G_r, config.G_d])
    return b_minus1, DualPathState(r, dn)


def dpu_forward(state: DualPathState, params: ParameterStore, config: NetworkConfig,
                d: int, c: int) -> DualPathState:
    expected = (config.G_r, config.G_d + (c - 1) * config.G)
    if state.widths() != expected:
        raise ConfigError(f"dpb{d}.dpu{c}: input widths {state.widths()} != {expected}")
    tally(call="dpu")
    u = relu(_concat([state.residual, state.dense]))
    h = relu(_conv(u, params, f"dpb{d}.dpu{c}.t1x1"))
    out = _conv(h, params, f"dpb{d}.dpu{c}.w3x3")
    f, g_new = _split(out, [config.G_r, config.G])
    residual = add(state.residual, f) if f is not None else state.residual
    dense = _concat([state.dense, g_new]) if g_new is not None else state.dense
    return DualPathState(residual, dense)


def tu_forward(state: DualPathState, params: ParameterStore, config: NetworkConfig,
               d: int) -> tuple[Tensor, DualPathState]:
    expected = (config.G_r, config.G_d + config.C * config.G)
    if state.widths() != expected:
        raise ConfigError(f"dpb{d}.tu: input widths {state.widths()} != {expected}")
    tally(call="tu")
    b = _conv(_concat([state.residual, state.dense]), params, f"dpb{d}.tu")
    r, dn = _split(b, [config.G_r, config.G_d])
    return b, DualPathState(r, dn)


def trunk_forward(x: Tensor, params: ParameterStore, config: NetworkConfig) -> tuple[Tensor, list[Tensor]]:
    """Shared part of the network; returns ``H`` and the block outputs ``B_1..B_D``."""
    b_minus1, state = feb_forward(x, params, config)
    blocks = []
    for d in range(1, config.D + 1):
        for c in range(1, config.C + 1):
            state = dpu_forward(state, params, config, d, c)
        b, state = tu_forward(state, params, config, d)
        blocks.append(b)
    fused = _conv(_conv(_concat(blocks), params, "hfib.t1x1"), params, "hfib.w3x3")
    tally(call="trunk")
    return add(fused, b_minus1), blocks


def rb_forward(h: Tensor, s: int, params: ParameterStore, config: NetworkConfig) -> Tensor:
    if s not in config.scales:
        raise ConfigError(f"unknown scale x{s}; this network has heads for {list(config.scales)}")
    y = h
    for j, r in enumerate(config.stages_for(s), start=1):
        y = pixel_shuffle(_conv(y, params, f"rb_x{s}.stage{j}"), r)
    return _conv(y, params, f"rb_x{s}.final")


def forward(x: Tensor, s: int, params: ParameterStore, config: NetworkConfig) -> Tensor:
    if s not in config.scales:
        raise ConfigError(f"unknown scale x{s}; this network has heads for {list(config.scales)}")
    h, _ = trunk_forward(x, params, config)
    return rb_forward(h, s, params, config)


def forward_multi(x: Tensor, params: ParameterStore, config: NetworkConfig,
                  scales=None) -> dict[int, Tensor]:
    """Evaluate the trunk once and every requested head on the shared features."""
    scales = config.scales if scales is None else tuple(scales)
    h, _ = trunk_forward(x, params, config)
    return {s: rb_forward(h, s, params, config) for s in scales}


def self_ensemble(x: Tensor, s: int, params: ParameterStore, config: NetworkConfig) -> Tensor:
    """Average of ``forward`` over the eight dihedral transforms of ``x``."""
    acc = None
    for code in range(8):
        xt = Tensor.wrap(np.ascontiguousarray(dihedral(x.data, code, axes=(2, 3))))
        y = dihedral_inverse(forward(xt, s, params, config).data, code, axes=(2, 3))
        acc = y.astype(np.float64) if acc is None else acc + y
    return Tensor.wrap((acc / 8).astype(x.dtype))
