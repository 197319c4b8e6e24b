"""Deep multi-channel transform-learning model with a fully-connected fusion map.

Each input channel runs through its own stack of convolutional transforms.
The last layer of every stack has no activation: its output is matched
against the explicit nonnegative features ``X[c]``.  Flattened channel
features are mixed by per-channel linear maps into fused features ``Z``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ShapeError
from .tensor_ops import (
    FilterBank,
    as_tensor3,
    conv1d,
    flatten,
    frobenius_sq,
    logdet_rect,
    maxpool1d,
    relu,
    selu,
)

ACTIVATIONS = {
    "selu": selu,
    "relu": relu,
    "identity": lambda x: x,
}


@dataclass(frozen=True)
class LayerSpec:
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    pool: tuple[int, int] | None = None
    activation: str = "identity"


#: Two-layer pipeline used for every channel: conv(1->4, k5, p2), maxpool(2, 2), SELU,
#: then conv(4->8, k3, p1).
DEFAULT_LAYERS = (
    LayerSpec(4, 5, 1, 2, pool=(2, 2), activation="selu"),
    LayerSpec(8, 3, 1, 1),
)
DEFAULT_ALPHA = 0.5


@dataclass
class Layer:
    bank: FilterBank
    activation: str = "identity"
    pool: tuple[int, int] | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ChannelPipeline:
    layers: list[Layer]
    channel_index: int = 0

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.bank.in_channels != prev.bank.out_channels:
                raise ShapeError(
                    f"layer expects {cur.bank.in_channels} input channels, previous layer has "
                    f"{prev.bank.out_channels} filters"
                )
        if self.layers and self.layers[-1].activation != "identity":
            raise ValueError("the final layer of a pipeline must use the identity activation")

    def output_shape(self, length: int) -> tuple[int, int]:
        d = length
        for layer in self.layers:
            d = layer.bank.output_length(d)
            if layer.pool is not None:
                k, s = layer.pool
                d = (d - k) // s + 1
        return self.layers[-1].bank.out_channels, d


@dataclass
class DeconfuseModel:
    pipelines: list[ChannelPipeline]
    fusion: list[np.ndarray]
    window: int

    def __post_init__(self):
        if len(self.fusion) != len(self.pipelines):
            raise ShapeError("need one fusion matrix per channel")
        shapes = {p.output_shape(self.window) for p in self.pipelines}
        if len(shapes) != 1:
            raise ShapeError(f"channel pipelines disagree on feature shape: {sorted(shapes)}")
        I = self.features_per_channel
        outs = {f.shape for f in self.fusion}
        if len(outs) != 1 or next(iter(outs))[0] != I:
            raise ShapeError(f"fusion matrices must all be {I} x O, got {sorted(outs)}")

    @property
    def num_channels(self) -> int:
        return len(self.pipelines)

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.pipelines[0].output_shape(self.window)

    @property
    def features_per_channel(self) -> int:
        m, d = self.feature_shape
        return m * d

    @property
    def output_dim(self) -> int:
        return self.fusion[0].shape[1]

    def transforms(self) -> dict[str, np.ndarray]:
        """All learnable transforms keyed as ``T{c}_{l}`` and ``F{c}``."""
        out = {}
        for c, pipe in enumerate(self.pipelines):
            for l, layer in enumerate(pipe.layers):
                out[f"T{c}_{l}"] = layer.bank.weights
            out[f"F{c}"] = self.fusion[c]
        return out

    def with_transforms(self, params: dict[str, np.ndarray]) -> "DeconfuseModel":
        pipes = []
        for c, pipe in enumerate(self.pipelines):
            layers = [
                Layer(FilterBank(np.array(params[f"T{c}_{l}"]), L.bank.stride, L.bank.padding), L.activation, L.pool)
                for l, L in enumerate(pipe.layers)
            ]
            pipes.append(ChannelPipeline(layers, c))
        fusion = [np.array(params[f"F{c}"]) for c in range(self.num_channels)]
        return DeconfuseModel(pipes, fusion, self.window)


def fusion_width(features_per_channel: int, channels: int, alpha: float = DEFAULT_ALPHA) -> int:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return math.ceil(alpha * features_per_channel * channels)


def build_model(
    channels: int,
    window: int,
    layers: Sequence[LayerSpec] = DEFAULT_LAYERS,
    alpha: float = DEFAULT_ALPHA,
    seed: int | np.random.Generator = 0,
) -> DeconfuseModel:
    """Randomly initialized model (uniform fan-based scaling, no biases)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pipes = []
    for c in range(channels):
        in_ch, stack = 1, []
        for spec in layers:
            a = math.sqrt(6.0 / (spec.kernel_size * (in_ch + spec.out_channels)))
            w = rng.uniform(-a, a, size=(spec.out_channels, in_ch, spec.kernel_size))
            stack.append(Layer(FilterBank(w, spec.stride, spec.padding), spec.activation, spec.pool))
            in_ch = spec.out_channels
        pipes.append(ChannelPipeline(stack, c))
    I = int(np.prod(pipes[0].output_shape(window)))
    O = fusion_width(I, channels, alpha)
    a = math.sqrt(6.0 / (I + O))
    fusion = [rng.uniform(-a, a, size=(I, O)) for _ in range(channels)]
    return DeconfuseModel(pipes, fusion, window)


def _channels(S, C: int) -> list[np.ndarray]:
    chans = [as_tensor3(s) for s in S]
    if len(chans) != C:
        raise ShapeError(f"model has {C} channels, got {len(chans)} inputs")
    return chans


def pipeline_forward(pipeline: ChannelPipeline, S_c) -> np.ndarray:
    """conv -> pool -> activation per layer; returns the final-layer output."""
    h = as_tensor3(S_c)
    for layer in pipeline.layers:
        h = conv1d(h, layer.bank)
        if layer.pool is not None:
            h = maxpool1d(h, *layer.pool)
        h = ACTIVATIONS[layer.activation](h)
    return h


def fused_preactivation(model: DeconfuseModel, X: Sequence[np.ndarray]) -> np.ndarray:
    if len(X) != model.num_channels:
        raise ShapeError("need one feature tensor per channel")
    total = None
    for c in range(model.num_channels):
        F = flatten(X[c])
        if F.shape[1] != model.fusion[c].shape[0]:
            raise ShapeError(f"channel {c} features have {F.shape[1]} columns, fusion expects {model.fusion[c].shape[0]}")
        term = F @ model.fusion[c]
        total = term if total is None else total + term
    return total


def fusion_residual(model: DeconfuseModel, X: Sequence[np.ndarray], Z: np.ndarray) -> float:
    fused = fused_preactivation(model, X)
    if fused.shape != np.shape(Z):
        raise ShapeError(f"Z has shape {np.shape(Z)}, fused features are {fused.shape}")
    return 0.5 * float(np.sum((Z - fused) ** 2))


class JointTerms(NamedTuple):
    value: float
    fusion_residual: float
    conv_residual: float
    regularizers: float
    feasible: bool


def regularizer(T: np.ndarray, mu: float, lam: float) -> float:
    """mu ||T||^2 - lam logdet(T), with conv filters taken as columns."""
    val = mu * frobenius_sq(T)
    if lam:
        M = T.reshape(T.shape[0], -1) if T.ndim == 3 else T
        val -= lam * logdet_rect(M)
    return val


def joint_terms(model: DeconfuseModel, X, Z, S, mu: float, lam: float) -> JointTerms:
    S = _channels(S, model.num_channels)
    conv_res = 0.0
    for c, pipe in enumerate(model.pipelines):
        out = pipeline_forward(pipe, S[c])
        if out.shape != np.shape(X[c]):
            raise ShapeError(f"X[{c}] has shape {np.shape(X[c])}, pipeline output is {out.shape}")
        conv_res += 0.5 * float(np.sum((out - X[c]) ** 2))
    fus_res = fusion_residual(model, X, Z)
    reg = sum(regularizer(T, mu, lam) for T in model.transforms().values())
    feasible = all(np.all(x >= 0) for x in X) and bool(np.all(np.asarray(Z) >= 0))
    value = conv_res + fus_res + reg if feasible else math.inf
    return JointTerms(value, fus_res, conv_res, reg, feasible)


def joint_objective(model: DeconfuseModel, X, Z, S, mu: float = 0.01, lam: float = 0.01) -> float:
    """Full training objective; ``math.inf`` when X or Z leave the nonnegative orthant."""
    return joint_terms(model, X, Z, S, mu, lam).value


@dataclass
class LatentFeatures:
    X: list[np.ndarray]
    Z: np.ndarray


def infer_features(model: DeconfuseModel, S) -> LatentFeatures:
    """Closed-form features for fixed transforms: nonnegative projections of the pre-activations."""
    S = _channels(S, model.num_channels)
    X = [relu(pipeline_forward(p, S[c])) for c, p in enumerate(model.pipelines)]
    Z = relu(fused_preactivation(model, X))
    return LatentFeatures(X, Z)


@dataclass
class ComplexityReport:
    """Per-sample operation counts, one entry per training step kind.

    ``conv_layers`` and the two conv regularizer lists hold one count per layer;
    ``testing`` is the cost of steps 1 and 2 together.
    """

    conv_layers: list[int]
    fully_connected: int
    frobenius_conv: list[int]
    frobenius_fc: int
    logdet_conv: list[int]
    logdet_fc: int
    dims: dict = field(default_factory=dict)

    @property
    def training(self) -> int:
        return (
            sum(self.conv_layers)
            + self.fully_connected
            + sum(self.frobenius_conv)
            + self.frobenius_fc
            + sum(self.logdet_conv)
            + self.logdet_fc
        )

    @property
    def testing(self) -> int:
        return sum(self.conv_layers) + self.fully_connected

    def rows(self) -> list[tuple[str, str, int]]:
        return [
            ("convolution layers", "O(P_l D_l M_l C)", sum(self.conv_layers)),
            ("fully-connected layer", "O(I^2 C^2)", self.fully_connected),
            ("Frobenius norm on conv layers", "O(P_l M_l C)", sum(self.frobenius_conv)),
            ("Frobenius norm on f.-c. layer", "O(I^2 C^2)", self.frobenius_fc),
            ("log-det on conv layers", "O(P_l^2 M_l C)", sum(self.logdet_conv)),
            ("log-det on f.-c. layer", "O(I^3 C^2)", self.logdet_fc),
        ]


def complexity_report(model: DeconfuseModel, window: int | None = None) -> ComplexityReport:
    D = model.window if window is None else window
    C = model.num_channels
    conv, frob, ld = [], [], []
    layer_dims = []
    for layer in model.pipelines[0].layers:
        P, M = layer.bank.kernel_size, layer.bank.out_channels
        # D_l is taken at the convolution output, before pooling
        D = layer.bank.output_length(D)
        conv.append(P * D * M * C)
        frob.append(P * M * C)
        ld.append(P * P * M * C)
        layer_dims.append({"P": P, "D": D, "M": M})
        if layer.pool is not None:
            k, s = layer.pool
            D = (D - k) // s + 1
    I = model.features_per_channel
    return ComplexityReport(
        conv_layers=conv,
        fully_connected=I * I * C * C,
        frobenius_conv=frob,
        frobenius_fc=I * I * C * C,
        logdet_conv=ld,
        logdet_fc=I**3 * C * C,
        dims={"C": C, "I": I, "O": model.output_dim, "layers": layer_dims},
    )
