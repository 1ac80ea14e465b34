"""Compressive autoencoder with a multi-resolution decoder.

The encoder halves the spatial extent per stage with strided convolutions and
the decoder mirrors it with transposed convolutions. Every decoder scale has
its own 1x1 output head, so the training loss can match the target at all
frequencies at once. There is deliberately no encoder-to-decoder skip path:
with identical noisy input and target, any shortcut around the bottleneck
would let the network learn the identity map and reproduce the noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tape, TapeEntry, Variable


@dataclass(frozen=True)
class ModelConfig:
    input_size: int
    input_channels: int = 1
    stages: int = 4
    base_width: int = 16
    bottleneck_channels: int = 64
    activation_slope: float = 0.01

    def __post_init__(self):
        s = self.input_size
        if s < 1 or (s & (s - 1)) != 0:
            raise ValueError(f"input_size must be a power of two, got {s}")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")
        if s // (2 ** self.stages) < 4:
            raise ValueError(
                f"input_size {s} with {self.stages} stages leaves a bottleneck smaller than 4x4")
        if self.input_channels < 1 or self.base_width < 1:
            raise ValueError("input_channels and base_width must be positive")
        if self.bottleneck_channels < 1:
            raise ValueError("bottleneck_channels must be >= 1")
        if self.flat_bottleneck_size >= s * s * self.input_channels:
            raise ValueError(
                f"bottleneck holds {self.flat_bottleneck_size} values, not smaller than "
                f"the {s * s * self.input_channels}-value input; no compression")

    @property
    def bottleneck_size(self) -> int:
        """Spatial extent of the bottleneck activation."""
        return self.input_size // (2 ** self.stages)

    @property
    def flat_bottleneck_size(self) -> int:
        return self.bottleneck_channels * self.bottleneck_size ** 2

    def stage_width(self, i: int) -> int:
        """Channel count after encoder stage i (doubling, capped at 8x base)."""
        return min(self.base_width * (2 ** i), 8 * self.base_width)


@dataclass
class MultiScaleOutput:
    """Decoder heads ordered coarse to fine; the finest is the prediction."""
    heads: list[Variable]

    @property
    def finest(self) -> Variable:
        return self.heads[-1]


@dataclass
class ForwardRecord:
    """Graph bookkeeping from one forward pass, for structural checks."""
    tape: Tape | None
    input_id: int
    encoder_ids: list[int]
    bottleneck_id: int
    head_ids: list[int]


class AutoencoderModel:
    def __init__(self, config: ModelConfig, params: dict[str, Variable]):
        self.config = config
        self.params = params
        self.last_forward: ForwardRecord | None = None

    def parameters(self) -> list[Variable]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def forward(self, batch) -> MultiScaleOutput:
        cfg = self.config
        x = batch if isinstance(batch, Variable) else Variable(batch)
        n, c, h, w = x.shape
        if (c, h, w) != (cfg.input_channels, cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected input [N,{cfg.input_channels},{cfg.input_size},{cfg.input_size}], "
                f"got {tuple(x.shape)}")
        p = self.params
        slope = cfg.activation_slope
        encoder_ids = []

        a = x
        for i in range(cfg.stages):
            a = T.leaky_relu(T.conv2d(a, p[f"enc{i}.conv1.w"], p[f"enc{i}.conv1.b"], 1, 1), slope)
            encoder_ids.append(a.node_id)
            a = T.leaky_relu(T.conv2d(a, p[f"enc{i}.conv2.w"], p[f"enc{i}.conv2.b"], 2, 1), slope)
            encoder_ids.append(a.node_id)

        z = T.leaky_relu(T.conv2d(a, p["bottleneck.w"], p["bottleneck.b"], 1, 0), slope)
        expect = (n, cfg.bottleneck_channels, cfg.bottleneck_size, cfg.bottleneck_size)
        assert z.shape == expect, f"bottleneck shape {z.shape} != {expect}"

        d = z
        heads = []
        for j in range(cfg.stages):
            d = T.leaky_relu(T.conv2d_transpose(d, p[f"dec{j}.up.w"], p[f"dec{j}.up.b"], 2, 0), slope)
            d = T.leaky_relu(T.conv2d(d, p[f"dec{j}.conv.w"], p[f"dec{j}.conv.b"], 1, 1), slope)
            heads.append(T.conv2d(d, p[f"head{j}.w"], p[f"head{j}.b"], 1, 0))

        self.last_forward = ForwardRecord(
            tape=T.active_tape(), input_id=x.node_id, encoder_ids=encoder_ids,
            bottleneck_id=z.node_id, head_ids=[hd.node_id for hd in heads])
        return MultiScaleOutput(heads)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build(config: ModelConfig, seed: int, dtype=np.float32) -> AutoencoderModel:
    """Glorot-uniform weights, zero biases; identical seed gives identical bits."""
    rng = np.random.default_rng(seed)
    params: dict[str, Variable] = {}

    def conv_param(name, cout, cin, k):
        w = _glorot(rng, (cout, cin, k, k), cin * k * k, cout * k * k, dtype)
        params[f"{name}.w"] = Variable(w, requires_grad=True)
        params[f"{name}.b"] = Variable(np.zeros(cout, dtype=dtype), requires_grad=True)

    def tconv_param(name, cin, cout, k):
        w = _glorot(rng, (cin, cout, k, k), cin * k * k, cout * k * k, dtype)
        params[f"{name}.w"] = Variable(w, requires_grad=True)
        params[f"{name}.b"] = Variable(np.zeros(cout, dtype=dtype), requires_grad=True)

    cin = config.input_channels
    for i in range(config.stages):
        w_i = config.stage_width(i)
        conv_param(f"enc{i}.conv1", w_i, cin, 3)
        conv_param(f"enc{i}.conv2", w_i, w_i, 3)
        cin = w_i

    conv_param("bottleneck", config.bottleneck_channels, cin, 1)

    cin = config.bottleneck_channels
    for j in range(config.stages):
        d_j = config.stage_width(config.stages - 1 - j)
        tconv_param(f"dec{j}.up", cin, d_j, 2)
        conv_param(f"dec{j}.conv", d_j, d_j, 3)
        conv_param(f"head{j}", config.input_channels, d_j, 1)
        cin = d_j

    return AutoencoderModel(config, params)


def _pool_pyramid(target: np.ndarray, levels: int) -> list[np.ndarray]:
    """Target downsampled by repeated 2x2 mean pooling, coarse to fine."""
    pyr = [target]
    for _ in range(levels - 1):
        pyr.append(T.avg_pool2(pyr[-1]).value)
    return pyr[::-1]


def mcnn_loss(output: MultiScaleOutput, target) -> Variable:
    """Sum over scales of the L1 distance to the pooled target, weight 1 each."""
    target = target.value if isinstance(target, Variable) else np.asarray(target)
    if tuple(output.finest.shape) != target.shape:
        raise ValueError(
            f"target shape {target.shape} does not match finest head {tuple(output.finest.shape)}")
    pyramid = _pool_pyramid(target, len(output.heads))
    loss = None
    for head, level in zip(output.heads, pyramid):
        term = T.l1_loss(head, level)
        loss = term if loss is None else T.add(loss, term)
    return loss


def reachable_without(entries: list[TapeEntry], sources, blocked_id: int, targets) -> bool:
    """True iff some target node is reachable from a source while avoiding
    the blocked node, following recorded data-flow edges."""
    succ: dict[int, list[int]] = {}
    for e in entries:
        for i in e.input_ids:
            succ.setdefault(i, []).append(e.output_id)
    targets = set(targets)
    seen = set()
    stack = [s for s in sources if s != blocked_id]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        if node in targets:
            return True
        for nxt in succ.get(node, ()):
            if nxt != blocked_id and nxt not in seen:
                stack.append(nxt)
    return False


def assert_no_skip_connections(model: AutoencoderModel,
                               record: ForwardRecord | None = None) -> bool:
    """True iff every encoder-activation-to-head path runs through the bottleneck."""
    rec = record or model.last_forward
    if rec is None or rec.tape is None:
        raise ValueError("run a forward pass under an active Tape first")
    return not reachable_without(rec.tape.entries, rec.encoder_ids,
                                 rec.bottleneck_id, rec.head_ids)
