"""Predictive-corrective networks.

An initial network ``f`` sets each block's memory from a single frame; a
corrective network ``g`` with the same layer shapes (but no bias terms, so
``g(0) == 0``) turns the change in a block's input into a change of its
output:

    z_hat[t] = z_hat[t-1] + g(z_in[t] - z_in[t-1])

Blocks sit at layer boundaries. Block ``k`` owns the layers between the
previous block (or the frame) and its own layer index; any layers above the
top block are applied with ``f`` weights to the accumulated activation.
Logits accumulate additively; probabilities are read out with a sigmoid.

Activations are row-major ``(batch, features)`` tensors throughout. Convolution
layers take and return flattened feature rows and reshape internally.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from pcnet import tensor as tn
from pcnet.errors import ContractError, DimensionError, FormatError, ValidationError
from pcnet.tensor import Tensor

LAYER_KINDS = ("fc", "conv", "relu", "sigmoid")
ACTIONS = ("initialized", "skipped", "corrected", "reinitialized")
NORMS = ("rms", "l2", "linf")

CHECKPOINT_MAGIC = b"PCCK"
CHECKPOINT_VERSION = 1


# --- network description --------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    # conv geometry: input (channels, height, width), kernel size, stride, padding
    in_shape: tuple[int, int, int] | None = None
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0

    @property
    def has_params(self) -> bool:
        return self.kind in ("fc", "conv")

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        ho = (h + 2 * self.pad - self.kernel) // self.stride + 1
        wo = (w + 2 * self.pad - self.kernel) // self.stride + 1
        return self.out_channels, ho, wo

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "fc":
            return (self.in_dim, self.out_dim)
        return (self.out_channels, self.in_shape[0], self.kernel, self.kernel)

    def bias_shape(self) -> tuple[int, ...]:
        return (self.out_dim,) if self.kind == "fc" else (self.out_channels,)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.kind == "conv":
            d.update(
                in_shape=list(self.in_shape),
                out_channels=self.out_channels,
                kernel=self.kernel,
                stride=self.stride,
                pad=self.pad,
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        if d.get("in_shape") is not None:
            d["in_shape"] = tuple(d["in_shape"])
        return cls(**d)


def fc(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec("fc", in_dim, out_dim)


def activation(kind: str, dim: int) -> LayerSpec:
    return LayerSpec(kind, dim, dim)


def conv(in_shape: tuple[int, int, int], out_channels: int, kernel: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    c, h, w = in_shape
    if kernel > h + 2 * pad or kernel > w + 2 * pad or stride < 1:
        raise DimensionError(f"conv layer: kernel {kernel} does not fit input {in_shape} with pad {pad}")
    tmp = LayerSpec("conv", c * h * w, 0, tuple(in_shape), out_channels, kernel, stride, pad)
    co, ho, wo = tmp.out_shape
    return replace(tmp, out_dim=co * ho * wo)


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    layers: tuple[LayerSpec, ...]
    num_actions: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def output_dim(self) -> int:
        return self.num_actions

    def dim(self, l: int) -> int:
        """Width of activation z^l (z^0 is the frame)."""
        return self.input_dim if l == 0 else self.layers[l - 1].out_dim

    def validate(self) -> None:
        if not self.layers:
            raise ValidationError("network needs at least one layer")
        prev = self.input_dim
        for i, layer in enumerate(self.layers, start=1):
            if layer.kind not in LAYER_KINDS:
                raise ValidationError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.in_dim != prev:
                raise DimensionError(f"layer {i} ({layer.kind}) expects {layer.in_dim} inputs, previous layer gives {prev}")
            if layer.kind in ("relu", "sigmoid") and layer.out_dim != layer.in_dim:
                raise DimensionError(f"layer {i}: activation must preserve width")
            if layer.kind == "conv":
                c, h, w = layer.in_shape
                if c * h * w != layer.in_dim:
                    raise DimensionError(f"layer {i}: conv in_shape {layer.in_shape} != in_dim {layer.in_dim}")
                co, ho, wo = layer.out_shape
                if co * ho * wo != layer.out_dim or ho < 1 or wo < 1:
                    raise DimensionError(f"layer {i}: conv output {layer.out_shape} != out_dim {layer.out_dim}")
            prev = layer.out_dim
        last = self.layers[-1]
        if not last.has_params or last.out_dim != self.num_actions:
            raise ValidationError(
                f"final layer must be fc/conv producing {self.num_actions} logits, got {last.kind} with {last.out_dim}"
            )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "num_actions": self.num_actions,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(d["input_dim"], tuple(LayerSpec.from_dict(x) for x in d["layers"]), d["num_actions"])


def mlp(input_dim: int, hidden: Sequence[int], num_actions: int) -> NetworkSpec:
    """fc → relu → ... → fc producing logits."""
    layers: list[LayerSpec] = []
    prev = input_dim
    for h in hidden:
        layers += [fc(prev, h), activation("relu", h)]
        prev = h
    layers.append(fc(prev, num_actions))
    return NetworkSpec(input_dim, tuple(layers), num_actions)


@dataclass(frozen=True)
class PcPlacement:
    """Where predictive-corrective blocks sit and how often each reinitializes.

    ``blocks`` holds ``(layer_index, reinit_rate)`` pairs; layer indices are
    1-based positions in ``NetworkSpec.layers``.
    """

    blocks: tuple[tuple[int, int], ...]

    def __post_init__(self):
        blocks = tuple((int(l), int(r)) for l, r in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if not blocks:
            raise ValidationError("placement needs at least one block")
        layers = [l for l, _ in blocks]
        rates = [r for _, r in blocks]
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ValidationError(f"block layer indices must be strictly increasing, got {layers}")
        if any(r < 1 for r in rates):
            raise ValidationError(f"reinit rates must be >= 1, got {rates}")
        if any(b < a for a, b in zip(rates, rates[1:])):
            raise ValidationError(f"reinit rates must not decrease with depth, got {rates}")

    @property
    def hierarchical(self) -> bool:
        return len(self.blocks) > 1

    @property
    def layers(self) -> list[int]:
        return [l for l, _ in self.blocks]

    @property
    def rates(self) -> list[int]:
        return [r for _, r in self.blocks]

    def check(self, net: NetworkSpec) -> None:
        for l, _ in self.blocks:
            if not 1 <= l <= net.depth:
                raise ValidationError(f"block at layer {l} outside network of depth {net.depth}")

    def to_dict(self) -> dict:
        return {"blocks": [list(b) for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "PcPlacement":
        return cls(tuple(tuple(b) for b in d["blocks"]))


def top_block(net: NetworkSpec, reinit: int) -> PcPlacement:
    return PcPlacement(((net.depth, reinit),))


@dataclass(frozen=True)
class DynamicSchedule:
    """How ``step`` chooses between skipping, correcting and reinitializing.

    In static mode only the placement clocks matter. In dynamic mode a block
    whose input change (measured with ``norm``) is below ``skip_threshold``
    is skipped together with everything above it, a change above
    ``reinit_threshold`` reinitializes the block, and every block is forced
    to reinitialize at least every ``max_frames_between_reinit`` frames.
    """

    mode: str = "static"
    skip_threshold: float = 0.0
    reinit_threshold: float = math.inf
    max_frames_between_reinit: int | None = None
    norm: str = "rms"

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ValidationError(f"schedule mode must be static or dynamic, got {self.mode!r}")
        if self.norm not in NORMS:
            raise ValidationError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.mode == "dynamic":
            if self.max_frames_between_reinit is None or self.max_frames_between_reinit < 1:
                raise ValidationError("dynamic schedules need max_frames_between_reinit >= 1")
            # an infinite skip threshold (skip everything) is the one allowed degenerate case
            if not (0.0 <= self.skip_threshold < self.reinit_threshold or self.skip_threshold == math.inf):
                raise ValidationError(
                    f"need 0 <= skip_threshold < reinit_threshold, got {self.skip_threshold}, {self.reinit_threshold}"
                )

    @classmethod
    def static(cls) -> "DynamicSchedule":
        return cls()

    @classmethod
    def dynamic(
        cls, skip_threshold: float, reinit_threshold: float = math.inf, max_frames: int = 4, norm: str = "rms"
    ) -> "DynamicSchedule":
        return cls("dynamic", float(skip_threshold), float(reinit_threshold), int(max_frames), norm)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "skip_threshold": _json_float(self.skip_threshold),
            "reinit_threshold": _json_float(self.reinit_threshold),
            "max_frames_between_reinit": self.max_frames_between_reinit,
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicSchedule":
        return cls(
            d.get("mode", "static"),
            float(d.get("skip_threshold", 0.0)),
            float(d.get("reinit_threshold", math.inf)),
            d.get("max_frames_between_reinit"),
            d.get("norm", "rms"),
        )


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


# --- parameters -------------------------------------------------------------


@dataclass(eq=False)
class ModelParams:
    """Weights of the initial network ``f`` and corrective network ``g``.

    ``f[i]`` is ``{"W", "b"}`` for parameterized layers and ``None`` for
    activations; ``g[i]`` holds only ``"W"``.
    """

    net: NetworkSpec
    f: list[dict | None]
    g: list[dict | None]
    tied_init: bool = True

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.f:
            if layer is not None:
                out += [layer["W"], layer["b"]]
        for layer in self.g:
            if layer is not None:
                out.append(layer["W"])
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.f, start=1):
            if layer is not None:
                out += [(f"f{i}.W", layer["W"]), (f"f{i}.b", layer["b"])]
        for i, layer in enumerate(self.g, start=1):
            if layer is not None:
                out.append((f"g{i}.W", layer["W"]))
        return out

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors():
            t.requires_grad = flag
        return self

    def copy(self) -> "ModelParams":
        def dup(layers):
            return [None if x is None else {k: Tensor(v.data.copy()) for k, v in x.items()} for x in layers]

        return ModelParams(self.net, dup(self.f), dup(self.g), self.tied_init)

    def tie_g_to_f(self) -> None:
        """Copy f's weights into g (biases have no counterpart in g)."""
        for fl, gl in zip(self.f, self.g):
            if fl is not None:
                gl["W"] = Tensor(fl["W"].data.copy(), requires_grad=gl["W"].requires_grad)

    def validate(self) -> None:
        net = self.net
        if len(self.f) != net.depth or len(self.g) != net.depth:
            raise DimensionError("parameter lists must have one entry per layer")
        for i, (layer, fl, gl) in enumerate(zip(net.layers, self.f, self.g), start=1):
            if layer.has_params:
                if fl is None or gl is None:
                    raise DimensionError(f"layer {i}: missing weights")
                if fl["W"].shape != layer.weight_shape() or gl["W"].shape != layer.weight_shape():
                    raise DimensionError(f"layer {i}: weight shape mismatch, expected {layer.weight_shape()}")
                if fl["b"].shape != layer.bias_shape():
                    raise DimensionError(f"layer {i}: bias shape mismatch, expected {layer.bias_shape()}")
            elif fl is not None or gl is not None:
                raise DimensionError(f"layer {i}: {layer.kind} layers carry no weights")


def init_params(
    net: NetworkSpec, seed: int = 0, tied_init: bool = True, zero_output: bool = False
) -> ModelParams:
    """He-normal weights, zero biases. With ``tied_init`` g starts as a copy of f."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x5EED])))
    f: list[dict | None] = []
    g: list[dict | None] = []
    last = net.depth - 1
    for i, layer in enumerate(net.layers):
        if not layer.has_params:
            f.append(None)
            g.append(None)
            continue
        shape = layer.weight_shape()
        fan_in = layer.in_dim if layer.kind == "fc" else int(np.prod(shape[1:]))
        std = math.sqrt(2.0 / fan_in)
        W = rng.standard_normal(shape) * std
        if zero_output and i == last:
            W = np.zeros(shape)
        f.append({"W": Tensor(W), "b": Tensor(np.zeros(layer.bias_shape()))})
        Wg = W.copy() if tied_init else rng.standard_normal(shape) * std
        if zero_output and i == last:
            Wg = np.zeros(shape)
        g.append({"W": Tensor(Wg)})
    return ModelParams(net, f, g, tied_init)


# --- layer evaluation -------------------------------------------------------


def apply_layer(layer: LayerSpec, x: Tensor, weights: dict | None, bias: bool = True) -> Tensor:
    if layer.kind == "relu":
        return tn.relu(x)
    if layer.kind == "sigmoid":
        return tn.sigmoid(x)
    if layer.kind == "fc":
        y = tn.matmul(x, weights["W"])
        return tn.add_bias(y, weights["b"]) if bias else y
    n = x.shape[0]
    y = tn.conv2d(tn.reshape(x, (n,) + tuple(layer.in_shape)), weights["W"], layer.stride, layer.pad)
    if bias:
        y = tn.add_bias(y, weights["b"])
    return tn.reshape(y, (n, layer.out_dim))


def run_layers(net: NetworkSpec, weights: list, x: Tensor, lo: int, hi: int, bias: bool = True) -> Tensor:
    """Map activation z^lo to z^hi through layers lo+1..hi."""
    for i in range(lo, hi):
        x = apply_layer(net.layers[i], x, weights[i], bias)
    return x


def f_forward(params: ModelParams, frames: Tensor) -> Tensor:
    return run_layers(params.net, params.f, frames, 0, params.net.depth)


# --- recurrent state --------------------------------------------------------


@dataclass
class BlockState:
    prev_input: Tensor  # input at the last processed frame
    prev_output: Tensor
    since_reinit: int = 0
    last_delta_norm: float = 0.0
    # input at the previous frame, processed or not; skip decisions compare
    # against it so that they do not depend on earlier skips
    last_seen: Tensor | None = None


@dataclass
class PcState:
    placement: PcPlacement
    blocks: list[BlockState]
    logits: Tensor
    t: int = 0
    block_actions: list[str] = field(default_factory=list)

    @property
    def frame_counter(self) -> int:
        """Frames since the top block was last initialized."""
        return self.blocks[-1].since_reinit

    @property
    def batch(self) -> int:
        return self.logits.shape[0]


def _as_batch(params: ModelParams, frame) -> tuple[Tensor, bool]:
    x = frame if isinstance(frame, Tensor) else Tensor(frame)
    single = x.data.ndim == 1
    if single:
        x = tn.reshape(x, (1, x.shape[0]))
    if x.data.ndim != 2 or x.shape[1] != params.net.input_dim:
        raise DimensionError(f"frame shape {tuple(frame.shape)} does not match network input {params.net.input_dim}")
    return x, single


def _readout(state: PcState, single: bool) -> np.ndarray:
    probs = tn._sigmoid(state.logits.data)
    return probs[0] if single else probs


def _segments(params: ModelParams, placement: PcPlacement) -> list[tuple[int, int]]:
    placement.check(params.net)
    bounds = [0] + placement.layers
    return list(zip(bounds[:-1], bounds[1:]))


def _top(params: ModelParams, placement: PcPlacement, z: Tensor) -> Tensor:
    return run_layers(params.net, params.f, z, placement.layers[-1], params.net.depth)


def init_frame(params: ModelParams, frame, placement: PcPlacement | None = None) -> tuple[np.ndarray, PcState]:
    """Run ``f`` on one frame (or a batch of frames) and fill every block's memory."""
    placement = placement or top_block(params.net, 1)
    x, single = _as_batch(params, frame)
    blocks = []
    z = x
    for lo, hi in _segments(params, placement):
        out = run_layers(params.net, params.f, z, lo, hi)
        blocks.append(BlockState(prev_input=z, prev_output=out))
        z = out
    state = PcState(placement, blocks, _top(params, placement, z), t=0)
    state.block_actions = ["initialized"] * len(blocks)
    return _readout(state, single), state


def _advance(params: ModelParams, state: PcState, x: Tensor, reinit_upto: int) -> None:
    """Blocks ``0..reinit_upto-1`` re-run f, the rest apply corrections."""
    z = x
    actions = []
    for k, ((lo, hi), blk) in enumerate(zip(_segments(params, state.placement), state.blocks)):
        if k < reinit_upto:
            blk.last_delta_norm = _norm(z.data - blk.prev_input.data, "rms")
            out = run_layers(params.net, params.f, z, lo, hi)
            blk.since_reinit = 0
            actions.append("reinitialized")
        else:
            diff = tn.sub(z, blk.prev_input)
            blk.last_delta_norm = _norm(diff.data, "rms")
            out = tn.add(blk.prev_output, run_layers(params.net, params.g, diff, lo, hi, bias=False))
            blk.since_reinit += 1
            actions.append("corrected")
        blk.prev_input, blk.prev_output, blk.last_seen = z, out, None
        z = out
    state.logits = _top(params, state.placement, z)
    state.t += 1
    state.block_actions = actions


def correct_frame(params: ModelParams, state: PcState | None, frame) -> tuple[np.ndarray, PcState]:
    """Apply one corrective update to every block; mutates and returns ``state``."""
    if state is None or not state.blocks:
        raise ContractError("correct_frame needs a state produced by init_frame")
    x, single = _as_batch(params, frame)
    if x.shape[0] != state.batch:
        raise DimensionError(f"frame batch {x.shape[0]} does not match state batch {state.batch}")
    _advance(params, state, x, reinit_upto=0)
    return _readout(state, single), state


def _clock_reinit_depth(state: PcState, clocks: Sequence[int]) -> int:
    """Number of bottom blocks whose clock fires; a firing block drags all blocks below it along."""
    depth = 0
    for k, (blk, rate) in enumerate(zip(state.blocks, clocks)):
        if blk.since_reinit + 1 >= rate:
            depth = k + 1
    return depth


def _norm(x: np.ndarray, kind: str) -> float:
    if kind == "rms":
        return float(np.sqrt(np.mean(x * x)))
    if kind == "l2":
        return float(np.sqrt(np.sum(x * x)))
    return float(np.max(np.abs(x)))


def step(
    params: ModelParams, state: PcState | None, frame, schedule: DynamicSchedule | None = None
) -> tuple[np.ndarray, PcState, str]:
    """Process one frame, choosing per block to skip, reinitialize or correct.

    Returns ``(predictions, state, action)`` where ``action`` describes the
    top block. A block skips when its input changed by less than the skip
    threshold since the previous frame. Skipped blocks keep their memories
    (the next correction is taken relative to the last processed input) but
    their clocks still run.
    """
    if state is None or not state.blocks:
        raise ContractError("step needs a state produced by init_frame")
    schedule = schedule or DynamicSchedule.static()
    x, single = _as_batch(params, frame)
    if x.shape[0] != state.batch:
        raise DimensionError(f"frame batch {x.shape[0]} does not match state batch {state.batch}")
    rates = state.placement.rates

    if schedule.mode == "static":
        _advance(params, state, x, _clock_reinit_depth(state, rates))
        return _readout(state, single), state, state.block_actions[-1]

    if state.batch != 1:
        raise ValidationError("dynamic schedules run one stream at a time")
    cap = schedule.max_frames_between_reinit
    z = x
    actions: list[str] = []
    segs = _segments(params, state.placement)
    for k, ((lo, hi), blk) in enumerate(zip(segs, state.blocks)):
        ref = blk.prev_input if blk.last_seen is None else blk.last_seen
        n = _norm(z.data - ref.data, schedule.norm)
        blk.last_delta_norm = n
        blk.last_seen = z
        if n < schedule.skip_threshold:
            for rest in state.blocks[k:]:
                rest.since_reinit += 1
            actions += ["skipped"] * (len(segs) - k)
            state.t += 1
            state.block_actions = actions
            return _readout(state, single), state, "skipped"
        if n > schedule.reinit_threshold or blk.since_reinit + 1 >= min(rates[k], cap):
            out = run_layers(params.net, params.f, z, lo, hi)
            blk.since_reinit = 0
            actions.append("reinitialized")
        else:
            diff = tn.sub(z, blk.prev_input)
            out = tn.add(blk.prev_output, run_layers(params.net, params.g, diff, lo, hi, bias=False))
            blk.since_reinit += 1
            actions.append("corrected")
        blk.prev_input, blk.prev_output = z, out
        z = out
    state.logits = _top(params, state.placement, z)
    state.t += 1
    state.block_actions = actions
    return _readout(state, single), state, actions[-1]


@dataclass
class SequenceOutput:
    logits: np.ndarray  # T×a, or N×T×a for batched static runs
    actions: list  # per-frame top-block action (list of lists when batched)
    block_actions: list = field(default_factory=list)

    @property
    def probabilities(self) -> np.ndarray:
        return tn._sigmoid(self.logits)


def forward_sequence(
    params: ModelParams,
    frames,
    placement: PcPlacement | None = None,
    schedule: DynamicSchedule | None = None,
) -> SequenceOutput:
    """Logits for every frame: frame 0 initializes, later frames step.

    ``frames`` is T×m, or N×T×m to run N sequences side by side (static
    schedules only; dynamic ones are run per sequence).
    """
    placement = placement or top_block(params.net, 1)
    schedule = schedule or DynamicSchedule.static()
    placement.check(params.net)
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        if schedule.mode == "dynamic":
            outs = [forward_sequence(params, seq, placement, schedule) for seq in arr]
            return SequenceOutput(
                np.stack([o.logits for o in outs]),
                [o.actions for o in outs],
                [o.block_actions for o in outs],
            )
        return _forward_batched(params, arr, placement)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise DimensionError(f"frames must be T×m with T >= 1, got {arr.shape}")
    with tn.no_grad():
        _, state = init_frame(params, arr[0], placement)
        logits = [state.logits.data[0].copy()]
        actions = ["initialized"]
        block_actions = [list(state.block_actions)]
        for t in range(1, arr.shape[0]):
            _, state, act = step(params, state, arr[t], schedule)
            logits.append(state.logits.data[0].copy())
            actions.append(act)
            block_actions.append(list(state.block_actions))
    return SequenceOutput(np.stack(logits), actions, block_actions)


def _forward_batched(params: ModelParams, arr: np.ndarray, placement: PcPlacement) -> SequenceOutput:
    N, T, _ = arr.shape
    with tn.no_grad():
        _, state = init_frame(params, arr[:, 0], placement)
        logits = [state.logits.data.copy()]
        actions = ["initialized"]
        for t in range(1, T):
            _advance(params, state, Tensor(arr[:, t]), _clock_reinit_depth(state, placement.rates))
            logits.append(state.logits.data.copy())
            actions.append(state.block_actions[-1])
    out = np.stack(logits, axis=1)
    return SequenceOutput(out, [list(actions) for _ in range(N)])


# --- baselines ----------------------------------------------------------------


def baseline_single_frame(params: ModelParams, frames) -> np.ndarray:
    """Per-frame logits of ``f`` with no temporal coupling (T×m or N×T×m input)."""
    arr = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float64)
    if arr.ndim not in (2, 3) or arr.shape[-1] != params.net.input_dim:
        raise DimensionError(f"frames shape {arr.shape} does not match network input {params.net.input_dim}")
    flat = arr.reshape(-1, arr.shape[-1])
    with tn.no_grad():
        out = f_forward(params, Tensor(flat)).data
    return out.reshape(arr.shape[:-1] + (params.net.num_actions,))


def history_indices(T: int, window: int) -> np.ndarray:
    """T×window frame indices for [t, t-1, ..., t-window+1], clamped to frame 0."""
    if window < 1:
        raise ValidationError(f"late-fusion window must be >= 1, got {window}")
    t = np.arange(T)[:, None] - np.arange(window)[None, :]
    return np.maximum(t, 0)


def late_fusion_logits(params: ModelParams, frame_stack: Sequence[Tensor]) -> Tensor:
    """Average the penultimate activations of ``f`` over ``frame_stack`` (each B×m,
    weights tied across frames) and apply the final layer."""
    net = params.net
    pooled = None
    for x in frame_stack:
        h = run_layers(net, params.f, x, 0, net.depth - 1)
        pooled = h if pooled is None else tn.add(pooled, h)
    pooled = tn.scale(pooled, 1.0 / len(frame_stack))
    return run_layers(net, params.f, pooled, net.depth - 1, net.depth)


def baseline_late_fusion(params: ModelParams, frames, window: int = 4) -> np.ndarray:
    arr = np.asarray(frames.data if isinstance(frames, Tensor) else frames, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[-1] != params.net.input_dim or arr.shape[1] < 1:
        raise DimensionError(f"frames shape {arr.shape} does not match network input {params.net.input_dim}")
    N, T, m = arr.shape
    idx = history_indices(T, window)
    with tn.no_grad():
        stack = [Tensor(arr[:, idx[:, k]].reshape(N * T, m)) for k in range(window)]
        out = late_fusion_logits(params, stack).data.reshape(N, T, -1)
    return out[0] if squeeze else out


# --- checkpoints ----------------------------------------------------------------


def _pack_tensor(arr: np.ndarray) -> bytes:
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path: str | Path, params: ModelParams, placement: PcPlacement | None = None, meta: dict | None = None) -> None:
    """Write the versioned PCCK layout (little-endian).

    magic "PCCK" | u16 version | u32 n | header JSON (n bytes: network,
    placement, tied_init, meta) | f tensors (W, b per parameterized layer) |
    g tensors (W per parameterized layer). Each tensor is u8 ndim, u32 dims,
    f8 data.
    """
    header = {
        "network": params.net.to_dict(),
        "placement": placement.to_dict() if placement else None,
        "tied_init": params.tied_init,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob]
    for layer in params.f:
        if layer is not None:
            parts += [_pack_tensor(layer["W"].data), _pack_tensor(layer["b"].data)]
    for layer in params.g:
        if layer is not None:
            parts.append(_pack_tensor(layer["W"].data))
    Path(path).write_bytes(b"".join(parts))


@dataclass
class Checkpoint:
    params: ModelParams
    placement: PcPlacement | None
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a PCCK checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    off = 10
    try:
        (n,) = struct.unpack_from("<I", raw, 6)
        header = json.loads(raw[off : off + n].decode())
        off += n
        net = NetworkSpec.from_dict(header["network"])
        placement = PcPlacement.from_dict(header["placement"]) if header.get("placement") else None

        def take(expected: tuple[int, ...]) -> Tensor:
            nonlocal off
            (ndim,) = struct.unpack_from("<B", raw, off)
            shape = struct.unpack_from(f"<{ndim}I", raw, off + 1)
            off += 1 + 4 * ndim
            if tuple(shape) != tuple(expected):
                raise FormatError(f"{path}: tensor shape {shape} does not match network ({expected})")
            count = int(np.prod(shape))
            if off + 8 * count > len(raw):
                raise FormatError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
            off += 8 * count
            return Tensor(arr)

        f = [
            {"W": take(l.weight_shape()), "b": take(l.bias_shape())} if l.has_params else None for l in net.layers
        ]
        g = [{"W": take(l.weight_shape())} if l.has_params else None for l in net.layers]
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    params = ModelParams(net, f, g, bool(header.get("tied_init", True)))
    params.validate()
    if placement is not None:
        placement.check(net)
    return Checkpoint(params, placement, header.get("meta", {}))

