"""Mini-batch SGD with momentum and backpropagation through reinit windows.

Each training example is a window of ``bptt_window`` consecutive frames: the
first frame initializes every block, the rest are corrections, and the
per-frame BCE losses of the window are summed. Gradients never cross a
window boundary.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pcnet import tensor as tn
from pcnet.errors import ValidationError
from pcnet.lds import Dataset
from pcnet.metrics import MetricsReport, mean_ap, savings_counts
from pcnet.model import (
    DynamicSchedule,
    ModelParams,
    NetworkSpec,
    PcPlacement,
    baseline_late_fusion,
    baseline_single_frame,
    f_forward,
    forward_sequence,
    history_indices,
    init_frame,
    init_params,
    late_fusion_logits,
    mlp,
    step,
)
from pcnet.tensor import Tensor

log = logging.getLogger(__name__)

MODEL_KINDS = ("predictive-corrective", "single-frame", "late-fusion")


@dataclass
class TrainConfig:
    learning_rate: float = 0.03
    momentum: float = 0.9
    batch_size: int = 32
    bptt_window: int = 4
    epochs: int = 30
    seed: int = 0
    model: str = "predictive-corrective"
    hidden: tuple[int, ...] = (32,)
    # extra blocks below the top one, as (layer_index, reinit_rate)
    lower_blocks: tuple[tuple[int, int], ...] = ()
    fusion_window: int = 4
    tied_init: bool = True
    zero_init_output: bool = False
    weight_decay: float = 0.0
    max_steps: int | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.lower_blocks = tuple((int(l), int(r)) for l, r in self.lower_blocks)
        if self.bptt_window < 1:
            raise ValidationError(f"bptt_window must be >= 1, got {self.bptt_window}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.model not in MODEL_KINDS:
            raise ValidationError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        if self.fusion_window < 1:
            raise ValidationError(f"fusion_window must be >= 1, got {self.fusion_window}")

    def network(self, input_dim: int, num_actions: int) -> NetworkSpec:
        return mlp(input_dim, self.hidden, num_actions)

    def placement(self, net: NetworkSpec, top_reinit: int | None = None) -> PcPlacement:
        top = self.bptt_window if top_reinit is None else top_reinit
        lower = tuple((l, min(r, top)) for l, r in self.lower_blocks)
        p = PcPlacement(lower + ((net.depth, top),))
        p.check(net)
        return p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["lower_blocks"] = [list(b) for b in self.lower_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[float] = field(default_factory=list)
    placement: PcPlacement | None = None
    config: TrainConfig | None = None

    def write_loss_csv(self, path: str | Path) -> None:
        write_loss_csv(path, self.losses)


def write_loss_csv(path: str | Path, losses: Sequence[float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, loss in enumerate(losses, start=1):
            w.writerow([i, repr(float(loss))])


def _windows(T: int, W: int, rng: np.random.Generator, n_seq: int) -> list[tuple[int, int]]:
    """(sequence, start) pairs: per sequence a random offset, then back-to-back windows."""
    out = []
    for s in range(n_seq):
        offset = int(rng.integers(0, T - W + 1)) % W if T > W else 0
        out += [(s, start) for start in range(offset, T - W + 1, W)]
    return out


def window_loss(
    params: ModelParams,
    config: TrainConfig,
    placement: PcPlacement | None,
    frames: np.ndarray,
    labels: np.ndarray,
    seq_idx: np.ndarray,
    starts: np.ndarray,
) -> Tensor:
    """Summed per-frame BCE over a batch of windows, recorded on the tape."""
    W = config.bptt_window
    cols = starts[:, None] + np.arange(W)[None, :]
    X = frames[seq_idx[:, None], cols]  # B×W×m
    Y = labels[seq_idx[:, None], cols].astype(np.float64)
    B, _, m = X.shape
    if config.model == "single-frame":
        logits = f_forward(params, Tensor(X.reshape(B * W, m)))
        return tn.scale(tn.bce_loss(logits, Tensor(Y.reshape(B * W, -1))), W)
    if config.model == "late-fusion":
        idx = history_indices(frames.shape[1], config.fusion_window)[cols]  # B×W×k
        stack = [
            Tensor(frames[seq_idx[:, None], idx[:, :, k]].reshape(B * W, m)) for k in range(config.fusion_window)
        ]
        logits = late_fusion_logits(params, stack)
        return tn.scale(tn.bce_loss(logits, Tensor(Y.reshape(B * W, -1))), W)
    _, state = init_frame(params, Tensor(X[:, 0]), placement)
    loss = tn.bce_loss(state.logits, Tensor(Y[:, 0]))
    for t in range(1, W):
        _, state, _ = step(params, state, Tensor(X[:, t]))
        loss = tn.add(loss, tn.bce_loss(state.logits, Tensor(Y[:, t])))
    return loss


def train(
    config: TrainConfig, dataset: Dataset, init: ModelParams | None = None, progress: bool = False
) -> TrainResult:
    """Fit f (and g) on ``dataset``; deterministic given ``config.seed``.

    ``init`` warm-starts from existing weights, e.g. a trained single-frame
    model whose f is copied into both networks.
    """
    frames = dataset.frames()
    labels = dataset.labels()
    N, T, m = frames.shape
    W = config.bptt_window
    if T < W:
        raise ValidationError(f"bptt_window {W} is longer than the shortest sequence ({T} frames)")
    a = labels.shape[-1]
    net = config.network(m, a)
    if init is not None:
        params = init.copy()
        if params.net != net:
            raise ValidationError("warm-start weights do not match the configured network")
        if config.tied_init:
            params.tie_g_to_f()
    else:
        params = init_params(net, config.seed, config.tied_init, config.zero_init_output)
    placement = config.placement(net) if config.model == "predictive-corrective" else None
    tensors = params.tensors() if config.model == "predictive-corrective" else [
        t for layer in params.f if layer is not None for t in layer.values()
    ]
    for t in tensors:
        t.requires_grad = True
    velocity = [np.zeros_like(t.data) for t in tensors]

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(config.seed), 0x7A1])))
    losses: list[float] = []
    steps = 0
    for epoch in range(config.epochs):
        wins = _windows(T, W, rng, N)
        order = rng.permutation(len(wins))
        for b0 in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            batch = np.array([wins[i] for i in order[b0 : b0 + config.batch_size]])
            for t in tensors:
                t.grad = None
            tn.clear_tape()
            loss = window_loss(params, config, placement, frames, labels, batch[:, 0], batch[:, 1])
            tn.backward(loss)
            for t, v in zip(tensors, velocity):
                grad = t.grad if t.grad is not None else np.zeros_like(t.data)
                if config.weight_decay:
                    grad = grad + config.weight_decay * t.data
                v *= config.momentum
                v += grad
                t.data = t.data - config.learning_rate * v
            losses.append(loss.item() / W)
            steps += 1
        if progress:
            log.info("epoch %d: loss %.5f", epoch + 1, np.mean(losses[-max(1, len(order) // config.batch_size) :]))
    for t in tensors:
        t.requires_grad = False
        t.grad = None
    tn.clear_tape()
    return TrainResult(params, losses, placement, config)


# --- evaluation -------------------------------------------------------------------


def predict(
    params: ModelParams,
    dataset: Dataset,
    model: str = "predictive-corrective",
    placement: PcPlacement | None = None,
    schedule: DynamicSchedule | None = None,
    fusion_window: int = 4,
) -> tuple[np.ndarray, list]:
    """Logits (N×T×a) and per-frame action logs for every sequence."""
    frames = dataset.frames()
    if model == "single-frame":
        logits = baseline_single_frame(params, frames)
        return logits, [["initialized"] * frames.shape[1] for _ in range(frames.shape[0])]
    if model == "late-fusion":
        logits = baseline_late_fusion(params, frames, fusion_window)
        return logits, [["initialized"] * frames.shape[1] for _ in range(frames.shape[0])]
    out = forward_sequence(params, frames, placement, schedule)
    return out.logits, out.actions


def evaluate(
    params: ModelParams,
    dataset: Dataset,
    model: str = "predictive-corrective",
    placement: PcPlacement | None = None,
    schedule: DynamicSchedule | None = None,
    fusion_window: int = 4,
    with_curves: bool = False,
) -> MetricsReport:
    logits, actions = predict(params, dataset, model, placement, schedule, fusion_window)
    report = mean_ap(logits, dataset.labels(), with_curves=with_curves)
    report.frames_processed, report.frames_skipped, report.frames_reinitialized = savings_counts(actions)
    return report


def with_top_reinit(placement: PcPlacement, reinit: int) -> PcPlacement:
    *lower, (top, _) = placement.blocks
    return PcPlacement(tuple((l, min(r, reinit)) for l, r in lower) + ((top, reinit),))


def evaluate_with_reinit(
    params: ModelParams, dataset: Dataset, test_reinit: int, placement: PcPlacement | None = None
) -> MetricsReport:
    """mAP with every block on a static clock, the top block reinitializing every ``test_reinit`` frames."""
    if test_reinit < 1:
        raise ValidationError(f"test_reinit must be >= 1, got {test_reinit}")
    placement = placement or PcPlacement(((params.net.depth, test_reinit),))
    return evaluate(params, dataset, "predictive-corrective", with_top_reinit(placement, test_reinit))
