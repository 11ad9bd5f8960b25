"""Synthetic detection benchmark and the experiments run on it.

The generating system has a rotating two-dimensional "action" subspace and
a slowly drifting context subspace. Labels are thresholded projections of
the action pair onto evenly spaced directions, so each label is on for a
stretch of frames as the state rotates past its direction. The observation
loadings of the context dimensions are a fixed linear mix of the action
loadings, so one frame confounds action with context. The context barely
moves between frames, so frame differences are almost free of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pcnet.errors import ValidationError
from pcnet.lds import Dataset, LdsSpec, generate_dataset
from pcnet.metrics import compute_savings, mean_ap
from pcnet.model import DynamicSchedule, ModelParams, PcPlacement
from pcnet.train import TrainConfig, evaluate, evaluate_with_reinit, predict, train

TEST_REINITS = (2, 4, 8, 16)
SKIP_BAND = (0.4, 0.6)


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def benchmark_spec(
    seed: int = 0,
    theta: float = 0.26,
    q: float = 0.05,
    r: float = 0.1,
    context_scale: float = 2.0,
    threshold: float = 1.2,
    state_dim: int = 16,
    obs_dim: int = 64,
    num_actions: int = 8,
) -> LdsSpec:
    """The default benchmark system; ``seed`` fixes the random loadings."""
    if state_dim < 3:
        raise ValidationError(f"state_dim must be >= 3, got {state_dim}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0xB3])))
    A = np.eye(state_dim)
    # contract the rotating pair so its stationary variance stays at 1
    A[:2, :2] = math.sqrt(max(1.0 - q * q, 0.0)) * rotation(theta)
    nc = state_dim - 2
    C_action = rng.standard_normal((obs_dim, 2)) / math.sqrt(2)
    mix = rng.standard_normal((2, nc)) / math.sqrt(nc)
    C = np.hstack([C_action, context_scale * C_action @ mix])
    angles = 2 * np.pi * np.arange(num_actions) / num_actions
    L = np.zeros((num_actions, state_dim))
    L[:, 0], L[:, 1] = np.cos(angles), np.sin(angles)
    return LdsSpec(A, C, q, r, L, np.full(num_actions, threshold), int(seed))


def smooth_spec(seed: int = 0) -> LdsSpec:
    """A slowly rotating variant whose frames are strongly autocorrelated."""
    return benchmark_spec(seed, theta=0.1, q=0.2, r=0.1)


PRESETS = {"standard": benchmark_spec, "smooth": smooth_spec}


def preset_spec(name: str, seed: int = 0) -> LdsSpec:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name](seed)


@dataclass
class BenchmarkData:
    train: Dataset
    test: Dataset


def make_benchmark(
    spec: LdsSpec | None = None, seed: int = 0, n_train: int = 200, n_test: int = 50, T: int = 32
) -> BenchmarkData:
    """Train and test sets drawn from disjoint random streams of one seed."""
    spec = spec or benchmark_spec()
    train_set, test_set = generate_dataset(spec, T, n_train + n_test, seed).split(n_train)
    return BenchmarkData(train_set, test_set)


def benchmark_config(seed: int = 0, **overrides) -> TrainConfig:
    """Training settings used by every benchmark experiment.

    The network is a single linear layer: the best detector for a linear
    Gaussian system is close to linear, and a linear corrective network
    keeps skipped differences additive (see ``select_skip_threshold``).
    """
    base = dict(learning_rate=0.03, momentum=0.9, batch_size=32, bptt_window=4, epochs=30, seed=seed, hidden=())
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class ComparisonResult:
    single_frame: float
    late_fusion: float
    predictive_corrective: dict[int, float] = field(default_factory=dict)  # test reinit -> mAP

    @property
    def pc_at_train_rate(self) -> float:
        return self.predictive_corrective[4]


def compare_models(data: BenchmarkData, seed: int = 0, test_reinits=TEST_REINITS) -> ComparisonResult:
    """Train the three models with the same settings and evaluate on the test set."""
    results = {}
    for kind in ("single-frame", "late-fusion"):
        fit = train(benchmark_config(seed, model=kind), data.train)
        results[kind] = evaluate(fit.params, data.test, kind).mean_ap
    pc = train(benchmark_config(seed), data.train)
    by_rate = {k: evaluate_with_reinit(pc.params, data.test, k, pc.placement).mean_ap for k in test_reinits}
    return ComparisonResult(results["single-frame"], results["late-fusion"], by_rate)


def frame_change_norms(dataset: Dataset) -> np.ndarray:
    """RMS change between consecutive frames, pooled over all sequences."""
    frames = dataset.frames()
    return np.sqrt(np.mean(np.diff(frames, axis=1) ** 2, axis=2)).ravel()


@dataclass
class SkipSelection:
    threshold: float
    val_map: float
    val_skip_fraction: float
    candidates: list[tuple[float, float, float]]  # (threshold, val mAP, val skip fraction)


def select_skip_threshold(
    params: ModelParams,
    placement: PcPlacement,
    val: Dataset,
    band: tuple[float, float] = SKIP_BAND,
    target: float | None = None,
    num_candidates: int = 25,
    max_frames: int = 4,
) -> SkipSelection:
    """Choose a skip threshold on held-out data.

    Candidates are quantiles of the consecutive-frame change norms. Among
    those whose validation skip fraction lies in ``band``, the default picks
    the smallest threshold (the savings target at the least accuracy risk);
    with ``target`` set it picks the fraction closest to ``target`` instead.
    A skipped frame's change is folded into the next correction, which is
    exact only when the corrective network is linear.
    """
    norms = frame_change_norms(val)
    cands = []
    for qq in np.linspace(0.2, 0.8, num_candidates):
        tau = float(np.quantile(norms, qq))
        schedule = DynamicSchedule.dynamic(tau, max_frames=max_frames)
        logits, actions = predict(params, val, placement=placement, schedule=schedule)
        cands.append((tau, mean_ap(logits, val.labels()).mean_ap, compute_savings(actions)[0]))
    inside = [c for c in cands if band[0] <= c[2] <= band[1]]
    if not inside:
        raise ValidationError(f"no candidate threshold skips between {band[0]:.0%} and {band[1]:.0%} of frames")
    best = inside[0] if target is None else min(inside, key=lambda c: abs(c[2] - target))
    return SkipSelection(best[0], best[1], best[2], cands)


@dataclass
class SkipResult:
    full_map: float
    dynamic_map: float
    test_skip_fraction: float
    selection: SkipSelection

    @property
    def drop(self) -> float:
        return self.full_map - self.dynamic_map


def skip_experiment(
    data: BenchmarkData, seed: int = 0, n_val: int = 50, target: float | None = None, max_frames: int = 4
) -> SkipResult:
    """Hold out the last ``n_val`` training sequences to choose the skip threshold,
    train on the rest, and compare full and dynamic computation on the test set."""
    n_total = len(data.train.sequences)
    n_fit = n_total - n_val
    if n_fit < 1 or n_val < 1:
        raise ValidationError(f"cannot hold out {n_val} of {n_total} training sequences")
    fit_set, val_set = data.train.split(n_fit)
    pc = train(benchmark_config(seed), fit_set)
    sel = select_skip_threshold(pc.params, pc.placement, val_set, target=target, max_frames=max_frames)
    full = evaluate(pc.params, data.test, placement=pc.placement).mean_ap
    schedule = DynamicSchedule.dynamic(sel.threshold, max_frames=max_frames)
    logits, actions = predict(pc.params, data.test, placement=pc.placement, schedule=schedule)
    return SkipResult(full, mean_ap(logits, data.test.labels()).mean_ap, compute_savings(actions)[0], sel)


__all__ = [
    "BenchmarkData",
    "ComparisonResult",
    "PRESETS",
    "SkipResult",
    "SkipSelection",
    "benchmark_config",
    "benchmark_spec",
    "compare_models",
    "frame_change_norms",
    "make_benchmark",
    "preset_spec",
    "select_skip_threshold",
    "skip_experiment",
    "smooth_spec",
]
