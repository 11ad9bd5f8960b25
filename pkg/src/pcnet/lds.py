"""Synthetic linear dynamic system data and its exact Kalman posterior.

Sequences follow

    x_0 ~ N(0, I)
    x_t = A x_{t-1} + q * eps_t
    y_t = C x_t     + r * eta_t

with labels ``labels[t, j] = (label_matrix @ x_t)[j] > label_threshold[j]``.

Random numbers come from numpy's counter-based Philox bit generator keyed by
``SeedSequence([seed, stream])``. For one sequence the draws are taken in this
order: ``x_0`` (d values), then ``eps`` as a (T-1)×d block, then ``eta`` as a
T×m block, all via ``Generator.standard_normal``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from pcnet.errors import (
    DimensionError,
    FormatError,
    NumericalError,
    UndefinedCorrelationError,
    ValidationError,
)

MAX_SPECTRAL_RADIUS = 1.05
BALANCE_RANGE = (0.02, 0.98)

DATASET_MAGIC = b"PCDS"
DATASET_VERSION = 1


@dataclass(frozen=True, eq=False)
class LdsSpec:
    A: np.ndarray
    C: np.ndarray
    q: float
    r: float
    label_matrix: np.ndarray
    label_threshold: np.ndarray
    seed: int = 0

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        C = np.array(self.C, dtype=np.float64)
        L = np.array(self.label_matrix, dtype=np.float64)
        thr = np.atleast_1d(np.array(self.label_threshold, dtype=np.float64))
        for name, val in (("A", A), ("C", C), ("label_matrix", L), ("label_threshold", thr)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "q", float(self.q))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "seed", int(self.seed))
        self.validate()

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.C.shape[0]

    @property
    def num_actions(self) -> int:
        return self.label_matrix.shape[0]

    def validate(self) -> None:
        A, C, L = self.A, self.C, self.label_matrix
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise DimensionError(f"A must be square, got {A.shape}")
        d = A.shape[0]
        if C.ndim != 2 or C.shape[1] != d:
            raise DimensionError(f"C must be m×{d}, got {C.shape}")
        if L.ndim != 2 or L.shape[1] != d:
            raise DimensionError(f"label_matrix must be a×{d}, got {L.shape}")
        if self.label_threshold.shape != (L.shape[0],):
            raise DimensionError(
                f"label_threshold must have {L.shape[0]} entries, got {self.label_threshold.shape}"
            )
        if self.q < 0 or self.r < 0:
            raise ValidationError(f"noise scales must be non-negative, got q={self.q}, r={self.r}")
        for name, val in (("A", A), ("C", C), ("label_matrix", L), ("label_threshold", self.label_threshold)):
            if not np.all(np.isfinite(val)):
                raise ValidationError(f"{name} contains non-finite values")
        rho = spectral_radius(A)
        if rho > MAX_SPECTRAL_RADIUS:
            raise ValidationError(f"explosive transition matrix: spectral radius {rho:.4f} > {MAX_SPECTRAL_RADIUS}")

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "q": self.q,
            "r": self.r,
            "label_matrix": self.label_matrix.tolist(),
            "label_threshold": self.label_threshold.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LdsSpec":
        try:
            return cls(
                A=d["A"],
                C=d["C"],
                q=d["q"],
                r=d["r"],
                label_matrix=d["label_matrix"],
                label_threshold=d["label_threshold"],
                seed=d.get("seed", 0),
            )
        except KeyError as exc:
            raise ValidationError(f"LDS spec is missing field {exc.args[0]!r}") from None

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass(eq=False)
class SequenceBatch:
    frames: np.ndarray  # T×m observations
    states: np.ndarray  # T×d ground truth, for analysis only
    labels: np.ndarray  # T×a in {0, 1}
    spec_hash: str = ""

    @property
    def length(self) -> int:
        return self.frames.shape[0]

    def equals(self, other: "SequenceBatch") -> bool:
        return (
            self.spec_hash == other.spec_hash
            and np.array_equal(self.frames, other.frames)
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass
class KalmanResult:
    posterior_means: np.ndarray  # T×d
    posterior_covs: np.ndarray  # T×d×d
    gains: np.ndarray  # T×d×m


@dataclass(eq=False)
class Dataset:
    spec: LdsSpec
    sequences: list[SequenceBatch]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.sequences[0].length

    def frames(self) -> np.ndarray:
        """N×T×m array of all observations."""
        return np.stack([s.frames for s in self.sequences])

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.sequences])

    def states(self) -> np.ndarray:
        return np.stack([s.states for s in self.sequences])

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        a = Dataset(self.spec, self.sequences[:n_first], self.seed, dict(self.meta))
        b = Dataset(self.spec, self.sequences[n_first:], self.seed, dict(self.meta))
        return a, b

    def equals(self, other: "Dataset") -> bool:
        return (
            self.spec.digest() == other.spec.digest()
            and self.seed == other.seed
            and len(self.sequences) == len(other.sequences)
            and all(a.equals(b) for a, b in zip(self.sequences, other.sequences))
        )


def spectral_radius(A: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), int(stream)])))


def apply_labels(spec: LdsSpec, states: np.ndarray) -> np.ndarray:
    return (states @ spec.label_matrix.T > spec.label_threshold).astype(np.uint8)


def generate(spec: LdsSpec, T: int, seed: int | None = None, stream: int = 0) -> SequenceBatch:
    """Draw one labeled sequence of length ``T``; deterministic in (spec, T, seed, stream)."""
    if T < 2:
        raise ValidationError(f"sequence length must be at least 2, got T={T}")
    spec.validate()
    rng = rng_for(spec.seed if seed is None else seed, stream)
    d, m = spec.state_dim, spec.obs_dim
    x0 = rng.standard_normal(d)
    eps = rng.standard_normal((T - 1, d))
    eta = rng.standard_normal((T, m))
    states = np.empty((T, d))
    states[0] = x0
    for t in range(1, T):
        states[t] = spec.A @ states[t - 1] + spec.q * eps[t - 1]
    frames = states @ spec.C.T + spec.r * eta
    return SequenceBatch(frames=frames, states=states, labels=apply_labels(spec, states), spec_hash=spec.digest())


def generate_dataset(spec: LdsSpec, T: int, num_sequences: int, seed: int) -> Dataset:
    if num_sequences < 1:
        raise ValidationError("need at least one sequence")
    seqs = [generate(spec, T, seed, stream=i) for i in range(num_sequences)]
    return Dataset(spec=spec, sequences=seqs, seed=int(seed))


def label_balance(spec: LdsSpec, frames: int = 10_000, T: int = 32, seed: int = 0) -> np.ndarray:
    """Positive rate of every action over a probe of roughly ``frames`` frames."""
    n = max(1, -(-frames // T))
    labels = np.concatenate([generate(spec, T, seed, stream=2**32 + i).labels for i in range(n)])
    return labels.mean(axis=0)


def check_label_balance(spec: LdsSpec, frames: int = 10_000, T: int = 32, seed: int = 0) -> np.ndarray:
    rates = label_balance(spec, frames, T, seed)
    lo, hi = BALANCE_RANGE
    bad = np.flatnonzero((rates < lo) | (rates > hi))
    if bad.size:
        detail = ", ".join(f"action {j}: {rates[j]:.3f}" for j in bad)
        raise ValidationError(f"unbalanced labels outside [{lo:.0%}, {hi:.0%}]: {detail}")
    return rates


# --- Kalman oracle --------------------------------------------------------


def kalman_filter(
    spec: LdsSpec,
    observations: np.ndarray,
    prior_mean: np.ndarray | None = None,
    prior_cov: np.ndarray | None = None,
) -> KalmanResult:
    """Exact filtering posterior p(x_t | y_0..y_t) for the system described by ``spec``.

    The prior on x_0 defaults to N(0, I), matching the generator. A singular
    innovation covariance is tolerated as long as the innovation lies in its
    range (exact, noiseless observations); otherwise the observation is
    impossible under the model and a NumericalError names the step.
    """
    Y = np.asarray(observations, dtype=np.float64)
    d, m = spec.state_dim, spec.obs_dim
    if Y.ndim != 2 or Y.shape[1] != m:
        raise DimensionError(f"observations must be T×{m}, got {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValidationError("observations contain non-finite values")
    A, C = spec.A, spec.C
    Q = spec.q**2 * np.eye(d)
    R = spec.r**2 * np.eye(m)
    I = np.eye(d)
    x = np.zeros(d) if prior_mean is None else np.array(prior_mean, dtype=np.float64)
    P = np.eye(d) if prior_cov is None else np.array(prior_cov, dtype=np.float64)

    T = Y.shape[0]
    means = np.empty((T, d))
    covs = np.empty((T, d, d))
    gains = np.empty((T, d, m))
    for t in range(T):
        if t > 0:
            x = A @ x
            P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        S = 0.5 * (S + S.T)
        innov = Y[t] - C @ x
        # pseudo-inverse with an absolute floor: directions with variance
        # below 1e-12 (relative to max(1, |S|)) are treated as exactly known
        w, V = np.linalg.eigh(S)
        keep = w > 1e-12 * max(1.0, float(np.abs(w).max()))
        Vk = V[:, keep]
        S_pinv = (Vk / w[keep]) @ Vk.T
        if not keep.all():
            resid = innov - Vk @ (Vk.T @ innov)
            if np.linalg.norm(resid) > 1e-8 * max(1.0, np.linalg.norm(innov)):
                raise NumericalError(f"singular innovation covariance at step t={t}")
        K = P @ C.T @ S_pinv
        x = x + K @ innov
        IKC = I - K @ C
        P = IKC @ P @ IKC.T + K @ R @ K.T
        P = 0.5 * (P + P.T)
        means[t], covs[t], gains[t] = x, P, K
    return KalmanResult(posterior_means=means, posterior_covs=covs, gains=gains)


# --- decorrelation analysis -------------------------------------------------


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    va, vb = float(a @ a), float(b @ b)
    if va <= 0.0 or vb <= 0.0:
        raise UndefinedCorrelationError("correlation undefined: a stream has zero variance")
    return float(a @ b) / float(np.sqrt(va * vb))


def correlation_stats(batch: SequenceBatch | Iterable[SequenceBatch]) -> tuple[float, float]:
    """Pooled lag-one correlation of raw frames and of frame differences.

    Returns ``(corr_raw, corr_diff)``: corr_raw pairs ``y_{t-1}[i]`` with
    ``y_t[i]``; corr_diff pairs consecutive differences the same way. Passing
    several batches pools their pairs.
    """
    batches = [batch] if isinstance(batch, SequenceBatch) else list(batch)
    prev_raw, cur_raw, prev_d, cur_d = [], [], [], []
    for b in batches:
        Y = np.asarray(b.frames, dtype=np.float64)
        if Y.shape[0] < 3:
            raise ValidationError(f"correlation_stats needs T >= 3, got {Y.shape[0]}")
        D = np.diff(Y, axis=0)
        prev_raw.append(Y[:-1].ravel())
        cur_raw.append(Y[1:].ravel())
        prev_d.append(D[:-1].ravel())
        cur_d.append(D[1:].ravel())
    corr_raw = _pearson(np.concatenate(prev_raw), np.concatenate(cur_raw))
    corr_diff = _pearson(np.concatenate(prev_d), np.concatenate(cur_d))
    return corr_raw, corr_diff


# --- dataset files ------------------------------------------------------------


def write_dataset(path: str | Path, dataset: Dataset) -> None:
    """Serialize to the versioned PCDS layout (all integers little-endian).

    magic "PCDS" | u16 version | u32 n | spec JSON (n bytes, UTF-8) |
    u32 num_sequences | u32 T | u32 obs_dim | u32 state_dim | u32 num_actions |
    u64 seed | f8 frames[N,T,m] | f8 states[N,T,d] | u8 labels[N,T,a]
    """
    spec = dataset.spec
    blob = spec.canonical_json().encode()
    T = dataset.length
    if any(s.length != T for s in dataset.sequences):
        raise ValidationError("all sequences in a dataset file must share one length")
    parts = [
        DATASET_MAGIC,
        struct.pack("<H", DATASET_VERSION),
        struct.pack("<I", len(blob)),
        blob,
        struct.pack(
            "<IIIIIQ",
            len(dataset.sequences),
            T,
            spec.obs_dim,
            spec.state_dim,
            spec.num_actions,
            dataset.seed & (2**64 - 1),
        ),
        dataset.frames().astype("<f8").tobytes(),
        dataset.states().astype("<f8").tobytes(),
        dataset.labels().astype("u1").tobytes(),
    ]
    Path(path).write_bytes(b"".join(parts))


def read_dataset(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a PCDS dataset file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: dataset format version {version}, expected {DATASET_VERSION}")
    try:
        (n,) = struct.unpack_from("<I", raw, 6)
        off = 10
        spec = LdsSpec.from_dict(json.loads(raw[off : off + n].decode()))
        off += n
        N, T, m, d, a, seed = struct.unpack_from("<IIIIIQ", raw, off)
        off += struct.calcsize("<IIIIIQ")
        if (m, d, a) != (spec.obs_dim, spec.state_dim, spec.num_actions):
            raise FormatError(f"{path}: header dims {(m, d, a)} disagree with embedded spec")

        def take(count, dtype, shape):
            nonlocal off
            nbytes = count * np.dtype(dtype).itemsize
            if off + nbytes > len(raw):
                raise FormatError(f"{path}: truncated file")
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).reshape(shape)
            off += nbytes
            return arr

        frames = take(N * T * m, "<f8", (N, T, m)).astype(np.float64)
        states = take(N * T * d, "<f8", (N, T, d)).astype(np.float64)
        labels = take(N * T * a, "u1", (N, T, a)).copy()
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt dataset file ({exc})") from None
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    h = spec.digest()
    seqs = [SequenceBatch(frames[i], states[i], labels[i], h) for i in range(N)]
    return Dataset(spec=spec, sequences=seqs, seed=int(seed))


def pseudo_inverse_estimate(spec: LdsSpec, observations: np.ndarray) -> np.ndarray:
    """Per-frame state estimate C⁺ y_t that ignores dynamics."""
    return np.asarray(observations) @ np.linalg.pinv(spec.C).T


__all__ = [
    "LdsSpec",
    "SequenceBatch",
    "KalmanResult",
    "Dataset",
    "generate",
    "generate_dataset",
    "kalman_filter",
    "correlation_stats",
    "label_balance",
    "check_label_balance",
    "write_dataset",
    "read_dataset",
    "pseudo_inverse_estimate",
    "spectral_radius",
    "apply_labels",
]
