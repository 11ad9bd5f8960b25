"""Shared reference computations for the test suite."""

import numpy as np

from pcnet import tensor as tn
from pcnet.model import init_params
from pcnet.tensor import Tensor
from pcnet.train import TrainConfig, window_loss

OP_NAMES = ("matmul", "conv2d", "add", "sub", "mul", "scale", "relu", "sigmoid", "add_bias", "bce", "mean")


def _op_case(op: str, rng: np.random.Generator):
    """Inputs and a scalar function of them that exercises ``op``."""
    if op == "matmul":
        xs = [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))]
        return xs, lambda a, b: tn.sum(tn.matmul(a, b))
    if op == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        xs = [rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))]
        return xs, lambda a, b: tn.sum(tn.conv2d(a, b, stride, pad))
    if op == "add_bias":
        xs = [rng.standard_normal((4, 3)), rng.standard_normal(3)]
        return xs, lambda a, b: tn.sum(tn.mul(tn.add_bias(a, b), tn.add_bias(a, b)))
    if op == "bce":
        y = rng.integers(0, 2, (4, 3)).astype(float)
        return [rng.standard_normal((4, 3)) * 3], lambda a: tn.bce_loss(a, Tensor(y))
    if op == "mean":
        return [rng.standard_normal((2, 6))], lambda a: tn.mean(tn.mul(tn.reshape(a, (3, 4)), tn.reshape(a, (3, 4))))
    xs = [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))]
    if op == "relu":
        xs[0][np.abs(xs[0]) < 1e-3] = 0.5  # keep away from the kink
    w = Tensor(rng.standard_normal((3, 4)))
    unary = {
        "scale": lambda a: tn.scale(a, 1.7),
        "relu": tn.relu,
        "sigmoid": tn.sigmoid,
    }
    if op in unary:
        return xs, lambda a, b: tn.sum(tn.mul(tn.mul(unary[op](a), b), w))
    binary = {"add": tn.add, "sub": tn.sub, "mul": tn.mul}
    return xs, lambda a, b: tn.sum(tn.mul(binary[op](a, b), w))


def op_gradcheck(op: str, seed: int, h: float = 1e-5) -> float:
    """Largest relative error of one op's tape gradient against central differences."""
    xs, fn = _op_case(op, np.random.default_rng(seed))
    leaves = [Tensor(x, requires_grad=True) for x in xs]
    tn.clear_tape()
    grads = tn.backward(fn(*leaves))
    worst = 0.0
    for leaf in leaves:
        numeric = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            with tn.no_grad():
                flat[i] = old + h
                up = fn(*leaves).item()
                flat[i] = old - h
                down = fn(*leaves).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        analytic = grads[leaf]
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))))
    return worst


def random_bptt_case(seed: int):
    """A small random network, window and batch for gradient checking."""
    rng = np.random.default_rng(seed)
    m = int(rng.integers(2, 7))
    a = int(rng.integers(1, 4))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(0, 3))))
    W = int(rng.integers(2, 5))
    T = W + int(rng.integers(0, 3))
    config = TrainConfig(bptt_window=W, hidden=hidden, tied_init=bool(seed % 2))
    net = config.network(m, a)
    lower = ()
    if hidden and seed % 3 == 0:
        lower = ((2, int(rng.integers(1, W + 1))),)  # a block after the first relu
    config = TrainConfig(bptt_window=W, hidden=hidden, lower_blocks=lower, tied_init=bool(seed % 2))
    params = init_params(net, seed, config.tied_init)
    for t in params.tensors():
        t.data = t.data + 0.3 * rng.standard_normal(t.shape)
    frames = rng.standard_normal((2, T, m))
    labels = rng.integers(0, 2, (2, T, a)).astype(np.uint8)
    seq_idx = np.array([0, 1, 1])
    starts = rng.integers(0, T - W + 1, 3)
    return config, params, frames, labels, seq_idx, starts


def bptt_gradcheck(seed: int, h: float = 1e-6) -> float:
    """Largest relative error between tape gradients and central differences."""
    config, params, frames, labels, seq_idx, starts = random_bptt_case(seed)
    placement = config.placement(params.net)
    tensors = params.tensors()

    def loss_value() -> float:
        with tn.no_grad():
            return window_loss(params, config, placement, frames, labels, seq_idx, starts).item()

    for t in tensors:
        t.requires_grad = True
        t.grad = None
    tn.clear_tape()
    grads = tn.backward(window_loss(params, config, placement, frames, labels, seq_idx, starts))
    worst = 0.0
    for t in tensors:
        analytic = grads.get(t, np.zeros_like(t.data))
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_value()
            flat[i] = old - h
            down = loss_value()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        err = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))
        worst = max(worst, float(err))
    return worst
