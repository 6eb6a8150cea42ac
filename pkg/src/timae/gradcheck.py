"""Central finite-difference checks for the autodiff ops.

``check_gradients`` compares the gradients recorded by ``Tensor.backward``
with central differences of a scalar function, in float64. ``op_suite``
returns one named case per differentiable op; the CLI ``gradcheck`` command
and the test suite both run it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def numerical_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, floored so all-zero gradients compare absolutely."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between autodiff and central differences of sum-weighted ``fn``.

    ``fn`` maps Tensors to a Tensor; a fixed random projection turns its
    output into a scalar so every output element contributes.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    probe_rng = np.random.default_rng(12345)
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = probe_rng.standard_normal(out.shape)
    loss = T.reduce_sum(T.mul(out, Tensor(weights)))
    loss.backward()

    def scalar() -> float:
        with T.no_grad():
            return float((fn(*[Tensor(x) for x in inputs]).data * weights).sum())

    worst = 0.0
    for leaf, arr in zip(leaves, inputs):
        num = numerical_grad(scalar, arr, h)
        auto = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_error(auto, num))
    return worst


def _cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    n = rng.standard_normal
    idx = np.stack([rng.choice(5, size=3, replace=False) for _ in range(2)])
    gamma, beta = n(4), n(4)
    keep_seed = int(rng.integers(2**31))
    return [
        ("add", lambda a, b: T.add(a, b), [n((3, 4)), n((4,))]),
        ("sub", lambda a, b: T.sub(a, b), [n((2, 3)), n((2, 1))]),
        ("mul", lambda a, b: T.mul(a, b), [n((3, 4)), n((3, 4))]),
        ("scale", lambda a: T.scale(a, -2.5), [n((5,))]),
        ("matmul", lambda a, b: T.matmul(a, b), [n((2, 3, 4)), n((4, 2))]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [n((2, 3, 4)), n((2, 4, 5))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), [n((3, 5))]),
        ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b, 1e-5), [n((3, 4)), gamma, beta]),
        ("gelu", T.gelu, [n((4, 3))]),
        # keep inputs away from the kink
        ("relu", T.relu, [np.sign(v := n((4, 3))) * (np.abs(v) + 0.1)]),
        ("conv1d", lambda x, k, b: T.conv1d(x, k, b, stride=1, padding=1), [n((2, 6, 3)), n((3, 3, 4)), n(4)]),
        ("conv1d_strided", lambda x, k: T.conv1d(x, k, None, stride=2, padding=1), [n((1, 7, 2)), n((3, 2, 3))]),
        ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [n((2, 3, 4))]),
        ("reshape", lambda a: T.reshape(a, (4, 6)), [n((2, 3, 4))]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        ("gather_rows", lambda a: T.gather_rows(a, idx), [n((2, 5, 3))]),
        ("scatter_rows", lambda a: T.scatter_rows(a, idx, 5), [n((2, 3, 3))]),
        ("reduce_sum", lambda a: T.reduce_sum(a, axis=1, keepdims=True), [n((3, 4))]),
        ("reduce_mean", lambda a: T.reduce_mean(a, axis=0), [n((3, 4))]),
        (
            "dropout",
            lambda a: T.dropout(a, 0.3, True, np.random.default_rng(keep_seed)),
            [n((4, 5))],
        ),
    ]


def op_suite(trials: int = 20, seed: int = 0) -> list[GradCheckResult]:
    """Run every op case ``trials`` times on fresh random inputs; report the worst error per op."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, fn, inputs in _cases(rng):
            worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs))
    return [GradCheckResult(name, err, OP_TOL) for name, err in worst.items()]


def model_check(seed: int = 0, h: float = 1e-5) -> GradCheckResult:
    """End-to-end masked-MSE gradient of a tiny float64 model, every parameter scalar."""
    from .model import ModelConfig, TiMaeModel, make_mask
    from .training import masked_mse

    cfg = ModelConfig(
        in_channels=2, out_channels=2, window_len=6, d_model=8, d_decoder=4, n_heads=2,
        enc_layers=1, dec_layers=1, dropout_p=0.0, mask_ratio=0.5,
    )
    rng = np.random.default_rng(seed)
    model = TiMaeModel(cfg, rng=rng, dtype=np.float64)
    # non-trivial mask token and biases so their gradients are exercised
    for name, p in model.params.items():
        if name.endswith(("bias", "mask_token", "beta")):
            p.data = 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, cfg.window_len, cfg.in_channels))
    target = Tensor(x)
    mask = make_mask(cfg.window_len, "random", cfg.mask_ratio, rng)

    masked_mse(model.reconstruct(x, mask), target, mask).backward()

    def scalar() -> float:
        with T.no_grad():
            return masked_mse(model.reconstruct(x, mask), target, mask).item()

    # one relative error over the whole flattened gradient: some entries
    # (attention key biases) have an exact zero derivative
    auto = np.concatenate([p.grad.ravel() for p in model.params.values()])
    num = np.concatenate([numerical_grad(scalar, p.data, h).ravel() for p in model.params.values()])
    return GradCheckResult("end_to_end_masked_mse", rel_error(auto, num), MODEL_TOL)
