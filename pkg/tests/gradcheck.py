"""Central finite-difference checks against tape gradients (float64)."""

from __future__ import annotations

import numpy as np

from narlab import tensor as T


def numeric_grad(f, arrays: list[np.ndarray], weight: np.ndarray, eps: float = 1e-6) -> list[np.ndarray]:
    def scalar():
        return float((f(*[T.Tensor(a) for a in arrays]).data * weight).sum())

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            up = scalar()
            a[i] = old - eps
            down = scalar()
            a[i] = old
            g[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def tape_grad(f, arrays: list[np.ndarray], weight: np.ndarray) -> list[np.ndarray]:
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape() as tape:
        out = f(*leaves)
        loss = T.tensor_sum(T.mul(out, T.Tensor(weight))) if out.shape else T.mul(out, float(weight))
    T.backward(loss, tape)
    return [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check(f, arrays: list[np.ndarray], seed: int = 0) -> float:
    """Worst relative error over all inputs of ``f``."""
    rng = np.random.default_rng(seed)
    out = f(*[T.Tensor(a) for a in arrays])
    weight = rng.normal(size=out.shape) if out.shape else np.float64(rng.normal())
    analytic = tape_grad(f, arrays, weight)
    numeric = numeric_grad(f, [a.copy() for a in arrays], np.asarray(weight))
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def op_cases(rng: np.random.Generator):
    """(name, fn, inputs) for every differentiable op, with randomized shapes."""
    d = lambda *s: rng.normal(size=s)  # noqa: E731
    b, m, k, n = (int(x) for x in rng.integers(1, 5, size=4))
    ids = rng.integers(0, 6, size=(b, m))
    targets = rng.integers(0, n, size=(b, m))
    weights = rng.random((b, m))
    mask = np.where(rng.random((1, m)) < 0.3, -5.0, 0.0)
    away_from_zero = d(b, m) + np.sign(d(b, m)) * 0.1
    drop_seed = int(rng.integers(1 << 30))
    return [
        ("matmul", T.matmul, [d(b, m, k), d(k, n)]),
        ("matmul_batched", T.matmul, [d(b, m, k), d(b, k, n)]),
        ("add", T.add, [d(b, m), d(b, m)]),
        ("add_bias", T.add, [d(b, m, k), d(k)]),
        ("add_scalar", lambda x: T.add(x, 1.5), [d(b, m)]),
        ("sub", T.sub, [d(b, m), d(b, m)]),
        ("mul", T.mul, [d(b, m), d(b, m)]),
        ("mul_scalar", lambda x: T.mul(x, -0.7), [d(b, m)]),
        ("add_constant", lambda x: T.add_constant(x, mask), [d(b, m)]),
        ("reshape", lambda x: T.reshape(x, (m, b * k)), [d(b, m, k)]),
        ("transpose", lambda x: T.transpose(x, (2, 0, 1)), [d(b, m, k)]),
        ("concat", lambda x, y: T.concat([x, y], axis=1), [d(b, m), d(b, k)]),
        ("select", lambda x: T.select(x, b - 1), [d(b, m, k)]),
        ("relu", T.relu, [away_from_zero]),
        ("exp", T.exp, [d(b, m)]),
        ("log", T.log, [rng.random((b, m)) + 0.5]),
        ("sum_all", T.tensor_sum, [d(b, m, k)]),
        ("sum_axis", lambda x: T.tensor_sum(x, 1), [d(b, m, k)]),
        ("mean", lambda x: T.mean(x, 0), [d(b, m)]),
        ("softmax", T.softmax, [d(b, m, n)]),
        ("log_softmax", T.log_softmax, [d(b, m, n)]),
        ("layer_norm", T.layer_norm, [d(b, m, k + 1), d(k + 1), d(k + 1)]),
        ("embedding", lambda t: T.embedding(t, ids), [d(6, k)]),
        ("dropout", lambda x: T.dropout(x, 0.4, np.random.default_rng(drop_seed)), [d(b, m)]),
        ("nll", lambda x: T.nll(x, targets, weights), [d(b, m, n)]),
    ]
