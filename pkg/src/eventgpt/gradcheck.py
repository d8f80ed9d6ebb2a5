"""Central finite-difference checks for every differentiable op and the end-to-end loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor
from .tokenizer import tokenize

H = 1e-5
TOL_NONLINEAR = 1e-4
TOL_LINEAR = 1e-6


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H, index=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place and restoring it."""
    g = np.zeros_like(x)
    it = [index] if index is not None else np.ndindex(x.shape)
    for i in it:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray], rng) -> float:
    """Max relative error over all inputs of ``sum(build(inputs) * R)`` for a fixed random ``R``."""
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(ts)
    weight = rng.standard_normal(out.shape)
    T.sum_all(T.mul(out, Tensor(weight))).backward()
    worst = 0.0
    for t in ts:
        def f(t=t):
            with T.no_grad():
                return float((build(ts).data * weight).sum())

        worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data)))
    return worst


@dataclass
class OpCase:
    name: str
    linear: bool
    make: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]


def _cases() -> list[OpCase]:
    def r(rng, *shape):
        return rng.standard_normal(shape)

    def dims(rng, k=3, lo=1, hi=5):
        return [int(v) for v in rng.integers(lo, hi, size=k)]

    cases = [
        OpCase("matmul", False, lambda g: (lambda t: T.matmul(t[0], t[1]),
                                           [r(g, 3, 4), r(g, 4, 2)])),
        OpCase("matmul_shared_weight", False, lambda g: (lambda t: T.matmul(t[0], t[1]),
                                                         [r(g, 2, 3, 4), r(g, 4, 5)])),
        OpCase("matmul_batched", False, lambda g: (lambda t: T.matmul(t[0], t[1]),
                                                   [r(g, 2, 3, 4), r(g, 2, 4, 2)])),
        OpCase("add", True, lambda g: (lambda t: T.add(t[0], t[1]), [r(g, 3, 4), r(g, 3, 4)])),
        OpCase("add_bias", True, lambda g: (lambda t: T.add(t[0], t[1]), [r(g, 2, 3, 4), r(g, 4)])),
        OpCase("mul", False, lambda g: (lambda t: T.mul(t[0], t[1]), [r(g, 3, 4), r(g, 3, 4)])),
        OpCase("mul_gain", False, lambda g: (lambda t: T.mul(t[0], t[1]), [r(g, 2, 3, 4), r(g, 4)])),
        OpCase("scale", True, lambda g: (lambda t: T.scale(t[0], 0.37), [r(g, 3, 5)])),
        OpCase("transpose", True, lambda g: (lambda t: T.transpose(t[0], (2, 0, 1)), [r(g, 2, 3, 4)])),
        OpCase("reshape", True, lambda g: (lambda t: T.reshape(t[0], (4, 6)), [r(g, 2, 3, 4)])),
        OpCase("slice", True, lambda g: (lambda t: T.slice_(t[0], (slice(None), slice(1, 3))), [r(g, 3, 4, 2)])),
        OpCase("concat", True, lambda g: (lambda t: T.concat(t, axis=1), [r(g, 2, 3), r(g, 2, 1), r(g, 2, 4)])),
        OpCase("mean_axis0", True, lambda g: (lambda t: T.mean_over_axis(t[0], 0), [r(g, 2, 3, 4)])),
        OpCase("mean_axis1", True, lambda g: (lambda t: T.mean_over_axis(t[0], 1), [r(g, 2, 3, 4)])),
        OpCase("mean_axis2", True, lambda g: (lambda t: T.mean_over_axis(t[0], 2), [r(g, 2, 3, 4)])),
        OpCase("max_axis", False, lambda g: (lambda t: T.max_over_axis(t[0], 1), [r(g, 2, 3, 4)])),
        OpCase("sum_all", True, lambda g: (lambda t: T.sum_all(t[0]), [r(g, 3, 4)])),
        OpCase("softmax", False, lambda g: (lambda t: T.softmax(t[0], axis=-1), [r(g, 3, 5)])),
        OpCase("softmax_axis0", False, lambda g: (lambda t: T.softmax(t[0], axis=0), [r(g, 4, 3)])),
        OpCase("layer_norm", False, lambda g: (lambda t: T.layer_norm(t[0], t[1], t[2]),
                                               [r(g, 2, 3, 6), 1 + 0.1 * r(g, 6), r(g, 6)])),
        OpCase("gelu", False, lambda g: (lambda t: T.gelu(t[0]), [r(g, 4, 5)])),
        OpCase("embedding_gather", True, lambda g: (
            (lambda ids: (lambda t: T.embedding_gather(t[0], ids)))(g.integers(0, 7, size=(2, 5))),
            [r(g, 7, 3)])),
        OpCase("cross_entropy", False, lambda g: (
            (lambda tg, m: (lambda t: T.cross_entropy_with_logits(t[0], tg, m)))(
                g.integers(0, 7, size=5), np.array([1, 0, 1, 1, 0], bool)),
            [r(g, 5, 7)])),
        OpCase("cross_entropy_batched", False, lambda g: (
            (lambda tg, m: (lambda t: T.cross_entropy_with_logits(t[0], tg, m)))(
                g.integers(0, 6, size=(3, 4)), np.array([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 0]], bool)),
            [r(g, 3, 4, 6)])),
    ]
    return cases


OP_CASES = _cases()


def run_op_suite(seed: int = 0, instances: int = 20) -> dict[str, tuple[float, float, bool]]:
    """``{op: (worst relative error, tolerance, passed)}`` over ``instances`` random draws each."""
    rng = np.random.default_rng(seed)
    out = {}
    for case in OP_CASES:
        tol = TOL_LINEAR if case.linear else TOL_NONLINEAR
        worst = 0.0
        for _ in range(instances):
            build, inputs = case.make(rng)
            worst = max(worst, check_op(build, inputs, rng))
        out[case.name] = (worst, tol, worst < tol)
    return out


def end_to_end_check(seed: int = 0, instances: int = 20, n_params: int = 10) -> tuple[float, bool]:
    """Compare d(loss)/d(entry) for ``n_params`` random parameters of a tiny model, per instance."""
    cfg = M.ModelConfig(image_side=8, patch=4, enc_dim=8, enc_depth=1, enc_heads=2, proj_hidden=8,
                        lm_dim=8, lm_depth=1, lm_heads=2, max_seq_len=32, num_bins=2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for inst in range(instances):
        params = M.ModelParams.init(cfg, seed * 1000 + inst)
        # perturb away from the identity/zero init so every path carries gradient
        for _, t in params.items():
            t.data = t.data + 0.05 * rng.standard_normal(t.shape)
        grids = rng.random((2, cfg.num_bins, 2, 8, 8))
        prompts = [tokenize("ab"), tokenize("c")]
        answers = [tokenize("xy", supervised=True), tokenize("z", supervised=True)]

        def loss_value():
            prefix = M.event_prefix(grids, params, cfg)
            batch = M.assemble_batch(prefix, prompts, answers, params, cfg)
            return M.sequence_loss(batch, params, cfg)

        params.zero_grad()
        loss_value().backward()
        names = rng.choice(params.names(), size=n_params, replace=False)
        analytic, numeric = [], []
        for name in names:
            p = params[name]
            idx = tuple(int(rng.integers(s)) for s in p.shape)

            def f():
                with T.no_grad():
                    return loss_value().item()

            analytic.append(p.grad[idx])
            numeric.append(numeric_grad(f, p.data, index=idx)[idx])
        worst = max(worst, rel_error(np.array(analytic), np.array(numeric)))
    return worst, worst < TOL_NONLINEAR
