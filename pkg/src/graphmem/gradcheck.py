"""Finite-difference verification suites for the primitives and the full
training objective (64-bit, adaptive memory and dropout off).

The full-model check freezes the tracking-loss targets at the unperturbed
parameters: the objective treats the written-back state as a stop-gradient
constant, so the function being differenced must hold it fixed too.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .model import Model, ModelConfig, toy_config
from .numerics import Matrix, grad_check
from .training import build_training_loss

PRIMITIVE_TOL = 1e-6
FULL_MODEL_TOL = 1e-4


def primitive_gradchecks(seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Max relative FD error per registered primitive on random inputs."""
    rng = np.random.default_rng(seed)

    def mat(*shape, name):
        return Matrix(rng.normal(0.0, 1.0, size=shape), name=name)

    results: dict[str, float] = {}

    def check(name, params, f):
        results[name] = grad_check(f, params, h=h)

    a, b = mat(3, 4, name="a"), mat(4, 2, name="b")
    check("matmul", {"a": a, "b": b},
          lambda: nm.sum_all(nm.mul(nm.matmul(a, b), nm.matmul(a, b))))

    x = mat(3, 5, name="x")
    w = nm.constant(rng.normal(size=(3, 5)))
    check("transpose", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.transpose(nm.transpose(x)), w)))
    check("add", {"x": x}, lambda: nm.sum_all(nm.mul(nm.add(x, x), w)))
    check("sub", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.sub(nm.mul(x, x), x), w)))
    check("mul", {"x": x}, lambda: nm.sum_all(nm.mul(nm.mul(x, x), w)))
    check("scale", {"x": x}, lambda: nm.sum_all(nm.mul(nm.scale(x, 1.7), w)))
    check("add_const", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.mul(nm.add_const(x, 0.3), x), w)))

    s = mat(1, 1, name="s")
    check("scale_by", {"x": x, "s": s},
          lambda: nm.sum_all(nm.mul(nm.scale_by(x, s), w)))

    pos = Matrix(np.abs(rng.normal(size=(3, 4))) + 0.5, name="pos")
    wp = nm.constant(rng.normal(size=(3, 4)))
    check("recip", {"p": pos}, lambda: nm.sum_all(nm.mul(nm.recip(pos), wp)))
    check("exp", {"x": x}, lambda: nm.sum_all(nm.mul(nm.exp(x), w)))
    check("log", {"p": pos}, lambda: nm.sum_all(nm.mul(nm.log(pos), wp)))
    check("sigmoid", {"x": x}, lambda: nm.sum_all(nm.mul(nm.sigmoid(x), w)))

    shifted = Matrix(rng.normal(size=(3, 4)) + np.where(rng.random((3, 4)) < 0.5, 2.0, -2.0),
                     name="shifted")  # keep entries away from the clamp kink
    check("clamp_min", {"x": shifted},
          lambda: nm.sum_all(nm.mul(nm.clamp_min(shifted, 0.0), wp)))

    check("normalize_rows", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.normalize_rows(x), w)))
    check("softmax_rows", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.softmax_rows(x), w)))

    mask = np.zeros((3, 5))
    mask[:, -1] = -np.inf
    masked = nm.constant(mask, allow_neg_inf=True)
    check("softmax_rows_masked", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.softmax_rows(nm.add(x, masked)), w)))

    g_ln, b_ln = mat(1, 5, name="gain"), mat(1, 5, name="bias")
    check("layer_norm", {"x": x, "gain": g_ln, "bias": b_ln},
          lambda: nm.sum_all(nm.mul(nm.layer_norm(x, g_ln, b_ln, 1e-5), w)))

    check("gelu", {"x": x}, lambda: nm.sum_all(nm.mul(nm.gelu(x), w)))

    logits = mat(4, 7, name="logits")
    targets = rng.integers(0, 7, size=4)
    check("cross_entropy", {"logits": logits},
          lambda: nm.cross_entropy(logits, targets))

    table = mat(6, 3, name="table")
    idx = np.array([0, 2, 2, 5, 1])  # repeats exercise scatter accumulation
    wt = nm.constant(rng.normal(size=(5, 3)))
    check("take_rows", {"table": table},
          lambda: nm.sum_all(nm.mul(nm.take_rows(table, idx), wt)))

    big = mat(6, 6, name="big")
    w3 = nm.constant(rng.normal(size=(2, 6)))
    check("slice_rows", {"m": big},
          lambda: nm.sum_all(nm.mul(nm.slice_rows(big, 1, 2), w3)))
    w4 = nm.constant(rng.normal(size=(6, 2)))
    check("slice_cols", {"m": big},
          lambda: nm.sum_all(nm.mul(nm.slice_cols(big, 3, 2), w4)))

    p1, p2 = mat(2, 3, name="p1"), mat(4, 3, name="p2")
    w5 = nm.constant(rng.normal(size=(6, 3)))
    check("concat_rows", {"p1": p1, "p2": p2},
          lambda: nm.sum_all(nm.mul(nm.concat_rows([p1, p2]), w5)))
    q1, q2 = mat(3, 2, name="q1"), mat(3, 4, name="q2")
    w6 = nm.constant(rng.normal(size=(3, 6)))
    check("concat_cols", {"q1": q1, "q2": q2},
          lambda: nm.sum_all(nm.mul(nm.concat_cols([q1, q2]), w6)))

    check("sum_all", {"x": x}, lambda: nm.sum_all(nm.mul(x, x)))
    check("mean_all", {"x": x}, lambda: nm.mean_all(nm.mul(x, x)))
    w7 = nm.constant(rng.normal(size=(1, 5)))
    check("col_mean", {"x": x},
          lambda: nm.sum_all(nm.mul(nm.col_mean(nm.mul(x, x)), w7)))

    return results


def full_model_gradcheck(config: ModelConfig | None = None, *, seed: int = 0,
                         t: int = 3, tau: float = 0.7,
                         h: float = 1e-5) -> dict[str, float]:
    """Max relative FD error of the full objective per parameter group."""
    config = config or toy_config()
    model = Model(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    inputs = rng.integers(0, config.vocab, size=(1, t))
    targets = rng.integers(0, config.vocab, size=(1, t))

    _, _, frozen = build_training_loss(model, inputs, targets, tau=tau, adaptive=False)

    def objective():
        loss, _, _ = build_training_loss(model, inputs, targets, tau=tau,
                                         adaptive=False, tracking_targets=frozen)
        return loss

    errors: dict[str, float] = {}
    for name, param in model.parameters().items():
        errors[name] = grad_check(objective, {name: param}, h=h)
    return errors
