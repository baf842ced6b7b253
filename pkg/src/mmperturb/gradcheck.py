"""Central finite-difference checks for tape ops and the full model loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .kinematics import Skeleton, forward_kinematics_var
from .mixing import FusionMode, IndexSet, resample_var, sample_indices
from .model import MixMatchModel, ModelConfig

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``, or the absolute gap when both vanish."""
    gap = float(np.max(np.abs(analytic - numeric), initial=0.0))
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    return gap / scale if scale > 1e-8 else gap


def numeric_gradients(f: Callable[[dict], float], params: dict[str, np.ndarray], step: float = 1e-5):
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(params)
            flat[i] = orig - step
            down = f(params)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def check(build: Callable[[dict], tuple[ad.Tape, ad.Var]], params: dict[str, np.ndarray], step: float = 1e-5):
    """Per-parameter relative error of a scalar loss.

    ``build(arrays)`` records the loss on a fresh tape, registering each
    entry of ``arrays`` with ``tape.param`` under its own name, and returns
    ``(tape, loss)``. It must be a deterministic function of the values.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape, loss = build(params)
    analytic = tape.backward(loss)
    numeric = numeric_gradients(lambda p: float(build(p)[1].value), params, step)
    # parameters the loss never touched have a zero gradient
    return {k: relative_error(analytic.get(k, np.zeros_like(v)), numeric[k]) for k, v in params.items()}


def on_tape(fn: Callable[[dict], ad.Var]) -> Callable[[dict], tuple[ad.Tape, ad.Var]]:
    """Adapt ``fn(vars)`` over tape parameters to the :func:`check` protocol."""

    def build(arrays):
        tape = ad.Tape()
        return tape, fn({k: tape.param(k, v) for k, v in arrays.items()})

    return build


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} max_rel_err={self.error:.3e} tol={self.tolerance:.0e}"


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, dict]]:
    """One randomized loss per differentiable op; each reduces to a scalar with random weights."""
    weights: dict[tuple, np.ndarray] = {}

    def dot(v: ad.Var) -> ad.Var:
        # fixed random weights per output shape so every op sees a generic cotangent
        if v.shape not in weights:
            weights[v.shape] = rng.standard_normal(v.shape)
        return ad.sum(ad.mul(v, weights[v.shape]))

    idx = np.array([0, 2, 3])
    L, D = 5, 3
    cases = {
        "add": (lambda p: dot(ad.add(p["a"], p["b"])), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(4)}),
        "sub": (lambda p: dot(ad.sub(p["a"], p["b"])), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 4))}),
        "mul": (lambda p: dot(ad.mul(p["a"], p["b"])), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(1)}),
        "scale": (lambda p: dot(ad.scale(p["a"], -1.7)), {"a": rng.standard_normal((3, 4))}),
        "matmul": (lambda p: dot(ad.matmul(p["a"], p["b"])), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))}),
        "concat": (lambda p: dot(ad.concat([p["a"], p["b"]], axis=-1)), {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((3, 2))}),
        "reshape": (lambda p: dot(ad.reshape(p["a"], (4, 3))), {"a": rng.standard_normal((3, 4))}),
        "transpose": (lambda p: dot(ad.transpose(p["a"])), {"a": rng.standard_normal((3, 4))}),
        "gather": (lambda p: dot(ad.gather(p["a"], idx)), {"a": rng.standard_normal((3, 4))}),
        "scatter": (lambda p: dot(ad.scatter(p["a"], idx, 8)), {"a": rng.standard_normal((3, 3))}),
        "tanh": (lambda p: dot(ad.tanh(p["a"])), {"a": rng.standard_normal((3, 4))}),
        "sigmoid": (lambda p: dot(ad.sigmoid(p["a"])), {"a": rng.standard_normal((3, 4))}),
        # keep inputs away from the kink at 0
        "relu": (lambda p: dot(ad.relu(p["a"])), {"a": _away_from_zero(rng, (3, 4))}),
        "softplus": (lambda p: dot(ad.softplus(p["a"])), {"a": 3.0 * rng.standard_normal((3, 4))}),
        "exp": (lambda p: dot(ad.exp(p["a"])), {"a": rng.standard_normal((3, 4))}),
        "log": (lambda p: dot(ad.log(p["a"])), {"a": rng.uniform(0.5, 2.0, (3, 4))}),
        "sum": (lambda p: ad.scale(ad.sum(p["a"]), 1.3), {"a": rng.standard_normal((3, 4))}),
        "mean": (lambda p: ad.mean(ad.tanh(p["a"])), {"a": rng.standard_normal((3, 4))}),
        "squared_norm": (lambda p: ad.squared_norm(p["a"]), {"a": rng.standard_normal((3, 4))}),
        "gru_cell": (
            lambda p: dot(ad.gru_cell(p["x"], p["h"], p["w_in"], p["w_hid"], p["b_in"], p["b_hid"])),
            {
                "x": rng.standard_normal((5, D)),
                "h": rng.standard_normal((5, 4)),
                "w_in": 0.5 * rng.standard_normal((D, 12)),
                "w_hid": 0.5 * rng.standard_normal((4, 12)),
                "b_in": 0.5 * rng.standard_normal(12),
                "b_hid": 0.5 * rng.standard_normal(12),
            },
        ),
        "quat_mul": (lambda p: dot(ad.quat_mul(p["a"], p["b"])), {"a": rng.standard_normal((2, 5, 4)), "b": rng.standard_normal((2, 5, 4))}),
        "quat_rotate": (lambda p: dot(ad.quat_rotate(p["q"], p["v"])), {"q": rng.standard_normal((2, 5, 4)), "v": rng.standard_normal((2, 5, 3))}),
        "normalize": (lambda p: dot(ad.normalize(p["a"])), {"a": rng.standard_normal((2, 5, 4))}),
        "forward_kinematics": (
            lambda p: dot(forward_kinematics_var(Skeleton.chain(5, (0.3, 1.0, -0.2)), p["q"], aligned=False)),
            {"q": rng.standard_normal((2, 5, 4))},
        ),
        "resample": (
            lambda p: dot(resample_var(p["a"], p["b"], IndexSet(L, [1, 3]))),
            {"a": rng.standard_normal((3, L)), "b": rng.standard_normal((3, L - 2))},
        ),
    }
    return cases


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_suite(seed: int = 0, tolerance: float = OP_TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (build, params) in op_cases(rng).items():
        errs = check(on_tape(build), params)
        out.append(CheckResult(f"op/{name}", max(errs.values()), tolerance))
    return out


def tiny_model_loss(mode: str = "mm", seed: int = 0, hidden: int = 8, joints: int = 2, observed: int = 4, horizon: int = 6):
    """``(params, build)`` for the full training loss of a small random model on random motions."""
    from .training import forward_batch

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(joints=joints, hidden=hidden, alpha=0.5, mode=mode)
    model = MixMatchModel.initialize(cfg, rng)
    frames = rng.standard_normal((3, observed + horizon, joints, 4))
    frames /= np.linalg.norm(frames, axis=-1, keepdims=True)
    skeleton = Skeleton.chain(joints, (0.2, 1.0, 0.1))
    index = sample_indices(hidden, cfg.alpha, rng) if cfg.fusion is FusionMode.MM else None

    def build(arrays: dict):
        m = MixMatchModel(cfg, arrays)
        step = forward_batch(
            m, skeleton, frames, observed, index, 0.7, 0.5,
            np.random.default_rng(seed + 1), np.random.default_rng(seed + 2),
        )
        return step.tape, step.loss

    return model.params, build


def model_suite(seed: int = 0, tolerance: float = MODEL_TOLERANCE, modes=("mm", "lhp", "rhp", "lpp")) -> list[CheckResult]:
    out = []
    for mode in modes:
        params, build = tiny_model_loss(mode, seed)
        for name, err in check(build, params).items():
            out.append(CheckResult(f"model[{mode}]/{name}", err, tolerance))
    return out
