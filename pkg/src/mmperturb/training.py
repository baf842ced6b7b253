"""Losses, annealing, and the mini-batch training loop."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .kinematics import Skeleton, align_root, forward_kinematics, forward_kinematics_var
from .mixing import CurriculumSchedule, FusionMode, curriculum_indices
from .model import MixMatchModel, ModelConfig, TeacherForcingSchedule, reparameterize
from .optim import AdamState, adam_step, clip_gradients
from .rng import substream

TELEMETRY_COLUMNS = ("epoch", "iter", "loss_rot", "loss_skl", "loss_kl", "lambda", "p_tf", "probe_diversity")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AnnealSchedule:
    """Logistic KL weight ``1 / (1 + exp(-steepness * (it - midpoint)))``."""

    midpoint: float
    steepness: float

    def __post_init__(self):
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")

    def __call__(self, it: float) -> float:
        x = -self.steepness * (it - self.midpoint)
        if x > 700:
            return 0.0
        return 1.0 / (1.0 + math.exp(x))

    @classmethod
    def for_budget(cls, iterations: int) -> "AnnealSchedule":
        total = max(iterations, 1)
        return cls(0.25 * total, 10.0 / total)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    iterations: int = 3000
    alpha: float = 0.5
    curriculum_step: int = 10
    clip_norm: float = 5.0
    tf_epochs_to_zero: int = 100
    seed: int = 0
    mode: str = "mm"
    residual_velocity: bool = False
    hidden: int = 64
    use_rot: bool = True
    use_skl: bool = True
    use_kl: bool = True
    kl_weight: float = 1.0  # ceiling of the annealed lambda
    probe_k: int = 10

    def __post_init__(self):
        FusionMode(self.mode)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("learning_rate", "batch_size", "curriculum_step", "clip_norm", "tf_epochs_to_zero", "hidden", "probe_k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.kl_weight <= 1.0:
            raise ValueError("kl_weight must lie in (0, 1]")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def model_config(self, joints: int) -> ModelConfig:
        return ModelConfig(
            joints=joints,
            hidden=self.hidden,
            alpha=self.alpha,
            mode=self.mode,
            residual_velocity=self.residual_velocity,
        )


# -- losses --------------------------------------------------------------------


def _check_same(pred, truth, name):
    if tuple(pred.shape) != tuple(np.shape(truth)):
        raise ad.ShapeError(f"{name}: prediction shape {pred.shape} vs ground truth {np.shape(truth)}")


def _mean_sq(diff: ad.Var) -> ad.Var:
    return ad.scale(ad.squared_norm(diff), 1.0 / diff.value.size)


def loss_rot(pred: ad.Var, truth) -> ad.Var:
    """Mean squared quaternion-component error over frames, joints and the 4 components."""
    _check_same(pred, truth, "loss_rot")
    return _mean_sq(ad.sub(pred, truth))


def loss_positions(pred: ad.Var, truth) -> ad.Var:
    """Mean squared joint-position error over frames, joints and the 3 coordinates."""
    _check_same(pred, truth, "loss_positions")
    return _mean_sq(ad.sub(pred, truth))


def loss_skl(skeleton: Skeleton, pred: ad.Var, truth: np.ndarray) -> ad.Var:
    """Mean squared joint-position error after removing both root rotations.

    ``pred`` and ``truth`` have shape ``(..., J, 4)``.
    """
    _check_same(pred, truth, "loss_skl")
    J = skeleton.joint_count
    flat = ad.reshape(pred, (-1, J, 4)) if pred.value.ndim != 3 else pred
    p_hat = forward_kinematics_var(skeleton, flat, aligned=True)
    truth = np.asarray(truth).reshape(-1, J, 4)
    p = forward_kinematics(skeleton, align_root(truth / np.linalg.norm(truth, axis=-1, keepdims=True)))
    return loss_positions(p_hat, p)


def loss_kl(mu: ad.Var, logvar: ad.Var) -> ad.Var:
    """``0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1)`` averaged over the batch axis if present."""
    _check_same(mu, logvar.value, "loss_kl")
    terms = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)), ad.add(logvar, 1.0))
    batch = mu.shape[0] if mu.value.ndim > 1 else 1
    return ad.scale(ad.sum(terms), 0.5 / batch)


def total_loss(rot, skl, kl, lam: float) -> ad.Var:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    out = None
    for term, weight in ((rot, 1.0), (skl, 1.0), (kl, lam)):
        if term is None or weight == 0.0:
            continue
        term = term if weight == 1.0 else ad.scale(term, weight)
        out = term if out is None else ad.add(out, term)
    return out


# -- one step ------------------------------------------------------------------


@dataclass
class StepResult:
    tape: ad.Tape
    loss: ad.Var
    loss_rot: float
    loss_skl: float
    loss_kl: float
    prediction: np.ndarray


def forward_batch(
    model: MixMatchModel,
    skeleton: Skeleton,
    frames: np.ndarray,
    observed: int,
    index,
    lam: float,
    p_tf: float,
    eps_rng: np.random.Generator,
    teacher_rng: np.random.Generator | None,
    use_rot: bool = True,
    use_skl: bool = True,
    use_kl: bool = True,
) -> StepResult:
    """Training-path forward pass for a batch of full motions ``(B, T, J, 4)``."""
    cfg = model.config
    B, T, J, _ = frames.shape
    horizon = T - observed
    flat = frames.reshape(B, T, 4 * J)
    past, future = flat[:, :observed], flat[:, observed:]
    tape = ad.Tape()
    P = model.bind(tape)
    h_t = model.encode_past(P, past)
    fusion = cfg.fusion
    mu = logvar = None
    step_noise = None
    if fusion is FusionMode.RHP:
        # no posterior: the noise always comes from the prior
        z = eps_rng.standard_normal((B, cfg.z_dim))
    else:
        h_T = model.encode_future(P, future)
        mu, logvar = model.posterior(P, h_t, h_T, index)
        if fusion is FusionMode.LPP:
            z = None
            step_noise = lambda k: reparameterize(mu, logvar, eps_rng.standard_normal(mu.shape))  # noqa: E731
        else:
            z = reparameterize(mu, logvar, eps_rng.standard_normal(mu.shape))
    h_z = model.perturbed_hidden(P, h_t, z, index)
    outs = model.decode(
        P, h_z, flat[:, observed - 1], horizon, teacher=future, p_tf=p_tf, rng=teacher_rng, step_noise=step_noise
    )
    pred = ad.reshape(ad.concat(outs, axis=-1), (B, horizon, J, 4))
    truth = frames[:, observed:]
    rot = loss_rot(pred, truth)
    skl = loss_skl(skeleton, pred, truth)
    kl = loss_kl(mu, logvar) if (mu is not None and cfg.z_dim > 0) else None
    loss = total_loss(rot if use_rot else None, skl if use_skl else None, kl if use_kl else None, lam)
    if loss is None:
        raise ValueError("all loss terms are disabled")
    return StepResult(
        tape,
        loss,
        float(rot.value),
        float(skl.value),
        0.0 if kl is None else float(kl.value),
        pred.value,
    )


# -- telemetry -----------------------------------------------------------------


def hidden_diversity(h: np.ndarray) -> float:
    """Mean pairwise Euclidean distance between rows of ``h``."""
    K = len(h)
    if K < 2:
        return 0.0
    d = np.sqrt(np.maximum(np.sum((h[:, None, :] - h[None, :, :]) ** 2, axis=-1), 0.0))
    return float(d.sum() / (K * (K - 1)))


def probe_diversity(model: MixMatchModel, observed: np.ndarray, k: int, seed: int) -> float:
    """Spread of ``k`` decoder initial states for one fixed observation.

    The same noise stream is used on every call so changes reflect the model only.
    """
    _, _, h_z, _ = model.sample_hidden(observed, k, substream(seed, "probe"))
    if model.config.fusion is FusionMode.LPP:
        return 0.0
    return hidden_diversity(h_z.value)


@dataclass
class Telemetry:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(TELEMETRY_COLUMNS) + "\n")
        for r in self.rows:
            cells = [str(r["epoch"]), str(r["iter"])]
            cells += [f"{r[c]:.9g}" for c in TELEMETRY_COLUMNS[2:]]
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _batch_stream(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of index batches; each pass over the data is a fresh permutation."""
    order = rng.permutation(n)
    pos = 0
    while True:
        out = []
        while len(out) < batch:
            if pos == n:
                order = rng.permutation(n)
                pos = 0
            take = min(batch - len(out), n - pos)
            out.extend(order[pos : pos + take])
            pos += take
        yield np.array(out)


def epoch_of(iteration: int, batch: int, size: int) -> int:
    return (iteration * batch) // size


def train(
    config: TrainingConfig,
    dataset: Dataset,
    skeleton: Skeleton | None = None,
    callback: Callable[[int, MixMatchModel], None] | None = None,
    callback_every: int = 0,
    model: MixMatchModel | None = None,
) -> tuple[MixMatchModel, Telemetry]:
    """Mini-batch Adam with clipping, curriculum indices, teacher forcing and KL annealing.

    ``callback(iteration, model)`` runs every ``callback_every`` iterations
    and after the final one.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    skeleton = skeleton or Skeleton.chain(dataset.joints)
    if skeleton.joint_count != dataset.joints:
        raise ValueError("skeleton and dataset disagree on the joint count")
    seed = config.seed
    mcfg = config.model_config(dataset.joints)
    if model is None:
        model = MixMatchModel.initialize(mcfg, substream(seed, "init"))
    frames = dataset.frames()
    n = len(frames)
    t = dataset.observed
    probe = frames[0, :t]
    schedule = CurriculumSchedule(config.alpha, config.hidden, config.curriculum_step)
    anneal = AnnealSchedule.for_budget(config.iterations)
    teacher = TeacherForcingSchedule(config.tf_epochs_to_zero)
    rng_cur = substream(seed, "curriculum")
    rng_eps = substream(seed, "reparam")
    rng_tf = substream(seed, "teacher")
    batches = _batch_stream(n, config.batch_size, substream(seed, "batch"))
    state = AdamState()
    telemetry = Telemetry()
    acc = {"loss_rot": [], "loss_skl": [], "loss_kl": []}
    mm = mcfg.fusion is FusionMode.MM

    def flush(epoch, it, lam, p):
        telemetry.rows.append(
            {
                "epoch": epoch,
                "iter": it,
                **{k: float(np.mean(v)) for k, v in acc.items()},
                "lambda": lam,
                "p_tf": p,
                "probe_diversity": probe_diversity(model, probe, config.probe_k, seed),
            }
        )
        for v in acc.values():
            v.clear()

    for it in range(config.iterations):
        epoch = epoch_of(it, config.batch_size, n)
        lam = config.kl_weight * anneal(it) if config.use_kl else 0.0
        p_tf = teacher(epoch)
        idx = next(batches)
        index = curriculum_indices(schedule, epoch, rng_cur) if mm else None
        try:
            step = forward_batch(
                model, skeleton, frames[idx], t, index, lam, p_tf, rng_eps, rng_tf,
                config.use_rot, config.use_skl, config.use_kl,
            )
            loss_value = float(step.loss.value)
            if not math.isfinite(loss_value):
                raise ad.NonFiniteError("loss is not finite")
            grads = step.tape.backward(step.loss)
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"iteration {it} (epoch {epoch}): {exc}") from exc
        # parameters off the loss path (e.g. the future encoder under rhp) get zeros
        grads = {k: grads[k] if k in grads else np.zeros_like(v) for k, v in model.params.items()}
        grads = clip_gradients(grads, config.clip_norm)
        new_params, state = adam_step(model.params, grads, state, lr=config.learning_rate)
        model.params = new_params
        acc["loss_rot"].append(step.loss_rot)
        acc["loss_skl"].append(step.loss_skl)
        acc["loss_kl"].append(step.loss_kl)
        last = it == config.iterations - 1
        if last or epoch_of(it + 1, config.batch_size, n) != epoch:
            flush(epoch, it + 1, lam, p_tf)
        if callback is not None and ((callback_every and (it + 1) % callback_every == 0) or last):
            callback(it + 1, model)
    return model, telemetry


def config_to_text(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())
