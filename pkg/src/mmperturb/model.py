"""Recurrent CVAE motion model with pluggable noise fusion.

Shapes: ``B`` batch, ``L`` hidden size, ``J`` joints, frames are flattened to
``4J`` values. ``k = ceil(alpha L)`` coordinates of the hidden state are kept
at the index set, the ``L - k`` others carry noise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .mixing import FusionMode, IndexSet, kept_count, noise_dim, resample_var, sample_indices


@dataclass
class ModelConfig:
    joints: int = 5
    hidden: int = 64
    alpha: float = 0.5
    mode: str = "mm"
    residual_velocity: bool = False
    rhp_z_dim: int = 0  # 0 -> same noise size as the mixing modes

    def __post_init__(self):
        self.mode = FusionMode(self.mode).value
        kept_count(self.hidden, self.alpha)
        if self.joints < 1 or self.hidden < 1:
            raise ValueError("joints and hidden must be positive")

    @property
    def fusion(self) -> FusionMode:
        return FusionMode(self.mode)

    @property
    def frame_size(self) -> int:
        return 4 * self.joints

    @property
    def kept(self) -> int:
        return kept_count(self.hidden, self.alpha)

    @property
    def z_dim(self) -> int:
        if self.fusion is FusionMode.RHP and self.rhp_z_dim > 0:
            return self.rhp_z_dim
        return noise_dim(self.hidden, self.alpha)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in types:
                raise ValueError(f"unknown model key {key!r}")
            kind = types[key]
            if kind == "bool":
                values[key] = val.lower() in ("1", "true", "yes")
            elif kind == "int":
                values[key] = int(val)
            elif kind == "float":
                values[key] = float(val)
            else:
                values[key] = val
        return cls(**values)


@dataclass
class TeacherForcingSchedule:
    epochs_to_zero: int
    initial: float = 1.0

    def __call__(self, epoch: int) -> float:
        if self.epochs_to_zero < 1:
            raise ValueError("epochs_to_zero must be positive")
        return max(0.0, self.initial * (1.0 - epoch / self.epochs_to_zero))


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in), in checkpoint order."""
    L, D, k, zd = cfg.hidden, cfg.frame_size, cfg.kept, cfg.z_dim
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}

    def gru(prefix, d_in):
        shapes[f"{prefix}.w_in"] = ((d_in, 3 * L), d_in)
        shapes[f"{prefix}.w_hid"] = ((L, 3 * L), L)
        shapes[f"{prefix}.b_in"] = ((3 * L,), d_in)
        shapes[f"{prefix}.b_hid"] = ((3 * L,), L)

    def mlp(prefix, d_in, d_hidden, d_out):
        shapes[f"{prefix}.w1"] = ((d_in, d_hidden), d_in)
        shapes[f"{prefix}.b1"] = ((d_hidden,), d_in)
        shapes[f"{prefix}.w2"] = ((d_hidden, d_out), d_hidden)
        shapes[f"{prefix}.b2"] = ((d_out,), d_hidden)

    gru("past", D)
    gru("future", D)
    mlp("cvae_enc", L, L, 2 * zd)
    shapes["res.proj"] = ((L, k), L)
    mlp("res", L, L, k)
    mlp("cvae_dec", L, L, L)
    dec_in = D + (zd if cfg.fusion is FusionMode.LPP else 0)
    gru("decoder", dec_in)
    shapes["head.w"] = ((L, D), L)
    shapes["head.b"] = ((D,), L)
    if cfg.fusion is FusionMode.RHP:
        shapes["rhp.w"] = ((L, zd), zd)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {
        name: _uniform(rng, fan_in, shape) for name, (shape, fan_in) in parameter_shapes(cfg).items()
    }


class Bound:
    """Lazily binds model parameters onto one tape."""

    def __init__(self, tape: ad.Tape, params: dict[str, np.ndarray]):
        self.tape = tape
        self.params = params

    def __getitem__(self, name: str) -> ad.Var:
        return self.tape.param(name, self.params[name])


def linear(P: Bound, prefix: str, x: ad.Var, w="w", b="b") -> ad.Var:
    return ad.add(ad.matmul(x, P[f"{prefix}.{w}"]), P[f"{prefix}.{b}"])


def mlp2(P: Bound, prefix: str, x: ad.Var) -> ad.Var:
    hid = ad.tanh(linear(P, prefix, x, "w1", "b1"))
    return linear(P, prefix, hid, "w2", "b2")


def gru_step(P: Bound, prefix: str, x, h) -> ad.Var:
    return ad.gru_cell(
        x, h, P[f"{prefix}.w_in"], P[f"{prefix}.w_hid"], P[f"{prefix}.b_in"], P[f"{prefix}.b_hid"]
    )


def reparameterize(mu, logvar, eps):
    """``mu + exp(logvar / 2) * eps`` for arrays or tape variables."""
    if isinstance(mu, ad.Var):
        return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))
    return np.asarray(mu) + np.exp(0.5 * np.asarray(logvar)) * np.asarray(eps)


class MixMatchModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            missing = set(expected) ^ set(params)
            raise ValueError(f"parameter names do not match the configuration: {sorted(missing)}")
        for name, (shape, _) in expected.items():
            if params[name].shape != shape:
                raise ValueError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "MixMatchModel":
        return cls(config, init_params(config, rng))

    def bind(self, tape: ad.Tape) -> Bound:
        return Bound(tape, self.params)

    # -- encoders -----------------------------------------------------------

    def encode(self, P: Bound, prefix: str, frames: np.ndarray) -> ad.Var:
        """Final GRU state over ``frames`` of shape ``(B, t, 4J)`` from a zero state."""
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[1] < 1:
            raise ValueError(f"need a non-empty (B, t, 4J) observation, got shape {frames.shape}")
        if frames.shape[2] != self.config.frame_size:
            raise ad.ShapeError(
                f"frames have {frames.shape[2]} values, model expects {self.config.frame_size}"
            )
        h = P.tape.constant(np.zeros((frames.shape[0], self.config.hidden)))
        for k in range(frames.shape[1]):
            h = gru_step(P, prefix, frames[:, k], h)
        return h

    def encode_past(self, P: Bound, frames: np.ndarray) -> ad.Var:
        return self.encode(P, "past", frames)

    def encode_future(self, P: Bound, frames: np.ndarray) -> ad.Var:
        return self.encode(P, "future", frames)

    def fusion_indices(self, index: IndexSet | None) -> IndexSet:
        cfg = self.config
        if cfg.fusion is FusionMode.MM:
            if index is None:
                raise ValueError("mix-and-match fusion needs an index set")
            return index
        return IndexSet.prefix(cfg.hidden, cfg.kept)

    def posterior(self, P: Bound, h_past: ad.Var, h_future: ad.Var, index: IndexSet | None):
        """CVAE encoder on the past/future mix; returns ``(mu, logvar)``."""
        mixed = resample_var(h_past, h_future, self.fusion_indices(index))
        out = mlp2(P, "cvae_enc", mixed)
        zd = self.config.z_dim
        return ad.gather(out, np.arange(zd)), ad.gather(out, np.arange(zd, 2 * zd))

    # -- fusion -------------------------------------------------------------

    def perturbed_hidden(self, P: Bound, h: ad.Var, z, index: IndexSet | None) -> ad.Var:
        """Decoder initial state ``h_z`` from the past state and one noise vector per sample."""
        cfg = self.config
        fusion = cfg.fusion
        if fusion is FusionMode.LPP:
            return h
        if fusion is FusionMode.RHP:
            return mlp2(P, "cvae_dec", ad.add(h, ad.matmul(z, ad.transpose(P["rhp.w"]))))
        idx = self.fusion_indices(index)
        u = resample_var(h, z, idx)
        r = ad.add(ad.matmul(u, P["res.proj"]), mlp2(P, "res", u))
        v = place(r, h, idx)
        return mlp2(P, "cvae_dec", v)

    # -- decoder ------------------------------------------------------------

    def decode(
        self,
        P: Bound,
        h_z: ad.Var,
        last_frame: np.ndarray,
        horizon: int,
        teacher: np.ndarray | None = None,
        p_tf: float = 0.0,
        rng: np.random.Generator | None = None,
        step_noise: Callable[[int], object] | None = None,
    ) -> list[ad.Var]:
        """Roll the motion decoder for ``horizon`` frames; one ``(B, 4J)`` var per frame.

        Before each step after the first, the ground-truth previous frame from
        ``teacher`` is fed with probability ``p_tf``, otherwise the model's own
        previous output. ``step_noise(k)`` supplies the per-step noise that is
        concatenated to the input in ``lpp`` mode.
        """
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        if p_tf > 0 and teacher is None:
            raise ValueError("teacher frames are required when p_tf > 0")
        if teacher is not None and teacher.shape[1] < horizon:
            raise ValueError("teacher sequence shorter than the horizon")
        cfg = self.config
        tape = P.tape
        x = tape.constant(last_frame)
        h = h_z
        outputs = []
        for k in range(horizon):
            if k > 0:
                use_truth = p_tf >= 1.0 or (p_tf > 0.0 and rng.random() < p_tf)
                x = tape.constant(teacher[:, k - 1]) if use_truth else outputs[-1]
            inp = x
            if cfg.fusion is FusionMode.LPP:
                inp = ad.concat([x, step_noise(k)], axis=-1)
            h = gru_step(P, "decoder", inp, h)
            y = linear(P, "head", h)
            if cfg.residual_velocity:
                y = ad.add(x, y)
            outputs.append(y)
        return outputs

    # -- inference ----------------------------------------------------------

    def sample_hidden(self, observed: np.ndarray, count: int, rng: np.random.Generator):
        """Draw ``count`` decoder initial states for one observation ``(t, J, 4)``.

        Returns ``(tape, bound, h_z, index)``; ``h_z`` has shape ``(count, L)``.
        """
        cfg = self.config
        tape = ad.Tape()
        P = self.bind(tape)
        obs = np.asarray(observed, dtype=np.float64).reshape(1, len(observed), -1)
        h = self.encode_past(P, obs)
        h = ad.gather(h, np.zeros(count, dtype=np.intp), axis=0)
        index = sample_indices(cfg.hidden, cfg.alpha, rng) if cfg.fusion is FusionMode.MM else None
        z = None
        if cfg.fusion is not FusionMode.LPP:
            z = rng.standard_normal((count, cfg.z_dim))
        return tape, P, self.perturbed_hidden(P, h, z, index), index

    def generate_k(
        self, observed: np.ndarray, count: int, horizon: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """``count`` futures ``(K, horizon, J, 4)`` and their decoder states ``(K, L)``."""
        if count < 1:
            raise ValueError("K must be at least 1")
        cfg = self.config
        tape, P, h_z, _ = self.sample_hidden(observed, count, rng)
        noise = None
        if cfg.fusion is FusionMode.LPP:
            noise = lambda k: rng.standard_normal((count, cfg.z_dim))  # noqa: E731
        last = np.repeat(np.asarray(observed)[-1].reshape(1, -1), count, axis=0)
        outs = self.decode(P, h_z, last, horizon, step_noise=noise)
        frames = np.stack([o.value for o in outs], axis=1)
        return frames.reshape(count, horizon, cfg.joints, 4), h_z.value.copy()


def place(r: ad.Var, h: ad.Var, index: IndexSet) -> ad.Var:
    """Length-L vector with ``r`` at ``index`` and ``h`` at the complementary positions."""
    L = index.length
    comp = index.complement()
    parts = []
    if len(index):
        parts.append(ad.scatter(r, index.chosen, L))
    if len(comp):
        parts.append(ad.scatter(ad.gather(h, comp), comp, L))
    out = parts[0]
    for p in parts[1:]:
        out = ad.add(out, p)
    return out
