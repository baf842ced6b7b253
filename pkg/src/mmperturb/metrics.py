"""Evaluation: pairwise diversity, classifier quality, best-of-K Euler MAE and sweeps.

Distances for motion diversity default to forward-kinematics joint positions,
which weight all joints by their effect on the pose rather than by angle.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import autodiff as ad
from .data import Dataset, SyntheticSpec, mode_continuations
from .kinematics import EULER_ORDER, Skeleton, forward_kinematics, quat_to_euler, wrap_angle
from .model import MixMatchModel
from .optim import MomentumSGD
from .rng import substream

SPACES = ("quat", "positions", "hidden")
SCORE_MAPPING = "quality = 100 * (1 - classifier test accuracy)"


# -- diversity -----------------------------------------------------------------


def _flatten(motions, space: str, skeleton: Skeleton | None) -> np.ndarray:
    m = np.asarray(motions, dtype=np.float64)
    if space == "positions":
        if skeleton is None:
            skeleton = Skeleton.chain(m.shape[-2])
        m = forward_kinematics(skeleton, _unit(m))
    elif space not in SPACES:
        raise ValueError(f"unknown diversity space {space!r}; choose from {SPACES}")
    return m.reshape(len(m), -1)


def diversity(motions, space: str = "positions", skeleton: Skeleton | None = None) -> float:
    """Mean Euclidean distance over all ordered pairs of ``K`` motions.

    ``motions`` is ``(K, H, J, 4)`` for the ``quat`` and ``positions`` spaces
    and ``(K, L)`` for ``hidden``.
    """
    if len(motions) < 2:
        raise ValueError(f"diversity needs at least 2 motions, got {len(motions)}")
    if len({np.shape(m) for m in motions}) != 1:
        raise ValueError("all motions must share one shape")
    flat = _flatten(motions, space, skeleton)
    # the i != j sum counts each unordered pair twice, pdist lists it once
    return float(pdist(flat).mean())


def _unit(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(n > 1e-12, q / np.maximum(n, 1e-12), q)


# -- quality classifier -----------------------------------------------------------


@dataclass
class ClassifierConfig:
    hidden: int = 64
    layers: tuple[int, ...] = (32, 8)
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    iterations: int = 300
    test_fraction: float = 0.2
    seed: int = 0


class QualityClassifier:
    """GRU over flattened poses followed by a rectified MLP and a sigmoid."""

    def __init__(self, frame_size: int, config: ClassifierConfig | None = None, rng=None):
        self.config = config or ClassifierConfig()
        self.frame_size = frame_size
        rng = rng if rng is not None else substream(self.config.seed, "classifier", 0)
        G = self.config.hidden
        p = {}

        def uni(fan_in, shape):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        p["gru.w_in"] = uni(frame_size, (frame_size, 3 * G))
        p["gru.w_hid"] = uni(G, (G, 3 * G))
        p["gru.b_in"] = uni(G, (3 * G,))
        p["gru.b_hid"] = uni(G, (3 * G,))
        sizes = (G,) + tuple(self.config.layers) + (1,)
        for i in range(len(sizes) - 1):
            p[f"mlp{i}.w"] = uni(sizes[i], (sizes[i], sizes[i + 1]))
            p[f"mlp{i}.b"] = uni(sizes[i], (sizes[i + 1],))
        self.params = p
        self._depth = len(sizes) - 1

    def _logits(self, tape: ad.Tape, x: np.ndarray) -> ad.Var:
        P = {k: tape.param(k, v) for k, v in self.params.items()}
        h = tape.constant(np.zeros((x.shape[0], self.config.hidden)))
        for k in range(x.shape[1]):
            h = ad.gru_cell(x[:, k], h, P["gru.w_in"], P["gru.w_hid"], P["gru.b_in"], P["gru.b_hid"])
        for i in range(self._depth):
            h = ad.add(ad.matmul(h, P[f"mlp{i}.w"]), P[f"mlp{i}.b"])
            if i < self._depth - 1:
                h = ad.relu(h)
        return ad.reshape(h, (x.shape[0],))

    def predict(self, motions) -> np.ndarray:
        """Probability of being real for each motion in ``(N, H, J, 4)``."""
        x = prepare_motions(motions)
        logits = self._logits(ad.Tape(), x).value
        return 0.5 * (1.0 + np.tanh(0.5 * logits))

    def accuracy(self, motions, labels) -> float:
        return float(np.mean((self.predict(motions) >= 0.5) == (np.asarray(labels) > 0.5)))

    def fit(self, motions, labels) -> None:
        """Mini-batch momentum SGD on the logistic loss."""
        cfg = self.config
        x = prepare_motions(motions)
        y = np.asarray(labels, dtype=np.float64)
        rng = substream(cfg.seed, "classifier", 1)
        opt = MomentumSGD(cfg.learning_rate, cfg.momentum)
        n = len(x)
        for _ in range(cfg.iterations):
            idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
            tape = ad.Tape()
            s = self._logits(tape, x[idx])
            # -[y log p + (1 - y) log(1 - p)] written with softplus for stability
            loss = ad.mean(ad.sub(ad.softplus(s), ad.mul(s, y[idx])))
            opt.step(self.params, tape.backward(loss))


def prepare_motions(motions) -> np.ndarray:
    """``(N, H, J, 4)`` motions as unit quaternions flattened to ``(N, H, 4J)``."""
    m = np.asarray(motions, dtype=np.float64)
    if m.ndim != 4 or m.shape[-1] != 4:
        raise ValueError(f"expected motions of shape (N, H, J, 4), got {m.shape}")
    return _unit(m).reshape(m.shape[0], m.shape[1], -1)


def train_quality_classifier(real, generated, config: ClassifierConfig | None = None):
    """Fit a real-vs-generated discriminator; returns ``(classifier, test accuracy)``.

    Only copies of the motions are used, so nothing flows back to the generator.
    """
    config = config or ClassifierConfig()
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) == 0 or len(generated) == 0:
        raise ValueError("both pools must be non-empty")
    if real.shape[1:] != generated.shape[1:]:
        raise ValueError(f"pool shapes differ: {real.shape[1:]} vs {generated.shape[1:]}")
    x = np.concatenate([real, generated])
    y = np.concatenate([np.ones(len(real)), np.zeros(len(generated))])
    order = substream(config.seed, "classifier", 2).permutation(len(x))
    n_test = int(round(config.test_fraction * len(x)))
    test, train = order[:n_test], order[n_test:]
    if n_test < 1 or len(np.unique(y[train])) < 2:
        raise ValueError(f"pool of {len(x)} motions is too small for a {config.test_fraction:g} test split")
    clf = QualityClassifier(x.shape[2] * 4, config)
    clf.fit(x[train], y[train])
    return clf, clf.accuracy(x[test], y[test])


def quality_score(accuracy: float) -> float:
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    return 100.0 * (1.0 - accuracy)


# -- Euler MAE ---------------------------------------------------------------------


def _euler_error(pred, truth) -> np.ndarray:
    """Per-frame Euclidean norm of wrapped Euler differences, shape ``(..., H)``."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape[-3:] != truth.shape[-3:]:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    diff = wrap_angle(quat_to_euler(_unit(pred)) - quat_to_euler(_unit(truth)))
    return np.sqrt(np.sum(diff**2, axis=(-2, -1)))


def _check_horizons(horizons, length: int) -> list[int]:
    horizons = [int(h) for h in horizons]
    bad = [h for h in horizons if not 1 <= h <= length]
    if bad:
        raise ValueError(f"horizons {bad} outside the prediction length 1..{length}")
    return horizons


def mae_euler(pred, truth, horizons=None) -> dict[int, float]:
    """Euler-angle error at each 1-based horizon frame of ``(H, J, 4)`` sequences."""
    err = _euler_error(pred, truth)
    horizons = _check_horizons(range(1, len(err) + 1) if horizons is None else horizons, len(err))
    return {h: float(err[h - 1]) for h in horizons}


SELECTIONS = ("horizon", "sample")


def select_best(pool, truth, horizons, selection: str = "horizon") -> dict[int, float]:
    """Best-of-pool Euler MAE at each horizon.

    ``horizon`` takes the minimum over the pool separately at every horizon,
    so each value can only shrink as the pool grows. ``sample`` reports all
    horizons from the one sample with the smallest horizon-summed MAE.
    """
    err = _euler_error(pool, truth[None])  # (K, H)
    horizons = _check_horizons(horizons, err.shape[1])
    if selection == "horizon":
        return {h: float(err[:, h - 1].min()) for h in horizons}
    if selection != "sample":
        raise ValueError(f"unknown selection {selection!r}; choose from {SELECTIONS}")
    cols = [h - 1 for h in horizons]
    best = int(np.argmin(err[:, cols].sum(axis=1)))
    return {h: float(err[best, h - 1]) for h in horizons}


def group_by_prefix(dataset: Dataset):
    """Records grouped by identical observed prefix, in first-seen order."""
    groups: dict[bytes, list] = {}
    t = dataset.observed
    for rec in dataset.records:
        groups.setdefault(rec.frames[:t].tobytes(), []).append(rec)
    return list(groups.values())


def sample_pools(model: MixMatchModel, dataset: Dataset, count: int, rng) -> list[tuple[list, np.ndarray]]:
    """``count`` generated futures per distinct observation: ``[(records, (K, H, J, 4))]``."""
    t, H = dataset.observed, dataset.horizon
    out = []
    for recs in group_by_prefix(dataset):
        frames, _ = model.generate_k(recs[0].frames[:t], count, H, rng)
        out.append((recs, frames))
    return out


def best_of_k_from_pools(pools, dataset: Dataset, ks, horizons, selection: str = "horizon") -> dict[int, dict[int, float]]:
    """Best-of-K for each ``K`` in ``ks`` on the leading ``K`` samples of shared pools."""
    t = dataset.observed
    result = {}
    for K in ks:
        if K < 1:
            raise ValueError("K must be at least 1")
        rows = []
        for recs, pool in pools:
            if K > len(pool):
                raise ValueError(f"K={K} exceeds the pool of {len(pool)} samples")
            for rec in recs:
                rows.append(select_best(pool[:K], rec.frames[t:], horizons, selection))
        result[K] = {h: float(np.mean([r[h] for r in rows])) for h in horizons}
    return result


def best_of_k(
    model: MixMatchModel, dataset: Dataset, K: int, horizons, rng, selection: str = "horizon"
) -> dict[int, float]:
    """Average over observations of the best-of-``K`` per-horizon Euler MAE."""
    if K < 1:
        raise ValueError("K must be at least 1")
    _check_horizons(horizons, dataset.horizon)
    return best_of_k_from_pools(sample_pools(model, dataset, K, rng), dataset, [K], horizons, selection)[K]


def k_sweep(
    model: MixMatchModel, dataset: Dataset, ks, horizons, rng, selection: str = "horizon"
) -> dict[int, dict[int, float]]:
    """Best-of-K for several ``K`` using nested prefixes of one pool per observation."""
    ks = sorted(int(k) for k in ks)
    _check_horizons(horizons, dataset.horizon)
    return best_of_k_from_pools(sample_pools(model, dataset, ks[-1], rng), dataset, ks, horizons, selection)


# -- model-level metrics -------------------------------------------------------------


def model_diversity(
    model: MixMatchModel, dataset: Dataset, K: int, rng, space: str = "positions", skeleton=None
) -> float:
    """Mean over distinct observations of the diversity of ``K`` generated futures."""
    vals = []
    t, H = dataset.observed, dataset.horizon
    for recs in group_by_prefix(dataset):
        frames, h_z = model.generate_k(recs[0].frames[:t], K, H, rng)
        vals.append(diversity(h_z if space == "hidden" else frames, space, skeleton))
    return float(np.mean(vals))


def model_quality(model: MixMatchModel, dataset: Dataset, rng, config: ClassifierConfig | None = None):
    """``(quality, accuracy)`` with one generated future per real record."""
    t = dataset.observed
    real, fake = [], []
    for recs, pool in sample_pools_sized(model, dataset, rng):
        real.extend(r.frames[t:] for r in recs)
        fake.extend(pool)
    _, acc = train_quality_classifier(np.stack(real), np.stack(fake), config)
    return quality_score(acc), acc


def sample_pools_sized(model: MixMatchModel, dataset: Dataset, rng):
    """Like :func:`sample_pools` with as many samples as records sharing the prefix."""
    t, H = dataset.observed, dataset.horizon
    return [(recs, model.generate_k(recs[0].frames[:t], len(recs), H, rng)[0]) for recs in group_by_prefix(dataset)]


def coverage_from_samples(samples, continuations, threshold: float) -> float:
    """Fraction of the ``M`` modes hit by ``(K, H, J, 4)`` samples.

    A sample hits the mode whose continuation has the smallest mean per-frame
    Euler MAE, provided that error is below ``threshold``.
    """
    continuations = np.asarray(continuations)
    err = np.stack([_euler_error(samples, c[None]).mean(axis=-1) for c in continuations], axis=1)  # (K, M)
    nearest = np.argmin(err, axis=1)
    hit = {int(m) for k, m in enumerate(nearest) if err[k, m] < threshold}
    return len(hit) / len(continuations)


def mode_coverage(
    model: MixMatchModel, dataset: Dataset, spec: SyntheticSpec, K: int, rng, threshold: float = 0.3
) -> float:
    """Mean over observations of the fraction of true future modes covered by ``K`` samples."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if any(r.mode < 1 for r in dataset.records) or spec.modes != dataset.modes:
        raise ValueError("mode coverage needs labeled records from the matching synthetic spec")
    t, H = dataset.observed, dataset.horizon
    vals = []
    for recs in group_by_prefix(dataset):
        frames, _ = model.generate_k(recs[0].frames[:t], K, H, rng)
        vals.append(coverage_from_samples(frames, mode_continuations(spec, recs[0].id)[:, t:], threshold))
    return float(np.mean(vals))


def alpha_sweep(
    config,
    train_set: Dataset,
    eval_set: Dataset,
    alphas,
    K: int = 10,
    classifier: ClassifierConfig | None = None,
    space: str = "positions",
) -> dict[float, tuple[float, float]]:
    """Train one model per ``alpha`` with a shared seed; map alpha to (diversity, quality)."""
    from .training import train

    out = {}
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
        cfg = dataclasses.replace(config, alpha=float(a))
        model, _ = train(cfg, train_set)
        div = model_diversity(model, eval_set, K, substream(cfg.seed, "eval", 0), space)
        qual, _ = model_quality(model, eval_set, substream(cfg.seed, "eval", 1), classifier)
        out[float(a)] = (div, qual)
    return out


# -- report ----------------------------------------------------------------------------


@dataclass
class MetricsReport:
    diversity: float = 0.0
    quality: float = 50.0
    mae_by_horizon: dict[int, float] = field(default_factory=dict)
    k_sweep: dict[int, dict[int, float]] = field(default_factory=dict)
    alpha_sweep: dict[float, tuple[float, float]] = field(default_factory=dict)
    space: str = "positions"
    selection: str = "horizon"

    def conventions(self) -> str:
        return (
            f"euler_order = {EULER_ORDER}\n"
            "angle_wrap = (-pi, pi]\n"
            f"diversity_space = {self.space}\n"
            "diversity = mean Euclidean distance over ordered pairs i != j\n"
            f"score_mapping = {SCORE_MAPPING}\n"
            + (
                "best_of_k = minimum over the K samples, taken separately at each horizon\n"
                if self.selection == "horizon"
                else "best_of_k = sample with smallest horizon-summed MAE, reported per horizon\n"
            )
        )

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {
            "diversity_quality.csv": f"diversity,quality\n{format_number(self.diversity)},{format_number(self.quality)}\n",
            "mae.csv": "horizon,mae\n" + "".join(f"{h},{format_number(v)}\n" for h, v in self.mae_by_horizon.items()),
            "k_sweep.csv": _k_sweep_csv(self.k_sweep),
            "alpha_sweep.csv": "alpha,diversity,quality\n"
            + "".join(f"{format_number(a)},{format_number(d)},{format_number(q)}\n" for a, (d, q) in self.alpha_sweep.items()),
            "conventions.txt": self.conventions(),
        }
        paths = []
        for name, text in files.items():
            (out / name).write_text(text)
            paths.append(out / name)
        return paths


def format_number(x: float) -> str:
    return format(float(x), ".9g")


def _k_sweep_csv(sweep) -> str:
    lines = ["k,horizon,mae"]
    for K, per in sweep.items():
        lines.extend(f"{K},{h},{format_number(v)}" for h, v in per.items())
    return "\n".join(lines) + "\n"
