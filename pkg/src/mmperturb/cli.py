"""Command-line entry point: ``mmperturb <command> [flags]``.

Every command takes ``--config FILE`` (flat ``key = value`` lines, ``#``
comments) and ``--out-dir DIR``. Any config key can also be given as a flag,
``--batch-size 32`` for ``batch_size``; flags override the file, which
overrides the defaults. The fully resolved config is written to
``DIR/config.txt`` and can be passed back with ``--config`` to reproduce a run.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, data, gradcheck, metrics
from .kinematics import Skeleton, SkeletonError
from .mixing import FusionMode
from .model import MixMatchModel, ModelConfig
from .rng import substream
from .training import TrainingConfig, TrainingDiverged, probe_diversity, train

log = logging.getLogger("mmperturb")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_SPEC_KEYS = ("joints", "modes", "observed", "total", "base_amplitude", "base_frequency",
              "mode_amplitude", "noise_std", "records_per_id")
_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainingConfig) if f.name != "seed")


def _defaults() -> dict:
    spec, tcfg = data.SyntheticSpec(), TrainingConfig()
    out = {"seed": 0, "count": 200, "split": (0.8, 0.1, 0.1)}
    out.update({k: getattr(spec, k) for k in _SPEC_KEYS})
    out.update({k: getattr(tcfg, k) for k in _TRAIN_KEYS})
    out.update(
        {
            "k": 50,
            "horizons": (2, 4, 8, 10, 14, 24),
            "k_values": (1, 10, 50, 500),
            "alpha_values": (0.1, 0.3, 0.5, 0.9),
            "space": "positions",
            "selection": "horizon",
            "classifier_iterations": 300,
            "coverage_threshold": 0.3,
            "compare_points": 6,
            "jobs": 1,
            "dataset": "",
            "checkpoint": "",
            "predictions": "",
        }
    )
    return out


DEFAULTS = _defaults()


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _parse_value(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"expected a boolean, got {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.replace(" ", "").split(",") if v)
        return type(default)(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"config line {lineno}: expected 'key = value'")
        if key not in DEFAULTS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def config_text(cfg: dict) -> str:
    return "".join(f"{k} = {_format_value(cfg[k])}\n" for k in DEFAULTS)


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        cfg.update(parse_config_text(path.read_text()))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = _parse_value(key, value)
    return cfg


def synthetic_spec(cfg: dict) -> data.SyntheticSpec:
    try:
        return data.SyntheticSpec(seed=cfg["seed"], **{k: cfg[k] for k in _SPEC_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def training_config(cfg: dict) -> TrainingConfig:
    try:
        return TrainingConfig(seed=cfg["seed"], **{k: cfg[k] for k in _TRAIN_KEYS})
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, cfg: dict) -> None:
    (out / "config.txt").write_text(config_text(cfg))


def _load_dataset(cfg: dict) -> data.Dataset:
    if not cfg["dataset"]:
        raise UsageError("a dataset path is required (--dataset)")
    path = Path(cfg["dataset"])
    if not path.is_file():
        raise DataError(f"dataset {path} does not exist")
    try:
        return data.read_dataset(path)
    except data.DatasetFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _splits(cfg: dict, dataset: data.Dataset):
    try:
        return data.split(dataset, cfg["split"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _skeleton_for(cfg: dict, joints: int) -> Skeleton:
    path = Path(cfg["dataset"]).with_name("skeleton.txt") if cfg["dataset"] else None
    if path is not None and path.is_file():
        try:
            skel = Skeleton.load(path)
        except SkeletonError as exc:
            raise DataError(f"{path}: {exc}") from exc
        if skel.joint_count == joints:
            return skel
    return Skeleton.chain(joints)


def _load_model(cfg: dict) -> MixMatchModel:
    if not cfg["checkpoint"]:
        raise UsageError("a checkpoint path is required (--checkpoint)")
    path = Path(cfg["checkpoint"])
    model_path = path.with_name("model.txt")
    if not path.is_file() or not model_path.is_file():
        raise DataError(f"checkpoint {path} or its model.txt is missing")
    try:
        return MixMatchModel(ModelConfig.from_text(model_path.read_text()), checkpoint.load(path))
    except (checkpoint.CheckpointError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


# -- commands ------------------------------------------------------------------


def cmd_generate_data(args, cfg: dict) -> int:
    spec = synthetic_spec(cfg)
    if cfg["count"] < 1:
        raise UsageError("count must be positive")
    if spec.modes == 1:
        log.warning("modes=1: every prefix has a single future, diversity experiments are degenerate")
    out = _out_dir(args)
    dataset = data.generate_dataset(spec, cfg["count"])
    data.write_dataset(dataset, out / "dataset.txt")
    spec.skeleton().save(out / "skeleton.txt")
    _write_config(out, cfg)
    print(f"records={len(dataset)} ids={cfg['count']} modes={spec.modes} separation={dataset.separation:.6g}")
    return EXIT_OK


def _train_one(cfg: dict, tcfg: TrainingConfig, train_set: data.Dataset, callback=None, every=0):
    skeleton = _skeleton_for(cfg, train_set.joints)
    return train(tcfg, train_set, skeleton, callback=callback, callback_every=every)


def cmd_train(args, cfg: dict) -> int:
    tcfg = training_config(cfg)
    dataset = _load_dataset(cfg)
    train_set, _, _ = _splits(cfg, dataset)
    out = _out_dir(args)
    _write_config(out, cfg)
    model, telemetry = _train_one(cfg, tcfg, train_set)
    checkpoint.save(out / "checkpoint.mmck", model.params)
    (out / "model.txt").write_text(model.config.to_text())
    telemetry.write(out / "telemetry.csv")
    last = telemetry.rows[-1] if telemetry.rows else None
    if last:
        print(f"iterations={tcfg.iterations} epoch={last['epoch']} loss_rot={last['loss_rot']:.6g} "
              f"loss_skl={last['loss_skl']:.6g} loss_kl={last['loss_kl']:.6g}")
    else:
        print("iterations=0 checkpoint holds the initialization")
    return EXIT_OK


def cmd_predict(args, cfg: dict) -> int:
    if cfg["k"] < 1:
        raise UsageError("k must be at least 1")
    model = _load_model(cfg)
    dataset = _load_dataset(cfg)
    _, _, test = _splits(cfg, dataset)
    out = _out_dir(args)
    _write_config(out, cfg)
    t = dataset.observed
    rng = substream(cfg["seed"], "eval", 2)
    records, hidden_rows = [], []
    for recs in metrics.group_by_prefix(test):
        prefix = recs[0].frames[:t]
        frames, h_z = model.generate_k(prefix, cfg["k"], dataset.horizon, rng)
        for s in range(cfg["k"]):
            records.append(data.DatasetRecord(recs[0].id, 0, np.concatenate([prefix, frames[s]])))
            hidden_rows.append(f"{recs[0].id},{s}," + ",".join(format(v, ".17g") for v in h_z[s]))
    pred = data.Dataset(dataset.joints, t, dataset.total, dataset.modes, records, dataset.separation)
    data.write_dataset(pred, out / "predictions.txt")
    header = "id,sample," + ",".join(f"h{i}" for i in range(model.config.hidden))
    (out / "hidden.csv").write_text(header + "\n" + "\n".join(hidden_rows) + "\n")
    print(f"observations={len(records) // cfg['k']} k={cfg['k']} samples={len(records)}")
    return EXIT_OK


def _prediction_pools(cfg: dict, test: data.Dataset):
    path = Path(cfg["predictions"])
    if not path.is_file():
        raise DataError(f"predictions {path} does not exist")
    try:
        pred = data.read_dataset(path)
    except data.DatasetFormatError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if (pred.joints, pred.observed, pred.total) != (test.joints, test.observed, test.total):
        raise DataError("predictions and dataset disagree on the motion layout")
    by_id: dict[int, list] = {}
    for rec in pred.records:
        by_id.setdefault(rec.id, []).append(rec.frames[test.observed:])
    pools = []
    for recs in metrics.group_by_prefix(test):
        if recs[0].id not in by_id:
            raise DataError(f"predictions have no samples for observation {recs[0].id}")
        pools.append((recs, np.stack(by_id[recs[0].id])))
    return pools


def _oracle_pools(test: data.Dataset, count: int):
    """Each record becomes its own observation with ``count`` copies of its true future."""
    t = test.observed
    return [([rec], np.repeat(rec.frames[None, t:], count, axis=0)) for rec in test.records]


def _quality_from_pools(pools, test: data.Dataset, cfg: dict):
    t = test.observed
    real, fake = [], []
    for recs, pool in pools:
        for i, rec in enumerate(recs):
            real.append(rec.frames[t:])
            fake.append(pool[i % len(pool)])
    ccfg = metrics.ClassifierConfig(iterations=cfg["classifier_iterations"], seed=cfg["seed"])
    _, acc = metrics.train_quality_classifier(np.stack(real), np.stack(fake), ccfg)
    return metrics.quality_score(acc)


def _sweep_worker(job):
    cfg, alpha, train_set, eval_set = job
    tcfg = dataclasses.replace(training_config(cfg), alpha=alpha)
    ccfg = metrics.ClassifierConfig(iterations=cfg["classifier_iterations"], seed=cfg["seed"])
    return metrics.alpha_sweep(tcfg, train_set, eval_set, [alpha], cfg["k"] if cfg["k"] >= 2 else 2, ccfg, cfg["space"])


def _map_jobs(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_evaluate(args, cfg: dict) -> int:
    dataset = _load_dataset(cfg)
    train_set, _, test = _splits(cfg, dataset)
    horizons = list(cfg["horizons"])
    if any(not 1 <= h <= dataset.horizon for h in horizons):
        raise UsageError(f"horizons must lie in 1..{dataset.horizon}")
    ks = sorted(set(cfg["k_values"])) if args.k_sweep else []
    if cfg["k"] < 1 or any(k < 1 for k in ks):
        raise UsageError("k values must be at least 1")
    need = max([cfg["k"]] + ks)
    if args.oracle:
        pools = _oracle_pools(test, need)
    elif cfg["predictions"]:
        pools = _prediction_pools(cfg, test)
    else:
        model = _load_model(cfg)
        pools = metrics.sample_pools(model, test, need, substream(cfg["seed"], "eval", 3))
    size = min(len(p) for _, p in pools)
    if need > size:
        raise UsageError(f"k={need} exceeds the {size} samples available per observation")
    out = _out_dir(args)
    _write_config(out, cfg)
    skeleton = _skeleton_for(cfg, dataset.joints)
    k_div = max(2, min(cfg["k"], size))
    div = float(np.mean([metrics.diversity(p[:k_div], cfg["space"], skeleton) for _, p in pools]))
    if cfg["selection"] not in metrics.SELECTIONS:
        raise UsageError(f"selection must be one of {metrics.SELECTIONS}")
    report = metrics.MetricsReport(space=cfg["space"], selection=cfg["selection"])
    report.diversity = div
    report.quality = _quality_from_pools(pools, test, cfg)
    report.mae_by_horizon = metrics.best_of_k_from_pools(pools, test, [cfg["k"]], horizons, cfg["selection"])[cfg["k"]]
    if ks:
        report.k_sweep = metrics.best_of_k_from_pools(pools, test, ks, horizons, cfg["selection"])
    if args.alpha_sweep:
        jobs = [(cfg, float(a), train_set, test) for a in cfg["alpha_values"]]
        for part in _map_jobs(_sweep_worker, jobs, cfg["jobs"]):
            report.alpha_sweep.update(part)
    report.write(out)
    print(f"diversity={report.diversity:.6g} quality={report.quality:.6g} "
          + " ".join(f"mae@{h}={v:.4g}" for h, v in report.mae_by_horizon.items()))
    return EXIT_OK


def _compare_worker(job):
    cfg, mode, train_set, test = job
    tcfg = dataclasses.replace(training_config(cfg), mode=mode)
    every = max(1, tcfg.iterations // max(1, cfg["compare_points"]))
    ccfg = metrics.ClassifierConfig(iterations=cfg["classifier_iterations"], seed=cfg["seed"])
    probe = test.records[0].frames[: test.observed]
    rows = []

    def snapshot(it, model):
        rng = substream(cfg["seed"], "eval", 4, it)
        div = metrics.model_diversity(model, test, max(2, cfg["k"]), rng, cfg["space"])
        qual, _ = metrics.model_quality(model, test, rng, ccfg)
        rows.append((mode, it, probe_diversity(model, probe, tcfg.probe_k, cfg["seed"]), div, qual))

    model, _ = _train_one(cfg, tcfg, train_set, snapshot if tcfg.iterations else None, every)
    if not tcfg.iterations:
        snapshot(0, model)
    mae = metrics.best_of_k(
        model, test, max(1, cfg["k"]), list(cfg["horizons"]), substream(cfg["seed"], "eval", 5), cfg["selection"]
    )
    return rows, float(np.mean(list(mae.values())))


def cmd_compare(args, cfg: dict) -> int:
    dataset = _load_dataset(cfg)
    train_set, _, test = _splits(cfg, dataset)
    training_config(cfg)
    out = _out_dir(args)
    _write_config(out, cfg)
    modes = [m.value for m in FusionMode]
    results = _map_jobs(_compare_worker, [(cfg, m, train_set, test) for m in modes], cfg["jobs"])
    g = metrics.format_number
    progress = ["mode,iter,hidden_diversity,diversity,quality"]
    final = ["mode,hidden_diversity,diversity,quality,best_of_k_mae"]
    for mode, (rows, mae) in zip(modes, results):
        progress += [f"{m},{it},{g(h)},{g(d)},{g(q)}" for m, it, h, d, q in rows]
        _, _, h, d, q = rows[-1]
        final.append(f"{mode},{g(h)},{g(d)},{g(q)},{g(mae)}")
        print(f"{mode}: hidden_diversity={h:.4g} diversity={d:.4g} quality={q:.4g} mae={mae:.4g}")
    (out / "progress.csv").write_text("\n".join(progress) + "\n")
    (out / "final.csv").write_text("\n".join(final) + "\n")
    return EXIT_OK


def cmd_gradcheck(args, cfg: dict) -> int:
    op_tol = args.tolerance if args.tolerance is not None else gradcheck.OP_TOLERANCE
    model_tol = args.tolerance if args.tolerance is not None else gradcheck.MODEL_TOLERANCE
    results = gradcheck.op_suite(cfg["seed"], op_tol)
    modes = [m.value for m in FusionMode] if args.all_modes else ["mm"]
    results += gradcheck.model_suite(cfg["seed"], model_tol, modes)
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out_dir:
        out = _out_dir(args)
        _write_config(out, cfg)
        (out / "gradcheck.txt").write_text(text)
    return EXIT_NUMERIC if failed else EXIT_OK


# -- parser ----------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


COMMANDS = {
    "generate-data": (cmd_generate_data, "write a synthetic multimodal dataset"),
    "train": (cmd_train, "train one model; writes checkpoint and telemetry"),
    "predict": (cmd_predict, "sample K futures per test observation"),
    "evaluate": (cmd_evaluate, "diversity, quality and best-of-K metrics"),
    "compare": (cmd_compare, "train all fusion modes with one seed and budget"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of ops and the model"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmperturb", description="Mix-and-match perturbation for stochastic motion prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out-dir", required=name != "gradcheck", help="output directory")
        for key, default in DEFAULTS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=type(default).__name__.upper(),
                           help=f"default {_format_value(default)}")
        if name == "evaluate":
            p.add_argument("--alpha-sweep", action="store_true", help="train one model per alpha_values entry")
            p.add_argument("--k-sweep", action="store_true", help="best-of-K for every k_values entry")
            p.add_argument("--oracle", action="store_true", help="score the ground truth against itself")
        if name == "gradcheck":
            p.add_argument("--tolerance", type=float, help="override both relative-error tolerances")
            p.add_argument("--all-modes", action="store_true", help="check every fusion mode, not only mm")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        cfg = resolve_config(args)
        return fn(args, cfg)
    except UsageError as exc:
        print(f"mmperturb {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"mmperturb {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"mmperturb {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
