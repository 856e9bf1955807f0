"""Command-line pipeline: gen-data, split, train, eval, report, predict, run-all.

Each stage is its own process-safe subcommand so folds can be trained in
parallel; every stage reads the same layered config. Exit status is 0 on
success, 1 for validation/config errors and 2 for runtime aborts. Data goes
to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import dataio, metrics
from .config import deep_merge, dump_config, load_config, read_yaml
from .dataio import FoldPlan
from .estimator import SubscoreTrajectoryRegressor, pack_inputs
from .exceptions import CogTrajError, NonFiniteError, ValidationError
from .network import (NetworkConfig, build_network, config_hash, load_network, predict,
                      save_network)
from .phantom import PhantomSpec, generate

log = logging.getLogger("cogtraj")

FOLDPLAN = "foldplan.json"
CHECKPOINT = "checkpoint.ctj"
TRAIN_LOG = "train_log.jsonl"
PREDICTIONS = "predictions.csv"
EFFECTIVE_CONFIG = "effective_config.yaml"


def _out(text: str = "") -> None:
    sys.stdout.write(text + "\n")


def _file_sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def run_hash(cfg: dict) -> str:
    """Hash of everything that determines results: config minus paths, plus the table bytes."""
    payload = {k: v for k, v in cfg.items() if k != "data"}
    payload["data"] = {k: v for k, v in cfg["data"].items()
                       if k not in ("table", "manifest", "volume_root")}
    table = Path(cfg["data"]["table"])
    payload["table_sha"] = _file_sha(table) if table.exists() else None
    return config_hash(payload)


def fold_dir(out: Path, fold: int) -> Path:
    return Path(out) / f"fold_{fold}"


def _load_data(cfg: dict):
    d = cfg["data"]
    manifest = dataio.load_manifest(d["manifest"])
    samples = dataio.load_dataset(d["table"], manifest, d.get("volume_root"),
                                  d.get("out_of_range", "error"))
    if not samples:
        raise ValidationError(f"dataset {d['table']} is empty")
    return manifest, samples


def _network_config(cfg: dict) -> NetworkConfig:
    return NetworkConfig.from_dict(dict(cfg["network"]))


def _write_effective_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / EFFECTIVE_CONFIG).write_text(dump_config(cfg), encoding="utf-8")


# -- stages ---------------------------------------------------------------------


def run_gen_data(cfg: dict, out: Optional[Path] = None) -> dataio.ScoreManifest:
    spec = PhantomSpec.from_dict(dict(cfg["phantom"]))
    out = Path(out) if out is not None else Path(cfg["data"]["table"]).parent
    ds = generate(spec, out)
    intervals = [s["interval_months"] for s in ds.truth["samples"]]
    _out(f"wrote {len(intervals)} samples from {spec.n_subjects} subjects to {out}")
    _out("interval  count")
    for t in sorted(set(intervals)):
        _out(f"{t:>8}  {intervals.count(t)}")
    return ds.manifest


def run_split(cfg: dict, out: Path) -> FoldPlan:
    _, samples = _load_data(cfg)
    f = cfg["folds"]
    groups = [s.subject_id for s in samples] if f.get("group_by_subject") else None
    plan = dataio.build_stratified_folds(samples, int(f["k"]), int(f["seed"]), groups=groups)
    out = Path(out)
    _write_effective_config(cfg, out)
    dataio.save_fold_plan(plan, out / FOLDPLAN)

    matrix = plan.count_matrix([s.interval_months for s in samples])
    _out("interval " + " ".join(f"fold{k:<3}" for k in range(plan.k)))
    for t, counts in matrix.items():
        _out(f"{t:>8} " + " ".join(f"{c:<7}" for c in counts))
    leaks = dataio.leakage_report(samples, plan)
    total = sum(len(v) for v in leaks.values())
    print(f"subject leakage: {total} subject(s) shared between train and test across folds "
          f"({', '.join(f'fold {k}: {len(v)}' for k, v in leaks.items())})", file=sys.stderr)
    return plan


def _split_arrays(cfg, out, fold):
    manifest, samples = _load_data(cfg)
    plan = dataio.load_fold_plan(Path(out) / FOLDPLAN)
    train_set, test_set = dataio.fold_split(samples, plan, fold)
    return manifest, samples, plan, train_set, test_set


def make_estimator(cfg: dict, callbacks=()) -> SubscoreTrajectoryRegressor:
    t, r = cfg["train"], cfg["rmsprop"]
    return SubscoreTrajectoryRegressor(
        profile=cfg["profile"], network=dict(cfg["network"]),
        lr=r["lr"], rho=r["rho"], eps=r["eps"],
        batch_size=t["batch_size"], epochs=t["epochs"], smooth_l1_beta=t["smooth_l1_beta"],
        clip_norm=t.get("clip_norm"), shuffle=t["shuffle"], seed=t["seed"],
        clamp_predictions=cfg["eval"].get("clamp", False),
        strict_months=cfg["eval"].get("strict_months", True),
        callbacks=list(callbacks))


def run_train(cfg: dict, out: Path, fold: int) -> Path:
    _, _, _, train_set, _ = _split_arrays(cfg, out, fold)
    volumes, months, targets = dataio.stack_samples(train_set)
    digest = run_hash(cfg)
    fdir = fold_dir(out, fold)
    fdir.mkdir(parents=True, exist_ok=True)
    log_path = fdir / TRAIN_LOG
    settings = dict(cfg["rmsprop"])

    with open(log_path, "w", encoding="utf-8") as fh:
        def write_line(info):
            line = dict(info, fold=fold, config_hash=digest, rmsprop=settings,
                        n_train=len(train_set))
            fh.write(json.dumps(line, sort_keys=True) + "\n")
            fh.flush()
            log.info("fold %d epoch %d loss %.6f (%.1fs)", fold, info["epoch"], info["loss"],
                     info["wall_time"])

        est = make_estimator(cfg, [write_line])
        if est.train_plan().epochs == 0:
            net = build_network(_network_config(cfg), int(cfg["train"]["seed"]))
        else:
            try:
                est.fit(pack_inputs(volumes, months), targets)
            except NonFiniteError as exc:
                raise NonFiniteError(f"fold {fold}: {exc}") from exc
            net = est.network_
    save_network(net, fdir / CHECKPOINT)
    (fdir / "config_hash").write_text(digest + "\n", encoding="utf-8")
    return fdir / CHECKPOINT


def _check_checkpoint(net, cfg: dict, source: str) -> None:
    expected = _network_config(cfg).to_dict()
    got = net.config.to_dict()
    for key in expected:
        if expected[key] != got.get(key):
            raise ValidationError(f"{source}: checkpoint {key}={got.get(key)!r} does not match "
                                  f"config {key}={expected[key]!r}")


def run_eval(cfg: dict, out: Path, fold: int, checkpoint: Optional[Path] = None,
             predictor: Optional[Callable] = None) -> metrics.MetricsReport:
    """Evaluate one held-out fold and write its metric files.

    ``predictor(volumes, months) -> predictions`` replaces the checkpoint,
    which tests use to plug in a perfect oracle.
    """
    manifest, samples, plan, _, test_set = _split_arrays(cfg, out, fold)
    volumes, months, targets = dataio.stack_samples(test_set)
    fdir = fold_dir(out, fold)
    if predictor is None:
        checkpoint = Path(checkpoint) if checkpoint else fdir / CHECKPOINT
        net = load_network(checkpoint)
        _check_checkpoint(net, cfg, str(checkpoint))
        preds = predict(net, volumes, months, clamp=cfg["eval"].get("clamp", False),
                        strict_months=cfg["eval"].get("strict_months", True))
    else:
        preds = np.asarray(predictor(volumes, months))
    preds = preds.astype(np.float64)
    report = metrics.build_report(preds, targets, months.astype(int), [fold] * len(test_set),
                                  manifest)
    meta = {"config_hash": run_hash(cfg), "folds": [fold], "k": plan.k,
            "train_seed": cfg["train"]["seed"], "fold_seed": plan.seed,
            "profile": cfg["profile"]}
    metrics.write_report_files(report, fdir, meta)
    with open(fdir / PREDICTIONS, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "volume_path", "interval_months"]
                   + [f"pred_{n}" for n in manifest.names] + [f"actual_{n}" for n in manifest.names])
        for s, p, a in zip(test_set, preds, targets):
            w.writerow([s.subject_id, s.volume_path.as_posix(), s.interval_months]
                       + [repr(float(v)) for v in p] + [repr(float(v)) for v in a])
    return report


def run_report(cfg: dict, out: Path) -> metrics.MetricsReport:
    out = Path(out)
    manifest = dataio.load_manifest(cfg["data"]["manifest"])
    plan = dataio.load_fold_plan(out / FOLDPLAN)
    missing = [f for f in range(plan.k)
               if not (fold_dir(out, f) / metrics.SUMMARY_JSON).exists()]
    if missing:
        raise ValidationError(f"missing evaluation outputs for fold(s) {missing} in {out}")
    hashes = set()
    sub_cells, agg_cells = [], []
    for f in range(plan.k):
        fdir = fold_dir(out, f)
        summary = json.loads((fdir / metrics.SUMMARY_JSON).read_text("utf-8"))
        hashes.add(summary["metadata"].get("config_hash"))
        s, a = metrics.read_cells(fdir)
        sub_cells += s
        agg_cells += a
    if len(hashes) != 1:
        raise ValidationError(f"refusing to merge folds with differing config hashes: {sorted(map(str, hashes))}")
    report = metrics.report_from_cells(sub_cells, agg_cells, manifest)
    meta = {"config_hash": hashes.pop(), "folds": list(range(plan.k)), "k": plan.k,
            "train_seed": cfg["train"]["seed"], "fold_seed": plan.seed,
            "profile": cfg["profile"]}
    metrics.write_report_files(report, out, meta)
    _out(metrics.format_table(report))
    return report


def run_predict(cfg: dict, checkpoint: Path, volume: Path, months: List[float],
                permissive: bool = False) -> List[dict]:
    net = load_network(checkpoint)
    vol = dataio.intensity_normalize(dataio.load_volume(volume))
    batch = np.repeat(vol[None], len(months), axis=0)
    preds = predict(net, batch, months, clamp=cfg["eval"].get("clamp", False),
                    strict_months=not permissive)
    names = None
    mpath = Path(cfg["data"]["manifest"])
    if mpath.exists():
        manifest = dataio.load_manifest(mpath)
        if len(manifest) == net.config.output_dim:
            names = manifest.names
    rows = []
    for m, p in zip(months, preds):
        values = [float(v) for v in p]
        rows.append({"months": m, "subscores": dict(zip(names, values)) if names else values})
    _out(json.dumps(rows, indent=1))
    return rows


def run_all(cfg: dict, out: Path) -> metrics.MetricsReport:
    if not Path(cfg["data"]["table"]).exists():
        run_gen_data(cfg)
    plan = run_split(cfg, out)
    for f in range(plan.k):
        run_train(cfg, out, f)
        run_eval(cfg, out, f)
    return run_report(cfg, out)


# -- argument parsing -----------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML config file merged over the built-in defaults")
    p.add_argument("--profile", choices=["desk", "paper", "tiny"], help="named preset")
    p.add_argument("--seed", type=int, help="overrides train, fold and phantom seeds")
    p.add_argument("--deterministic", action="store_true", default=None,
                   help="fixed seeds and batch order (the default)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cogtraj", description=__doc__.splitlines()[0],
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic phantom dataset")
    g.add_argument("--spec", type=Path, help="YAML phantom spec merged over the config")
    sub.add_parser("split", parents=[common], help="build the stratified fold plan")
    t = sub.add_parser("train", parents=[common], help="train on every fold but --fold")
    t.add_argument("--fold", type=int, required=True)
    e = sub.add_parser("eval", parents=[common], help="evaluate the held-out --fold")
    e.add_argument("--fold", type=int, required=True)
    e.add_argument("--checkpoint", type=Path)
    sub.add_parser("report", parents=[common], help="merge fold metrics into summary.json")
    pr = sub.add_parser("predict", parents=[common], help="predict subscores for one volume")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--volume", type=Path, required=True)
    pr.add_argument("--months", type=float, nargs="+", required=True)
    pr.add_argument("--permissive", action="store_true",
                    help="warn instead of failing on months outside [0, time_scale]")
    sub.add_parser("run-all", parents=[common], help="split, train and eval every fold, report")
    return parser


def _resolve(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides.update({"train.seed": args.seed, "folds.seed": args.seed,
                          "phantom.seed": args.seed})
    if args.deterministic:
        overrides["train.deterministic"] = True
    cfg = load_config(args.config, args.profile, overrides)
    spec = getattr(args, "spec", None)
    if spec is not None:
        cfg["phantom"] = deep_merge(cfg["phantom"], read_yaml(spec.read_text("utf-8"), str(spec)))
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    out = args.out or Path("runs/latest")
    try:
        cfg = _resolve(args)
        cmd = args.command
        if cmd == "gen-data":
            run_gen_data(cfg, args.out)
        elif cmd == "split":
            run_split(cfg, out)
        elif cmd == "train":
            run_train(cfg, out, args.fold)
        elif cmd == "eval":
            run_eval(cfg, out, args.fold, args.checkpoint)
        elif cmd == "report":
            run_report(cfg, out)
        elif cmd == "predict":
            run_predict(cfg, args.checkpoint, args.volume, args.months, args.permissive)
        elif cmd == "run-all":
            run_all(cfg, out)
    except (CogTrajError, OSError) as exc:
        if isinstance(exc, NonFiniteError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime abort
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
