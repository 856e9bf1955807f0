"""Acceptance gate: one test per criterion, each recording a pass/fail line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
"acceptance criteria" section of the terminal summary.
"""
import hashlib
import math
import os
import subprocess
import sys
import time
import warnings
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest
import yaml

from cogtraj import cli, dataio, metrics, ops, phantom
from cogtraj.config import load_config
from cogtraj.dataio import INTERVAL_GRID, ScoreManifest, ScoreRange, build_stratified_folds
from cogtraj.network import Network, NetworkConfig, build_network, profile
from cogtraj.optim import RmsPropState, TrainPlan, rmsprop_step, smooth_l1, train

import gradcheck
import oracles
from archcheck import architecture_problems
from conftest import GRADCHECK_CONFIG

N_SEEDS = 20
N_RANDOM = 100


# -- 1. gradient correctness ----------------------------------------------------------


def test_1_gradient_correctness(acceptance):
    start = time.perf_counter()
    failures = {}
    for name, check in gradcheck.LAYER_CHECKS.items():
        bad = [seed for seed in range(N_SEEDS) if check(seed)]
        if bad:
            failures[name] = bad
    small = NetworkConfig.from_dict(GRADCHECK_CONFIG)
    tiny = profile("tiny")
    tiny_dropout = profile("tiny", dropout_p=0.5)
    for label, cfg, coords in (("network", small, None), ("tiny profile", tiny, 8),
                               ("tiny profile, dropout 0.5", tiny_dropout, 8)):
        bad = [seed for seed in range(N_SEEDS) if gradcheck.check_network(cfg, seed,
                                                                          max_coords=coords)]
        if bad:
            failures[label] = bad
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    acceptance(1, "gradient correctness", ok,
               f"{len(gradcheck.LAYER_CHECKS)} layer ops (rel err < {gradcheck.LAYER_TOL:g}) and "
               f"3 whole-network configs (rel err < {gradcheck.NETWORK_TOL:g}) over {N_SEEDS} seeds, "
               f"{elapsed:.1f}s (< 120s); failures: {failures or 'none'}")
    assert ok


# -- 2. oracle equivalence ---------------------------------------------------------------


def _oracle_cases():
    """Yields (name, error) pairs; every error must be <= 1e-12."""
    # listed examples
    yield "conv example", abs(ops.conv3d_forward(np.ones((1, 1, 2, 2, 2)), np.ones((1, 1, 2, 2, 2)),
                                                 np.zeros(1), ops.ConvSpec(1, 1, 2)).item() - 8)
    x = np.arange(1.0, 9.0).reshape(1, 1, 2, 2, 2)
    out, arg = ops.maxpool3d_forward(x, ops.PoolSpec(2, 2))
    yield "pool example", abs(out.item() - 8) + abs(arg.item() - 7)
    yield "smooth-l1 quad", abs(smooth_l1(np.array([0.5]), np.zeros(1))[0] - 0.125)
    yield "smooth-l1 linear", abs(smooth_l1(np.array([2.0]), np.zeros(1))[0] - 1.5)
    params = {"t": np.array([1.0])}
    rmsprop_step(params, {"t": np.array([1.0])}, RmsPropState(lr=0.1, rho=0.9, eps=0.0))
    yield "rmsprop example", abs(params["t"][0] - (1 - 0.1 / math.sqrt(0.1)))
    yield "rmse example", abs(metrics.rmse([0, 0.5], [0.5, 0]) - 0.5)
    yield "pearson example", abs(metrics.pearson([1, 2, 3], [1, 2, 4]) - 9 / (2 * math.sqrt(21)))
    two = ScoreManifest([ScoreRange("a", 0, 10), ScoreRange("b", 0, 5)])
    yield "aggregate example", abs(float(metrics.aggregate_score([0.5, 1.0], two)) - 10 / 15)
    s = metrics.summarize([1, 2, 3, 4, 5])
    yield "summarize example", abs(s.mean - 3) + abs(s.se - math.sqrt(2.5) / math.sqrt(5))

    rng = np.random.default_rng(2024)
    for _ in range(N_RANDOM):
        c_in, c_out = (int(v) for v in rng.integers(1, 3, 2))
        kernel = tuple(int(v) for v in rng.integers(1, 4, 3))
        stride = tuple(int(v) for v in rng.integers(1, 3, 3))
        pad = tuple(int(v) for v in rng.integers(0, 2, 3))
        spec = ops.ConvSpec(c_in, c_out, kernel, stride, pad)
        xin = rng.standard_normal((int(rng.integers(1, 3)), c_in) + tuple(int(v) for v in
                                                                         rng.integers(3, 6, 3)))
        w = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(c_out)
        ref = oracles.naive_conv3d(xin, w, b, stride, pad)
        yield "conv3d", float(np.max(np.abs(ops.conv3d_forward(xin, w, b, spec) - ref)))

        window = tuple(int(v) for v in rng.integers(1, 4, 3))
        pstride = tuple(int(v) for v in rng.integers(1, 3, 3))
        xin = rng.standard_normal((2, 2) + tuple(int(v) for v in rng.integers(3, 6, 3)))
        if rng.random() < 0.3:
            xin = np.round(xin)  # plenty of ties
        out, arg = ops.maxpool3d_forward(xin, ops.PoolSpec(window, pstride))
        ref_out, ref_arg = oracles.naive_maxpool3d(xin, window, pstride)
        yield "maxpool3d", float(np.max(np.abs(out - ref_out))) + float(np.any(arg != ref_arg))

        pred, target = rng.normal(0, 2, (3, 5)), rng.normal(0, 2, (3, 5))
        beta = float(rng.uniform(0.1, 3))
        loss, grad = smooth_l1(pred, target, beta)
        ref_loss, ref_grad = oracles.naive_smooth_l1(pred, target, beta)
        yield "smooth_l1", abs(loss - ref_loss) + float(np.max(np.abs(grad.ravel() - ref_grad)))

        lr, rho, eps = rng.uniform(1e-3, 0.5), rng.uniform(0.5, 0.999), rng.uniform(0, 1e-3)
        theta0, cache0, g = rng.normal(size=3)
        cache0 = abs(cache0)
        params = {"t": np.array([theta0])}
        state = RmsPropState(lr, rho, eps)
        state.cache["t"] = np.array([cache0])
        rmsprop_step(params, {"t": np.array([g])}, state)
        (ref_theta, ref_cache), = oracles.naive_rmsprop(theta0, [g], lr, rho, eps, cache0)
        yield "rmsprop_step", abs(params["t"][0] - ref_theta) + abs(state.cache["t"][0] - ref_cache)

        n = int(rng.integers(2, 50))
        a, bvec = rng.standard_normal(n), rng.standard_normal(n)
        yield "rmse", abs(metrics.rmse(a, bvec) - oracles.naive_rmse(a, bvec))
        yield "pearson", abs(metrics.pearson(a, bvec) - oracles.naive_pearson(a, bvec))

        lo = rng.uniform(0, 3, 13)
        hi = lo + rng.uniform(0.5, 10, 13)
        manifest = ScoreManifest([ScoreRange(f"s{i}", p, q) for i, (p, q) in enumerate(zip(lo, hi))])
        sc = rng.uniform(0, 1, 13)
        yield "aggregate_score", abs(float(metrics.aggregate_score(sc, manifest))
                                     - oracles.naive_aggregate(sc, lo, hi))

        vals = list(rng.uniform(0, 1, int(rng.integers(1, 10))))
        mean, se = oracles.naive_summary(vals)
        got = metrics.summarize(vals)
        yield "summarize", abs(got.mean - mean) + abs(got.se - se)


def test_2_oracle_equivalence(acceptance):
    worst = OrderedDict()
    counts = OrderedDict()
    for name, err in _oracle_cases():
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    bad = {k: v for k, v in worst.items() if not v <= 1e-12}
    random_names = ["conv3d", "maxpool3d", "smooth_l1", "rmsprop_step", "rmse", "pearson",
                    "aggregate_score", "summarize"]
    enough = all(counts[n] >= N_RANDOM for n in random_names)
    ok = not bad and enough
    acceptance(2, "oracle equivalence", ok,
               f"{len(worst) - len(random_names)} listed examples plus {N_RANDOM} random instances "
               f"each of {', '.join(random_names)}; worst error "
               f"{max(worst.values()):.2e} (<= 1e-12); failures: {bad or 'none'}")
    assert ok


# -- 3. stratification ------------------------------------------------------------------


def test_3_stratification(acceptance):
    rng = np.random.default_rng(7)
    violations = []
    nondeterministic = []
    histograms = 0
    while histograms < 1000:
        counts = rng.integers(0, 60, len(INTERVAL_GRID))
        k = int(rng.integers(2, 11))
        intervals = np.repeat(INTERVAL_GRID, counts)
        if len(intervals) < k:
            continue
        histograms += 1
        seed = int(rng.integers(0, 2 ** 31))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            plan = build_stratified_folds(intervals, k, seed)
            again = build_stratified_folds(intervals, k, seed)
        if not np.array_equal(plan.assignment, again.assignment):
            nondeterministic.append(histograms)
        for t, row in plan.count_matrix(intervals).items():
            if max(row) - min(row) > 1:
                violations.append((histograms, t, row))
    ok = not violations and not nondeterministic
    acceptance(3, "stratification", ok,
               f"{histograms} random interval histograms, k in [2, 10]: "
               f"{len(violations)} spread > 1, {len(nondeterministic)} non-deterministic plans")
    assert ok


# -- 4. architecture ------------------------------------------------------------------------


def test_4_architecture(acceptance):
    problems = {}
    for name in ("desk", "tiny", "paper"):
        cfg = profile(name)
        if name == "paper":
            # 6000 x 16385 dense weights: check structure without allocating them
            net = Network(cfg, OrderedDict())
            found = architecture_problems(net, cfg.fc_widths, behaviour=False)
        else:
            found = architecture_problems(build_network(cfg, 0), cfg.fc_widths)
        expected_widths = {"desk": (64, 32, 16), "tiny": (16, 16, 16),
                           "paper": (6000, 1000, 500)}[name]
        if cfg.fc_widths != expected_widths:
            found.append(f"fc widths {cfg.fc_widths}")
        if found:
            problems[name] = found
    ok = not problems
    acceptance(4, "architecture conformance", ok,
               "desk, tiny and paper profiles: 3 x (conv, pool, dropout, relu), time appended "
               "once before fc1, profile fc widths, 13-unit linear head, dropout only after "
               f"pooling; problems: {problems or 'none'}")
    assert ok


# -- 5. learnability at desk scale ------------------------------------------------------------


def _desk_config(tmp: Path) -> Path:
    data = tmp / "data"
    doc = {"profile": "desk",
           "data": {"table": str(data / "dataset.csv"), "manifest": str(data / "manifest.json"),
                    "volume_root": str(data)}}
    path = tmp / "desk.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def _baseline_report(manifest, samples, plan):
    preds, acts, intervals, folds = [], [], [], []
    for f in range(plan.k):
        train_set, test_set = dataio.fold_split(samples, plan, f)
        months = np.array([s.interval_months for s in train_set], dtype=float)
        y = np.stack([s.normalized_scores for s in train_set])
        base = phantom.baseline_predictor(months, y)
        test_months = np.array([s.interval_months for s in test_set], dtype=float)
        preds.append(base.predict(test_months[:, None]))
        acts.append(np.stack([s.normalized_scores for s in test_set]))
        intervals += [s.interval_months for s in test_set]
        folds += [f] * len(test_set)
    return metrics.build_report(np.concatenate(preds), np.concatenate(acts), intervals, folds,
                                manifest)


@pytest.mark.slow
def test_5_learnability_desk(acceptance, tmp_path, capsys):
    config = _desk_config(tmp_path)
    cfg = load_config(config)
    assert cfg["phantom"]["n_samples"] == 200 and cfg["phantom"]["dims"] == [32, 32, 32]
    out = tmp_path / "run"
    start = time.perf_counter()
    report = cli.run_all(cfg, out)
    elapsed = time.perf_counter() - start
    capsys.readouterr()

    manifest, samples = cli._load_data(cfg)
    plan = dataio.load_fold_plan(out / cli.FOLDPLAN)
    base = _baseline_report(manifest, samples, plan)
    model_rmse = float(np.mean([c["rmse"] for c in report.subscore_cells]))
    base_rmse = float(np.mean([c["rmse"] for c in base.subscore_cells]))
    improvement = 1 - model_rmse / base_rmse
    pearson = report.aggregate_pearson_summary["all"]
    pearson_mean = pearson.mean if pearson is not None else float("nan")
    first_last = []
    for f in range(plan.k):
        lines = (cli.fold_dir(out, f) / cli.TRAIN_LOG).read_text().splitlines()
        losses = [yaml.safe_load(ln)["loss"] for ln in lines]
        first_last.append(losses[-1] < losses[0])

    ok = improvement >= 0.30 and pearson_mean > 0.7 and elapsed < 15 * 60 and all(first_last)
    acceptance(5, "learnability (desk)", ok,
               f"5-fold CV on 200 x 32^3 phantom in {elapsed / 60:.1f} min (< 15, "
               f"{os.cpu_count()} CPU core(s)); mean subscore RMSE {model_rmse:.4f} vs "
               f"interval-mean baseline {base_rmse:.4f} ({improvement:.0%} better, need >= 30%); "
               f"mean aggregate Pearson {pearson_mean:.3f} (need > 0.7, "
               f"{report.pearson_undefined['all']} undefined cells skipped); "
               f"final loss below first-epoch loss in {sum(first_last)}/{plan.k} folds")
    assert ok


# -- 6. determinism ---------------------------------------------------------------------------


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pipeline_outputs(root: Path) -> dict:
    out = root / "run"
    names = [out / "summary.json", out / metrics.SUBSCORE_CSV, out / metrics.AGGREGATE_CSV,
             root / "data" / "dataset.csv", out / cli.FOLDPLAN]
    for f in range(5):
        fdir = cli.fold_dir(out, f)
        names += [fdir / cli.CHECKPOINT, fdir / metrics.SUBSCORE_CSV, fdir / metrics.AGGREGATE_CSV,
                  fdir / metrics.SUMMARY_JSON]
    return {p.relative_to(root).as_posix(): _digest(p) for p in names}


def test_6_determinism(acceptance, tmp_path):
    digests = []
    for i, hash_seed in enumerate(("1", "2")):
        root = tmp_path / f"run{i}"
        root.mkdir()
        data = root / "data"
        doc = {"profile": "tiny",
               "data": {"table": str(data / "dataset.csv"), "manifest": str(data / "manifest.json"),
                        "volume_root": str(data)},
               # dropout on, so the seeded dropout stream is part of what must repeat
               "network": {"dropout_p": 0.2}}
        (root / "config.yaml").write_text(yaml.safe_dump(doc))
        env = dict(os.environ, PYTHONHASHSEED=hash_seed)
        subprocess.run([sys.executable, "-m", "cogtraj", "run-all", "--config",
                        str(root / "config.yaml"), "--out", str(root / "run"), "--seed", "3"],
                       check=True, capture_output=True, env=env)
        digests.append(_pipeline_outputs(root))
    differing = sorted(k for k in digests[0] if digests[0][k] != digests[1][k])
    ok = not differing
    acceptance(6, "determinism", ok,
               f"two separate run-all processes (tiny profile, dropout 0.2, seed 3): "
               f"{len(digests[0])} files compared (5 checkpoints, fold and merged metric CSVs, "
               f"summary.json files); differing: {differing or 'none'}")
    assert ok


# -- 7. overfit sanity --------------------------------------------------------------------------


def test_7_overfit(acceptance, tmp_path):
    cfg = load_config(profile="tiny")
    ds = phantom.generate(phantom.PhantomSpec.from_dict(dict(cfg["phantom"])), tmp_path)
    samples = dataio.load_dataset(ds.table, ds.manifest)[:4]
    volumes, months, targets = dataio.stack_samples(samples)
    net = build_network(NetworkConfig.from_dict(cfg["network"]), seed=0)
    start = time.perf_counter()
    _, history = train(net, volumes, months, targets,
                       TrainPlan(batch_size=4, epochs=500, seed=0),
                       RmsPropState(lr=cfg["rmsprop"]["lr"]))
    elapsed = time.perf_counter() - start
    reached = next((i + 1 for i, h in enumerate(history) if h < 1e-3), None)
    ok = history[-1] < 1e-3 and elapsed < 60
    acceptance(7, "overfit sanity", ok,
               f"4 phantom samples, tiny profile, 500 epochs: final loss {history[-1]:.2e} "
               f"(< 1e-3), first below 1e-3 at epoch {reached}, {elapsed:.1f}s (< 60s)")
    assert ok
