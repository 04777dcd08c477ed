"""
Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line and then asserts.  Under
output capture the lines are collected and repeated in the terminal summary.
Run with ``pytest tests/test_acceptance.py -v``.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from advtrust import cli, nn, spectral
from advtrust.attacks import AttackConfig, deepfool_attack, pgd_batch
from advtrust.config import load_config
from advtrust.distill import DistillConfig, kd_loss, select_transfer_set
from advtrust.reports import read_csv
from advtrust.vulnerability import (
    NormalizationStats,
    TrustPartition,
    flagging_accuracy,
    kmeans2,
    normalize_ddb,
    normalize_flipfreq,
    trust_score,
)
from advtrust.errors import UndefinedMetricError

from conftest import ACCEPTANCE_LINES, ARCHS, make_net
from test_attacks import UNBOUNDED, linear_binary
from test_distill import profiles_for, toy_dataset
from test_nn import gradcheck_instances
from test_spectral import basis_image, mean_threshold_net, top_band_probe
from test_vulnerability import brute_force_2means, partition_sse

SYNTHETIC = Path(__file__).resolve().parents[1] / "configs" / "synthetic.json"
PIPELINE = ("train", "adv-train", "ddb-vs-steps", "band-sweep", "score", "distill")


def verdict(number, title, ok, detail, elapsed=None, limit=None):
    if limit is not None:
        ok = ok and elapsed < limit
    timing = "" if elapsed is None else f" [{elapsed:.1f}s" + (f" < {limit:.0f}s]" if limit else "]")
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title}: {detail}{timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_criterion_01_gradients():
    start = time.perf_counter()
    worst, count = 0.0, 0
    for arch in sorted(ARCHS):
        for net, x, y in gradcheck_instances(arch, count=20):
            report = nn.gradient_check(net, x, y, step=1e-3, tol=1e-3)
            worst = max(worst, max(report.errors.values()))
            count += 1
    rng = np.random.default_rng(101)
    for _ in range(20):
        z = rng.normal(0, 2, size=5)
        y = int(rng.integers(5))
        _, g = nn.cross_entropy(z, y)
        worst = max(worst, nn.relative_error(g, nn.numeric_grad(lambda: nn.cross_entropy(z, y)[0], z, 1e-3)))
        s, t = rng.normal(0, 3, size=(3, 5)), rng.normal(0, 3, size=(3, 5))
        labels = rng.integers(0, 5, size=3)
        _, g, _, _ = kd_loss(s, t, labels, 8.0, 0.2)
        num = nn.numeric_grad(lambda: kd_loss(s, t, labels, 8.0, 0.2)[0], s, 1e-3)
        worst = max(worst, nn.relative_error(g, num))
        count += 2
    elapsed = time.perf_counter() - start
    verdict(1, "finite-difference gradients", worst < 1e-3,
            f"{count} instances over {len(ARCHS)} architectures and 2 losses, max rel err {worst:.2e}",
            elapsed, 30)


def test_criterion_02_dct():
    start = time.perf_counter()
    x = np.random.default_rng(102).uniform(size=(100, 3, 16, 16)).astype(np.float32)
    f = spectral.dct2(x)
    round_trip = float(np.abs(spectral.idct2(f) - x).max())
    ex = (x.astype(np.float64) ** 2).sum(axis=(1, 2, 3))
    parseval = float(np.max(np.abs((f**2).sum(axis=(1, 2, 3)) - ex) / ex))
    const = spectral.dct2(np.full((3, 16, 16), 0.37))
    dc_err = float(np.abs(const[:, 0, 0] - 0.37 * 16).max())
    const[:, 0, 0] = 0
    ac = float(np.abs(const).max())
    elapsed = time.perf_counter() - start
    ok = round_trip < 1e-4 and parseval < 1e-4 and dc_err <= 1e-5 and ac <= 1e-5
    verdict(2, "DCT round trip / Parseval / DC-only", ok,
            f"round trip {round_trip:.1e}, Parseval {parseval:.1e}, DC {dc_err:.1e}, AC {ac:.1e}",
            elapsed, 10)


def test_criterion_03_attack_geometry():
    start = time.perf_counter()
    rng = np.random.default_rng(103)
    archs = ["cnn", "maxpool2d", "conv2d", "relu"]
    violations, iterates = 0, 0
    for pair in range(200):
        net = make_net(archs[pair % 4], seed=1000 + pair)
        x = rng.uniform(size=(1,) + net.spec.input_shape).astype(np.float32)
        eps = float(rng.uniform(0.005, 0.2))
        cfg = AttackConfig.pgd(epsilon=eps, step_size=float(rng.uniform(0.2, 1.0)) * eps,
                               max_steps=int(rng.integers(1, 12)))

        def check(t, xt, x0=x, eps=eps):
            nonlocal violations, iterates
            iterates += 1
            if np.abs(xt.astype(np.float64) - x0).max() > eps + 1e-6 or xt.min() < 0 or xt.max() > 1:
                violations += 1

        check(None, pgd_batch(net, x, cfg, callback=check).adversarial)
    worst = 0.0
    df = AttackConfig.deepfool(pixel_bounds=UNBOUNDED)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        w, x = rng.normal(size=n), rng.uniform(size=n)
        b = float(rng.uniform(0.05, 2.0) * np.linalg.norm(w) - w @ x)
        res = deepfool_attack(linear_binary(w, b), x, df)
        analytic = (1 + df.overshoot) * abs(w @ x + b) / np.linalg.norm(w)
        worst = max(worst, abs(res.delta - analytic) / analytic if res.success else math.inf)
    elapsed = time.perf_counter() - start
    verdict(3, "attack geometry", violations == 0 and worst <= 0.02,
            f"{iterates} PGD iterates on 200 pairs with {violations} violations, "
            f"DeepFool max rel gap {worst:.1e} on 50 hyperplanes", elapsed, 60)


def test_criterion_04_flipping_frequency_oracles():
    start = time.perf_counter()
    shape = (3, 16, 16)
    rng = np.random.default_rng(104)
    images = rng.uniform(size=(100,) + shape)
    means = images.mean(axis=(1, 2, 3))
    F_dc = spectral.flipping_frequencies(mean_threshold_net(shape, float(np.median(means))), images)
    probe_images = rng.uniform(0.3, 0.7, size=(100,) + shape)
    probe_images[:50, 0] += basis_image(15, 15, 16, 16)
    probe = top_band_probe(shape)
    decided = nn.predict(probe, probe_images) == 1
    F_top = spectral.flipping_frequencies(probe, probe_images)
    elapsed = time.perf_counter() - start
    kmax = spectral.k_max(shape)
    ok = bool(np.all(F_dc == 0) and decided.sum() >= 50 and np.all(F_top[decided] == kmax))
    verdict(4, "flipping-frequency oracles", ok,
            f"DC-mean F=0 on {int((F_dc == 0).sum())}/100, top-band probe F={kmax} on "
            f"{int((F_top[decided] == kmax).sum())}/{int(decided.sum())} band-decided samples", elapsed, 30)


def test_criterion_05_trust_formulas():
    stats = NormalizationStats(2, 6, 0, 32)
    examples = [
        (normalize_ddb(2, stats), 0.0), (normalize_ddb(6, stats), 1.0), (normalize_ddb(4, stats), 0.5),
        (normalize_ddb(10, stats), 1.0), (normalize_ddb(-1, stats), 0.0),
        (normalize_ddb(17.0, NormalizationStats(3, 3, 0, 32)), 0.5),
        (normalize_flipfreq(0, stats), 1.0), (normalize_flipfreq(32, stats), 0.0),
        (normalize_flipfreq(16, stats), 0.5), (normalize_flipfreq(40, stats), 0.0),
        (normalize_flipfreq(5, NormalizationStats(2, 6, 4, 4)), 0.5),
        (trust_score(0.0, 0.0), 0.0), (trust_score(1.0, 0.0), 0.0), (trust_score(0.0, 1.0), 0.0),
        (trust_score(1.0, 1.0), 2.0 / (2.0 + 1e-5)),
    ]
    exact = sum(got == want for got, want in examples)
    g = np.linspace(0, 1, 50)
    T = trust_score(g[:, None], g[None, :])
    recompute = float(np.abs(T - 2 * g[:, None] * g[None, :] / (g[:, None] + g[None, :] + 1e-5)).max())
    monotone = bool(np.all(np.diff(T, axis=0) >= 0) and np.all(np.diff(T, axis=1) >= 0))
    ok = exact == len(examples) and recompute < 1e-9 and monotone
    verdict(5, "normalisation and trust score", ok,
            f"{exact}/{len(examples)} exact examples, recompute err {recompute:.1e}, "
            f"50x50 grid monotone={monotone}")


def test_criterion_06_kmeans_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(106)
    agree = total = 0
    while total < 200:
        n = int(rng.integers(2, 65))
        s = [rng.uniform(size=n), rng.beta(0.5, 2.0, size=n),
             np.round(rng.uniform(size=n), 1)][total % 3]
        if np.unique(s).size < 2:
            continue
        total += 1
        sse, cut = brute_force_2means(s)
        part = kmeans2(s)
        agree += bool(np.array_equal(part.trust, s >= cut) and abs(partition_sse(s, part) - sse) <= 1e-12)
    elapsed = time.perf_counter() - start
    verdict(6, "1-D two-means vs brute force", agree == total,
            f"{agree}/{total} optimal partitions", elapsed, 30)


def test_criterion_07_flagging_fixtures():
    def part(trust):
        trust = np.asarray(trust, dtype=bool)
        return TrustPartition((0.2, 0.8), trust, np.arange(trust.size))

    a = flagging_accuracy(part([0, 0, 0, 0, 1, 1]), np.array([0, 1, 1, 2, 0, 1]), np.array([0, 0, 2, 0, 1, 1]))
    b = flagging_accuracy(part([0, 0, 1]), np.array([1, 2, 0]), np.array([1, 2, 1]))
    try:
        flagging_accuracy(part([1, 1]), np.array([0, 1]), np.array([1, 0]))
        empty = "no error"
    except UndefinedMetricError:
        empty = "UndefinedMetricError"
    ok = a == 75.0 and b == 0.0 and empty == "UndefinedMetricError"
    verdict(7, "flagging-accuracy fixtures", ok, f"3-of-4 -> {a}, all-correct -> {b}, empty non-trust -> {empty}")


def test_criterion_08_distillation_loss():
    rng = np.random.default_rng(108)
    s, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    y = rng.integers(0, 4, size=6)
    total, grad, _, _ = kd_loss(s, t, y, 8.0, 1.0)
    ce, ce_grad = nn.cross_entropy(s, y)
    exact = total == ce and np.array_equal(grad, ce_grad)
    same, _, _, _ = kd_loss(s, s, y, 8.0, 0.0)
    worst = 0.0
    for _ in range(20):
        s, t = rng.normal(0, 3, size=(4, 5)), rng.normal(0, 3, size=(4, 5))
        y = rng.integers(0, 5, size=4)
        _, g, _, _ = kd_loss(s, t, y, 8.0, 0.2)
        worst = max(worst, nn.relative_error(g, nn.numeric_grad(lambda: kd_loss(s, t, y, 8.0, 0.2)[0], s, 1e-4)))
    ok = exact and abs(same) < 1e-9 and worst < 1e-3
    verdict(8, "distillation loss", ok,
            f"lambda=1 equals CE exactly={exact}, zero-divergence {abs(same):.1e}, grad rel err {worst:.1e}")


def test_criterion_09_selection():
    rng = np.random.default_rng(109)
    good = checks = 0
    for trial in range(50):
        p = int(rng.integers(2, 5))
        ds = toy_dataset(int(rng.integers(6 * p, 12 * p)), p, 500 + trial)
        b = int(rng.integers(1, min(np.bincount(ds.labels, minlength=p)) + 1))
        profs = profiles_for(ds, rng.integers(0, 5, size=len(ds)) / 4, rng.integers(0, 5, size=len(ds)) / 4)
        keys = {"closest_ddb": lambda r: (r.d_f, r.sample_id), "trust_topk": lambda r: (-r.T, r.sample_id)}
        for strategy in ("random", "closest_ddb", "trust_topk"):
            got = select_transfer_set(profs, ds, DistillConfig(budget=b, strategy=strategy, seed=trial))
            ok = got.per_class_counts(p).tolist() == [b] * p and np.unique(got.ids).size == got.ids.size
            for c in range(p):
                members = [r for r in profs if r.label == c]
                picked = sorted(got.ids[got.labels == c].tolist())
                if strategy in keys:
                    ok = ok and picked == sorted(r.sample_id for r in sorted(members, key=keys[strategy])[:b])
                else:
                    ok = ok and set(picked) <= {r.sample_id for r in members}
            good += ok
            checks += 1
    verdict(9, "transfer-set selection", good == checks, f"{good}/{checks} (table, strategy) pairs match")


# ---------------------------------------------------------------------------
# end to end


def run_pipeline(out):
    cfg = load_config(SYNTHETIC, env={})
    cfg.output_dir = str(out)
    start = time.perf_counter()
    for command in PIPELINE:
        cli.HANDLERS[command](cfg, threads=1)
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    first = tmp_path_factory.mktemp("e2e_a")
    second = tmp_path_factory.mktemp("e2e_b")
    return (first, run_pipeline(first)), (second, run_pipeline(second))


def test_criterion_10_end_to_end(pipeline_runs):
    (out, elapsed), _ = pipeline_runs
    cfg = load_config(SYNTHETIC, env={})
    n_train = len(cli.load_splits(cfg)[0])
    profiles = read_csv(out / "profiles.csv")
    populated = bool(profiles) and all(v not in ("", "nan") for r in profiles for k, v in r.items() if k != "cluster")
    populated = populated and all(r["cluster"] in ("trust", "non_trust") for r in profiles)
    flags = {r["score"]: r for r in read_csv(out / "flagging.csv")}
    emitted = all(flags.get(k, {}).get("status") == "ok" for k in ("d_hat", "F_hat", "T"))
    centroids = emitted and float(flags["T"]["trust_centroid"]) > float(flags["T"]["non_trust_centroid"])
    comparison = read_csv(out / "distill_comparison.csv")
    budgets = sorted({int(r["budget"]) for r in comparison})
    summary = json.loads((out / "score_summary.json").read_text())
    acc = summary["flagging_accuracy"]

    def fmt(v):
        return "undefined" if v is None else f"{v:.1f}%"

    ok = n_train == 300 and populated and emitted and centroids and budgets == [10, 20]
    verdict(10, "synthetic end-to-end pipeline", ok,
            f"{n_train} train samples, {len(profiles)} profiles populated={populated}, "
            f"trust centroid > non-trust={centroids}, flagging d_hat={fmt(acc['d_hat'])} "
            f"F_hat={fmt(acc['F_hat'])} T={fmt(acc['T'])} (T highest: {summary['T_highest']}, reported only), "
            f"distill budgets {budgets} x {len(comparison) // max(len(budgets), 1)} strategies",
            elapsed, 600)


def test_criterion_11_determinism(pipeline_runs):
    (a, _), (b, _) = pipeline_runs
    names = sorted(p.name for p in a.glob("*.csv"))
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = bool(names) and not differing and names == sorted(p.name for p in b.glob("*.csv"))
    verdict(11, "byte-identical reports on rerun", ok,
            f"{len(names) - len(differing)}/{len(names)} CSV files identical"
            + (f", differing: {differing}" if differing else ""))
