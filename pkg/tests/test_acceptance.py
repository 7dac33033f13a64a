"""Acceptance criteria 1-9. Each test records a pass/fail line printed at the end of the session."""

import hashlib
import math
import time

import numpy as np
import pytest

from qasplitfed import aggregation as agg, metrics, nn
from qasplitfed.orchestrator import RunConfig, run

from conftest import ACCEPTANCE, random_batch, split_step, tiny_unet, valid_partitions
from test_aggregation import mp_weights, random_snaps
from test_metrics import brute_accuracy, brute_jaccard


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


# -- 1: aggregation properties ------------------------------------------------

def _property_case(rng):
    n = int(rng.integers(1, 9))
    snaps = random_snaps(rng, n, size=3)
    b = np.exp(rng.uniform(math.log(0.01), math.log(10.0), n))
    m = rng.integers(1, 300, n)
    d = agg.data_scores(m)
    c, s, w = agg.model_updates(snaps, b, d)
    bad = []
    if abs(math.fsum(w.r) - 1) > 1e-12 or np.any(w.r < 0):
        bad.append("normalization")
    # monotone reliability: with equal data scores a lower bound never gets less weight
    u = agg.averaging_weights(b, [1.0 / n] * n).r
    order = np.argsort(b, kind="stable")
    if np.any(np.diff(u[order]) > 0):
        bad.append("monotone")
    perm = rng.permutation(n)
    cp, sp, wp = agg.model_updates([snaps[i] for i in perm], b[perm], agg.data_scores(m[perm]))
    if cp.to_bytes() != c.to_bytes() or sp.to_bytes() != s.to_bytes() or \
            not np.allclose(wp.r, w.r[perm], rtol=1e-15, atol=0):
        bad.append("permutation")
    for got, parts in ((c, [x.client_params for x in snaps]), (s, [x.server_params for x in snaps])):
        stack = np.stack([p.flat() for p in parts])
        if np.any(got.flat() < stack.min(0)) or np.any(got.flat() > stack.max(0)):
            bad.append("hull")
    if not np.array_equal(agg.averaging_weights([b[0]] * n, d).r, d.scores):
        bad.append("equal bounds")
    return bad


def test_criterion_1_aggregation_properties():
    rng = np.random.default_rng(1)
    cases, failures = 10_000, []
    t0 = time.perf_counter()
    for i in range(cases):
        failures += [(i, f) for f in _property_case(rng)]
    dt = time.perf_counter() - t0
    record(1, not failures and dt < 10,
           f"{cases} randomized cases, {len(failures)} violations {failures[:3]}, {dt:.2f} s (limit 10 s)")


# -- 2: high-precision oracle -------------------------------------------------

def test_criterion_2_model_updates_oracle():
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(100):
        n = int(rng.integers(1, 7))
        pairs.append((np.exp(rng.uniform(math.log(0.01), math.log(20.0), n)), rng.integers(1, 500, n)))
    t0 = time.perf_counter()
    worst = 0.0
    for b, m in pairs:
        d = agg.data_scores(m)
        got = agg.averaging_weights(b, d).r
        ref = mp_weights(b.tolist(), d.scores.tolist())
        worst = max(worst, max(abs(g - r) / abs(r) for g, r in zip(got, ref)))
    dt = time.perf_counter() - t0
    record(2, worst <= 1e-12 and dt < 1, f"100 (b, d) pairs, max relative error {worst:.2e}, {dt:.3f} s")


# -- 3: split equals monolithic ------------------------------------------------

def _miniature(rng):
    filters = [(2,), (3,), (2, 2), (2, 3)][rng.integers(4)]
    return tiny_unet(int(rng.choice([4, 8])), filters, int(rng.integers(2, 5)), bool(rng.integers(2)))


def test_criterion_3_split_monolithic_equivalence():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    loss_ok, worst, cuts = True, 0.0, set()
    for _ in range(50):
        net = _miniature(rng)
        parts = valid_partitions(net)
        p = parts[rng.integers(len(parts))]
        cuts.add((len(net), p.fe_end, p.be_start))
        full = net.init_params(rng)
        x, y = random_batch(rng, net, batch=int(rng.integers(1, 4)))
        client, server = full.subset(p.client_names()), full.subset(p.server_names())
        loss, grads, _ = split_step(p, client, server, x, y)
        out, cache = nn.forward(net, full, x)
        ref_loss, g = nn.cross_entropy_loss(out, y)
        ref, _ = nn.backward(net, full, cache, g)
        loss_ok &= loss == ref_loss
        worst = max(worst, float(np.abs(grads.flat() - ref.flat()).max()))
    dt = time.perf_counter() - t0
    record(3, loss_ok and worst <= 1e-9 and dt < 30,
           f"50 partitions ({len(cuts)} distinct cuts), losses bit-identical: {loss_ok}, "
           f"max gradient difference {worst:.1e}, {dt:.1f} s")


# -- 4: finite differences ------------------------------------------------------

def _small_network(rng):
    """At most three layers: conv [, relu | batchnorm | maxpool | upsample] [, conv].

    A conv feeding batchnorm has no bias, as in the U-Net: its gradient is identically zero.
    """
    middle = [None, nn.relu, nn.bn, nn.maxpool, nn.upsample][rng.integers(5)]
    layers = [nn.conv(int(rng.integers(2, 5)), kernel=int(rng.choice([1, 3])),
                      bias=middle is not nn.bn and bool(rng.integers(2)))]
    if middle is not None:
        layers.append(middle())
    if rng.integers(2):
        layers.append(nn.conv(int(rng.integers(2, 4)), kernel=int(rng.choice([1, 3]))))
    size = int(rng.choice([2, 4, 6]))
    return nn.Network(layers, (int(rng.integers(1, 4)), size, size))


def test_criterion_4_gradient_check():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst, sizes = 0.0, []
    for _ in range(20):
        net = _small_network(rng)
        p = net.init_params(rng)
        sizes.append(p.flat().size)
        x = rng.random((2, *net.input_shape))
        out, cache = nn.forward(net, p, x)
        y = rng.integers(0, out.shape[1], (2, *out.shape[2:]))
        _, g = nn.cross_entropy_loss(out, y)
        pg, _ = nn.backward(net, p, cache, g)
        fd = nn.finite_difference_gradient(net, p, x, y)
        worst = max(worst, nn.max_relative_error(pg.flat(), fd.flat()))
    dt = time.perf_counter() - t0
    record(4, worst < 1e-4 and max(sizes) <= 500 and dt < 60,
           f"20 networks of <= 3 layers and {min(sizes)}-{max(sizes)} parameters, max relative error {worst:.1e}, {dt:.1f} s")


# -- 5: metric oracles --------------------------------------------------------

def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        h, w, k = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        p, g = rng.integers(0, k, (h, w)), rng.integers(0, k, (h, w))
        mismatches += metrics.pixel_accuracy(p, g) != brute_accuracy(p, g)
        mismatches += sum(metrics.jaccard(p, g, c) != brute_jaccard(p, g, c) for c in range(k + 1))
    dt = time.perf_counter() - t0
    record(5, mismatches == 0 and dt < 5, f"1000 mask pairs, {mismatches} mismatches, {dt:.2f} s")


# -- 6-8: desk-scale experiments -----------------------------------------------

SEEDS = (0, 1, 2)
N = RunConfig().clients


@pytest.fixture(scope="module")
def sweep():
    """Default-config runs: every strategy at k = 0 and N-1, QA-SplitFed also at k = N."""
    cells = [(s, k) for s in ("naive", "fedavg", "qa-splitfed") for k in (0, N - 1)] + [("qa-splitfed", N)]
    t0 = time.perf_counter()
    results = {(s, k, seed): run(RunConfig(strategy=s, corrupted=k, seed=seed))
               for s, k in cells for seed in SEEDS}
    return results, time.perf_counter() - t0


def _mean_acc(results, strategy, k):
    return 100 * math.fsum(results[strategy, k, s].report.accuracy for s in SEEDS) / len(SEEDS)


@pytest.mark.slow
def test_criterion_6_trend_under_corruption(sweep):
    results, dt = sweep
    acc = {(s, k): _mean_acc(results, s, k) for s in ("naive", "fedavg", "qa-splitfed") for k in (0, N - 1)}
    drop = {s: acc[s, 0] - acc[s, N - 1] for s in ("naive", "fedavg", "qa-splitfed")}
    qa = drop["qa-splitfed"]
    ok = qa <= 5 and all(drop[s] > 0 and drop[s] >= 3 * max(qa, 0.0) for s in ("naive", "fedavg"))
    summary = ", ".join(f"{s} {acc[s, 0]:.1f}->{acc[s, N - 1]:.1f} (drop {drop[s]:.1f})" for s in drop)
    record(6, ok, f"accuracy % at k=0 -> k={N - 1}, mean of {len(SEEDS)} seeds: {summary}; "
                  f"all {len(results)} runs took {dt / 60:.1f} min")


@pytest.mark.slow
def test_criterion_7_all_corrupted_collapse(sweep):
    results, _ = sweep
    before, after = _mean_acc(results, "qa-splitfed", N - 1), _mean_acc(results, "qa-splitfed", N)
    record(7, before - after >= 15,
           f"QA-SplitFed accuracy {before:.1f}% at k={N - 1} -> {after:.1f}% at k={N} "
           f"(drop {before - after:.1f}, need >= 15)")


def _csv_digest(tmp_path, config, result):
    path = tmp_path / f"{config.strategy}-{config.corrupted}-{config.seed}.csv"
    metrics.write_long_csv(path, metrics.report_rows(config.strategy, config.corrupted, result.report))
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.mark.slow
def test_criterion_8_determinism(sweep, tmp_path):
    results, _ = sweep
    config = RunConfig(strategy="qa-splitfed", corrupted=N - 1, seed=SEEDS[0])
    first = results["qa-splitfed", N - 1, SEEDS[0]]
    again = run(config)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    same_csv = _csv_digest(tmp_path / "a", config, first) == _csv_digest(tmp_path / "b", config, again)
    same_log = first.log.digest() == again.log.digest()
    same_model = first.client.digest() == again.client.digest() and first.server.digest() == again.server.digest()
    record(8, same_csv and same_log and same_model,
           f"rerun of qa-splitfed k={N - 1} seed {SEEDS[0]}: CSV digest equal {same_csv}, "
           f"log digest equal {same_log}, model digest equal {same_model}")


# -- 9: transport parity -------------------------------------------------------

def test_criterion_9_transport_parity():
    a = run(RunConfig(global_epochs=1))
    b = run(RunConfig(global_epochs=1, transport="tcp"))
    ok = a.client.digest() == b.client.digest() and a.server.digest() == b.server.digest()
    record(9, ok, f"one global epoch of the default config: in-process {a.client.digest()[:12]}/"
                  f"{a.server.digest()[:12]}, tcp {b.client.digest()[:12]}/{b.server.digest()[:12]}")
