"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import hashlib
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dyntok.backbone import forward
from dyntok.cli import bench_summary, run_cli
from dyntok.clustering import ClusterResult, cluster_global, cluster_local
from dyntok.io import build_report, dump_weights, save_ppm
from dyntok.mta import compose_assignments, mta_forward
from dyntok.oracle import oracle_cluster
from dyntok.probe import AttentionProbe
from dyntok.tensor import F32
from dyntok.tokens import TokenSet, biased_attention, cr_reduce, merge_tokens, upsample_tokens

sys.path.insert(0, str(Path(__file__).parent))
from conftest import smooth_image  # noqa: E402
from test_io import TINY_WEIGHTS_SHA256  # noqa: E402


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[AC{number:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return emit


def row_tokens(x, importance=None):
    n = len(x)
    imp = np.zeros(n, F32) if importance is None else importance
    return TokenSet(np.asarray(x, F32), imp, np.arange(n).reshape(1, n), 1, n)


def random_instance(gen):
    n = int(gen.integers(2, 65))
    c = int(gen.integers(1, 17))
    if gen.random() < 0.25:
        # small integer lattice: plenty of exact distance and density ties
        x = gen.integers(-2, 3, size=(n, c)).astype(F32)
    else:
        x = gen.normal(scale=gen.uniform(0.1, 3), size=(n, c)).astype(F32)
    return x, int(gen.integers(1, n + 1)), int(gen.integers(1, n))


def random_clustering(gen):
    n = int(gen.integers(2, 41))
    k = int(gen.integers(1, n + 1))
    a = np.concatenate([np.arange(k), gen.integers(0, k, size=n - k)])
    gen.shuffle(a)
    centers = np.array([np.flatnonzero(a == i)[0] for i in range(k)])
    z = np.zeros(n, F32)
    rec = ClusterResult(z, z, z, centers, a.astype(np.int64), np.zeros(n, np.int64), 0)
    return n, k, a, rec


def test_ac01_clustering_matches_oracle(verdict):
    gen = np.random.default_rng(2024)
    instances = [random_instance(gen) for _ in range(1000)]
    start = time.process_time()
    exact, worst = 0, 0.0
    for x, K, k in instances:
        got, ref = cluster_global(x, K, k), oracle_cluster(x, K, k)
        same = np.array_equal(got.centers, ref.centers) and np.array_equal(got.assignment, ref.assignment)
        worst = max(worst, float(np.max(np.abs(got.rho - ref.rho))), float(np.max(np.abs(got.delta - ref.delta))))
        exact += same
    cpu = time.process_time() - start
    verdict(1, "cluster_global vs oracle", exact == 1000 and worst <= 1e-6 and cpu < 30,
            f"{exact}/1000 exact centers+assignment, max |drho|,|ddelta| = {worst:.1e}, cpu {cpu:.1f}s")


def test_ac02_local_single_part_is_global(verdict):
    gen = np.random.default_rng(7)
    identical = 0
    for _ in range(100):
        x, K, k = random_instance(gen)
        loc = cluster_local(row_tokens(x), 1, K / len(x), k)
        glob = cluster_global(x, K, k)
        identical += all(getattr(loc, f).tobytes() == getattr(glob, f).tobytes()
                         for f in ("rho", "delta", "score", "centers", "assignment")) and loc.dist_ops == glob.dist_ops
    verdict(2, "cluster_local(P=1) == cluster_global", identical == 100, f"{identical}/100 bit-identical")


def test_ac03_complexity_law(verdict, tiny_config):
    gen = np.random.default_rng(3)
    x = gen.normal(size=(1024, 64)).astype(F32)
    tokens = TokenSet(x, np.zeros(1024, F32), np.arange(1024).reshape(32, 32), 32, 32)
    loc = cluster_local(tokens, 16, 0.25)
    glob = cluster_global(x, 256)
    bench = bench_summary(tiny_config, 512, 512)
    ok = (loc.dist_ops == 4_194_304 and glob.dist_ops == 16 * loc.dist_ops
          and bench["ctm"][0]["ratio"] == 16 and bench["reduction"] >= 0.80)
    verdict(3, "local clustering cost law", ok,
            f"local {loc.dist_ops}, global/local {glob.dist_ops / loc.dist_ops:g}, "
            f"bench CTM-1 ratio {bench['ctm'][0]['ratio']:g}, 512^2 reduction {bench['reduction']:.1%} (>= 80%)")


def test_ac04_merge_invariances(verdict):
    gen = np.random.default_rng(4)
    worst_shift = worst_mean = 0.0
    bounds_ok = True
    for _ in range(1000):
        n, k, a, rec = random_clustering(gen)
        x = gen.normal(scale=gen.uniform(0.1, 5), size=(n, int(gen.integers(1, 9)))).astype(F32)
        # importance on a 2^-8 grid so that p + shift is exact in float32
        p = (gen.integers(-2048, 2048, size=n) / 256).astype(F32)
        shift = F32(gen.integers(-30, 31))
        y = merge_tokens(row_tokens(x, p), rec).features
        y2 = merge_tokens(row_tokens(x, p + shift), rec).features
        worst_shift = max(worst_shift, float(np.max(np.abs(y - y2))))
        for cl in range(k):
            m = x[a == cl]
            bounds_ok &= bool(np.all(y[cl] >= m.min(0)) and np.all(y[cl] <= m.max(0)))
        flat = merge_tokens(row_tokens(x, np.full(n, gen.normal(scale=3), F32)), rec).features
        means = np.stack([x[a == cl].astype(np.float64).mean(0) for cl in range(k)])
        worst_mean = max(worst_mean, float(np.max(np.abs(flat - means))))
    verdict(4, "importance-weighted merge", worst_shift < 1e-6 and bounds_ok and worst_mean < 1e-6,
            f"max shift change {worst_shift:.1e}, convex bounds {'exact' if bounds_ok else 'VIOLATED'}, "
            f"uniform-importance vs mean {worst_mean:.1e}")


def test_ac05_biased_attention(verdict):
    gen = np.random.default_rng(5)
    worst_ref = worst_rows = 0.0
    for _ in range(200):
        m, n, heads = (int(v) for v in gen.integers(1, 12, size=3))
        dh = int(gen.integers(1, 9))
        q, k, v = (gen.normal(size=(r, heads * dh)).astype(F32) for r in (m, n, n))
        with AttentionProbe(keep_weights=True) as probe:
            got = biased_attention(q, k, v, np.zeros(n), heads)
            biased_attention(q, k, v, gen.normal(scale=4, size=n), heads)
        ref = []
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            logits = q[:, sl].astype(np.float64) @ k[:, sl].T.astype(np.float64) / math.sqrt(dh)
            w = np.exp(logits - logits.max(1, keepdims=True))
            ref.append((w / w.sum(1, keepdims=True)) @ v[:, sl].astype(np.float64))
        worst_ref = max(worst_ref, float(np.max(np.abs(got - np.concatenate(ref, axis=1)))))
        for e in probe.events:
            worst_rows = max(worst_rows, float(np.max(np.abs(e.weights.astype(np.float64).sum(-1) - 1))))
    q, k, v = (gen.normal(size=(6, 8)).astype(F32) for _ in range(3))
    with AttentionProbe(keep_weights=True) as probe:
        biased_attention(q, k, v, [60.0, 0, 0, 0, 0, 0], heads=2)
    dominant = float(probe.events[0].weights[:, :, 0].min())
    ok = worst_ref < 1e-6 and worst_rows < 1e-6 and dominant >= 1 - 1e-9
    verdict(5, "importance-biased attention", ok,
            f"zero-bias vs plain attention {worst_ref:.1e}, row-sum error {worst_rows:.1e}, "
            f"dominant key weight {dominant:.12f}")


def test_ac06_upsampling_roundtrip(verdict, toy_pyramid):
    gen = np.random.default_rng(6)
    cases = []
    for s, rec in enumerate(toy_pyramid.clusters):
        cases.append((toy_pyramid.stages[s], rec))
    for _ in range(50):
        n = int(gen.integers(2, 9)) ** 2
        side = math.isqrt(n)
        t = TokenSet(gen.normal(size=(n, 3)).astype(F32), gen.normal(size=n).astype(F32),
                     np.arange(n).reshape(side, side), side, side)
        cases.append((t, cluster_local(t, 1, gen.uniform(0.05, 1), 1)))
    ok_geometry = ok_idem = 0
    for t, rec in cases:
        merged = merge_tokens(t, rec)
        up = upsample_tokens(merged, rec)
        ok_geometry += up.n == t.n and np.array_equal(up.pixel_map, t.pixel_map)
        ok_idem += np.array_equal(merge_tokens(up, rec).features, merged.features)
    total = len(cases)
    verdict(6, "token upsampling", ok_geometry == ok_idem == total,
            f"count+pixel_map restored {ok_geometry}/{total}, merge(upsample(y)) == y {ok_idem}/{total}")


def test_ac07_pipeline_geometry(verdict, tiny_config, tiny_weights):
    start = time.process_time()
    pyr = forward(smooth_image(224, 224), tiny_config, tiny_weights)
    seconds = time.process_time() - start
    shapes = mta_forward(pyr, tiny_config, tiny_weights, "cr").shapes
    small = forward(smooth_image(64, 64), tiny_config, tiny_weights).token_counts
    d = tiny_config.mta_dim
    ok = (pyr.token_counts == [3136, 784, 196, 49] and small == [256, 64, 16, 4] and seconds < 10
          and shapes == [(d, 56, 56), (d, 28, 28), (d, 14, 14), (d, 7, 7)])
    verdict(7, "pipeline geometry", ok,
            f"224^2 tokens {pyr.token_counts}, 64^2 tokens {small}, pyramid {shapes}, forward {seconds:.2f}s cpu")


def test_ac08_clustering_reduction_contract(verdict, pyramid_224, tiny_config, tiny_weights):
    with AttentionProbe() as probe:
        fp = mta_forward(pyramid_224, tiny_config, tiny_weights, "cr")
    keys = [e.keys for e in probe.events]
    comp = compose_assignments(pyramid_224)
    final = pyramid_224.stages[3]
    consistent = all(np.array_equal(comp.maps[s], comp.maps[s + 1][pyramid_224.clusters[s].assignment])
                     for s in range(3))
    distribution = all(np.array_equal(cr_reduce(t, comp.maps[s], comp.num_final).pixel_map, final.pixel_map)
                       for s, t in enumerate(pyramid_224.stages))
    ok = keys == [49, 49, 49] and fp.kv_counts == keys and consistent and distribution
    verdict(8, "clustering-reduction aggregation", ok,
            f"key/value tokens per block {keys}, composition consistent {consistent}, "
            f"reduced layout equals final stage {distribution}")


def test_ac09_determinism(verdict, tmp_path, tiny_weights):
    image = tmp_path / "img.ppm"
    save_ppm(smooth_image(64, 64, seed=9), image)
    outputs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        out.mkdir()
        code = run_cli(["run", "--image", str(image), "--seed", "0", "--report", str(out / "r.json"),
                        "--overlay-dir", str(out), "--mta", "cr"])
        outputs.append((code, {p.name: p.read_bytes() for p in sorted(out.iterdir())}))
    (ca, fa), (cb, fb) = outputs
    same = ca == cb == 0 and fa == fb and len(fa) == 9
    digest = hashlib.sha256(dump_weights(tiny_weights)).hexdigest()
    verdict(9, "determinism", same and digest == TINY_WEIGHTS_SHA256,
            f"{len(fa)} output files byte-identical across runs: {same}, tiny weights sha256 {digest[:16]}...")


def test_ac10_conservation(verdict, pyramid_224, toy_pyramid, tiny_config, tiny_weights):
    checks = failures = 0
    for pyr in (pyramid_224, toy_pyramid):
        h0, w0 = pyr.stem_grid
        sets = list(pyr.stages)
        for variant in ("sr", "cr"):
            sets += mta_forward(pyr, tiny_config, tiny_weights, variant).tokens
        for t in sets:
            checks += 1
            failures += int(t.areas().sum() != h0 * w0)
        for s in build_report(pyr, 0, tiny_config.ctm_parts).stages:
            checks += 1
            dm = s.density_map
            integral = float(np.sum(dm * s.areas[s.token_ids]))
            failures += int(not (np.all(s.density > 0) and math.isclose(integral, h0 * w0, rel_tol=1e-12)
                                 and math.isclose(float(dm.sum()), s.token_count, rel_tol=1e-12)))
    verdict(10, "pixel and density conservation", failures == 0,
            f"{checks - failures}/{checks} token sets conserve area and density")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
