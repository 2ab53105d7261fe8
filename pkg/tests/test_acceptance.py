"""Acceptance suite: one criterion per test, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import json
import time

import numpy as np
import pytest

from proxymoe.cli import main as cli_main
from proxymoe.data import DomainSpec, EmbeddingRecord, EmbeddingSet
from proxymoe.errors import SingularSubset
from proxymoe.linalg import cholesky_decompose, cholesky_extend
from proxymoe.moe import (
    PipelineConfig,
    _init_toy_model,
    moe_loss_and_grads,
    run_pipeline,
    unify,
)
from proxymoe.privacy import (
    empirical_sensitivity,
    private_only_sensitivity,
    recovery_requires_n_demo,
    routing_vector,
    sensitivity_bound,
)
from proxymoe.relevance import RelevanceScores, bce_gradient, bce_loss
from proxymoe.router import RouterLayer, routing_distribution, softmax, top_k_indices
from proxymoe.selection import (
    brute_force_map,
    build_kernel,
    greedy_map,
    greedy_map_naive,
    log_prob,
    normalized_rows,
    select_random,
    select_topk_relevance,
    weight_kernel,
)


def check(num, name, passed, detail=""):
    verdict = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {num:2d} {name}: {verdict}{suffix}")
    assert passed, f"criterion {num} {name} failed{suffix}"


def random_pool_kernel(rng, n, with_features=False):
    pool = EmbeddingSet([
        EmbeddingRecord(f"{i:02d}", rng.standard_normal(n + 2))
        for i in range(n)
    ])
    base = build_kernel(pool)
    r = rng.uniform(0.2, 1.0, size=n)
    features = normalized_rows(pool) if with_features else None
    return pool, weight_kernel(base, r, pool_ids=pool.ids, features=features)


def test_criterion_1_cholesky_oracle_equivalence():
    start = time.perf_counter()
    ok = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 9))
        B = rng.standard_normal((n, n + 2))
        m = B @ B.T
        f = cholesky_decompose(m[:1, :1])
        for j in range(1, n):
            f = cholesky_extend(f, m[j, :j], m[j, j])
        batch = cholesky_decompose(m)
        ok &= abs(f.log_det - batch.log_det) <= 1e-9
    elapsed = time.perf_counter() - start
    check(1, "Cholesky oracle equivalence", ok and elapsed < 1.0,
          f"{elapsed:.2f}s")


def test_criterion_2_greedy_map_oracle_equivalence():
    start = time.perf_counter()
    ok = True
    rng = np.random.default_rng(2024)
    for trial in range(200):
        n = int(rng.integers(2, 13))
        m = int(rng.integers(1, min(n, 6) + 1))
        _, kernel = random_pool_kernel(rng, n, with_features=trial % 2 == 0)
        fast = greedy_map(kernel, m)
        naive = greedy_map_naive(kernel, m)
        ok &= fast.selected_ids == naive.selected_ids
        ok &= abs(fast.log_det - naive.log_det) <= 1e-9
        exact = brute_force_map(kernel, m)
        ok &= fast.log_det <= exact.log_det + 1e-9
        randoms = []
        for _ in range(50):
            ids = list(rng.choice(kernel.pool_ids, size=m, replace=False))
            try:
                randoms.append(log_prob(kernel, ids))
            except SingularSubset:
                randoms.append(-np.inf)
        ok &= fast.log_det >= np.median(randoms) - 1e-9
    elapsed = time.perf_counter() - start
    check(2, "Greedy MAP oracle equivalence", ok and elapsed < 10.0,
          f"{elapsed:.2f}s")


def test_criterion_3_log_probability_identity():
    ok = True
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(3, 11))
        m = int(rng.integers(1, min(n, 5) + 1))
        pool, kernel = random_pool_kernel(rng, n)
        scores = RelevanceScores(0, dict(zip(pool.ids, kernel.relevance)))
        selections = [
            greedy_map(kernel, m),
            greedy_map_naive(kernel, m),
            brute_force_map(kernel, m),
            select_random(pool, m, seed=int(rng.integers(1 << 30))),
            select_topk_relevance(scores, m),
        ]
        lookup = {pid: i for i, pid in enumerate(kernel.pool_ids)}
        for sel in selections:
            idx = [lookup[i] for i in sel.selected_ids]
            lhs = log_prob(kernel, sel.selected_ids)
            rhs = (2 * np.log(kernel.relevance[idx]).sum()
                   + np.linalg.slogdet(kernel.base[np.ix_(idx, idx)])[1])
            ok &= abs(lhs - rhs) <= 1e-9
    check(3, "Relevance/diversity log-probability identity", ok)


def test_criterion_4_duplicate_repulsion():
    ok = True
    rng = np.random.default_rng(4)
    for _ in range(20):
        n = int(rng.integers(3, 8))
        vecs = rng.standard_normal((n, n + 2))
        vecs[1] = vecs[0]  # exact duplicate pair at indices 0, 1
        pool = EmbeddingSet([EmbeddingRecord(f"{i:02d}", v)
                             for i, v in enumerate(vecs)])
        r = rng.uniform(0.5, 1.0, size=n)
        r[0] = r[1] = 1.0  # duplicates carry the highest relevance
        kernel = weight_kernel(build_kernel(pool), r, pool_ids=pool.ids)
        m = int(rng.integers(2, n))
        dpp = greedy_map(kernel, m)
        ok &= not {"00", "01"} <= set(dpp.selected_ids)
        scores = RelevanceScores(0, dict(zip(pool.ids, r)))
        topk = select_topk_relevance(scores, 2)
        ok &= set(topk.selected_ids) == {"00", "01"}
    check(4, "Duplicate repulsion vs similarity-only selection", ok)


def test_criterion_5_sensitivity_suite():
    start = time.perf_counter()
    ok = True
    rng = np.random.default_rng(5)
    for _ in range(1000):
        N = int(rng.integers(1, 12))
        m = int(rng.integers(1, 12))
        d = int(rng.integers(1, 6))
        private = rng.standard_normal((N, d))
        proxy = rng.standard_normal((m, d))
        e = routing_vector(private, proxy)
        residual = np.linalg.norm(
            e - (N / (N + m)) * private.mean(axis=0)
            - (m / (N + m)) * proxy.mean(axis=0))
        ok &= residual <= 1e-12
    for _ in range(1000):
        N = int(rng.integers(1, 8))
        m = int(rng.integers(1, 8))
        d = int(rng.integers(1, 4))
        scale = float(rng.uniform(0.1, 3.0))
        private = rng.standard_normal((N, d)) * scale
        proxy = rng.standard_normal((m, d)) * scale
        cands = rng.standard_normal((int(rng.integers(1, 5)), d)) * scale
        report = empirical_sensitivity(private, proxy, cands)
        ok &= report.empirical_max <= report.bound + 1e-12
    witness = empirical_sensitivity(
        np.array([[1.0, 0.0], [1.0, 0.0]]),
        np.array([[0.0, 0.0], [0.0, 0.0]]),
        np.array([[-1.0, 0.0]]))
    ok &= abs(witness.empirical_max - witness.bound) <= 1e-12
    ok &= witness.tightness_witness
    for m in range(1, 101):
        tight, loose = sensitivity_bound(1.0, 7, m)
        ok &= tight <= loose
        ok &= private_only_sensitivity(1.0, 7) > tight
    elapsed = time.perf_counter() - start
    check(5, "Sensitivity bounds, decomposition, tightness witness",
          ok and elapsed < 5.0, f"{elapsed:.2f}s")


def test_criterion_6_non_identifiability_witness():
    ok = True
    rng = np.random.default_rng(6)
    for _ in range(200):
        d = int(rng.integers(1, 6))
        N = int(rng.integers(1, 30))
        m = int(rng.integers(1, 30))
        mu_priv = rng.standard_normal(d)
        mu_proxy = rng.standard_normal(d)
        e = (N / (N + m)) * mu_priv + (m / (N + m)) * mu_proxy
        if np.linalg.norm(e - mu_proxy) <= 1e-9:
            continue
        wrong_ns = [n for n in (1, 2, 5, N + 1, 3 * N) if n != N]
        recovered = recovery_requires_n_demo(e, mu_proxy, m, [N] + wrong_ns)
        ok &= np.linalg.norm(recovered[0] - mu_priv) <= 1e-9
        for guess in recovered[1:]:
            ok &= np.linalg.norm(guess - mu_priv) > 1e-6
    check(6, "Private-mean recovery requires the private count", ok)


def test_criterion_7_router_analytics():
    ok = True
    rng = np.random.default_rng(7)
    for _ in range(1000):
        K = int(rng.integers(1, 8))
        dim = int(rng.integers(1, 6))
        router = RouterLayer(routing_vectors=rng.standard_normal((K, dim)),
                             lambda_raw=float(rng.standard_normal()),
                             top_k=int(rng.integers(1, K + 1)))
        z_t = rng.standard_normal(dim)
        z_seq = rng.standard_normal(dim)
        decision = routing_distribution(router, z_t, z_seq)
        ok &= abs(decision.distribution.sum() - 1.0) <= 1e-9
        logits = rng.standard_normal(K)
        shift = float(rng.uniform(-100, 100))
        ok &= np.max(np.abs(softmax(logits) - softmax(logits + shift))) <= 1e-9
        pinned = RouterLayer(routing_vectors=router.routing_vectors,
                             lambda_raw=router.lambda_raw, top_k=router.top_k,
                             lambda_pinned=True)
        token_only = softmax(router.routing_vectors @ z_t)
        got = routing_distribution(pinned, z_t, z_seq).distribution
        ok &= np.max(np.abs(got - token_only)) <= 1e-9
        pi = rng.random(K)
        pi /= pi.sum()
        k = int(rng.integers(1, K + 1))
        oracle = sorted(range(K), key=lambda i: (-pi[i], i))[:k]
        ok &= list(top_k_indices(pi, k)) == oracle
    check(7, "Router analytics (normalization, shift, lambda, top-k)", ok)


def _relative_close(analytic, fd, rtol=1e-4, atol=1e-7):
    return np.all(np.abs(analytic - fd)
                  <= rtol * np.maximum(np.abs(analytic), np.abs(fd)) + atol)


def test_criterion_8_gradient_checks():
    start = time.perf_counter()
    ok = True
    rng = np.random.default_rng(8)
    for _ in range(10):  # relevance classifier
        n, d = int(rng.integers(4, 20)), int(rng.integers(1, 6))
        X = rng.standard_normal((n, d))
        y = rng.integers(0, 2, size=n).astype(float)
        w = rng.standard_normal(d)
        b = float(rng.standard_normal())
        gw, gb = bce_gradient(w, b, X, y)
        h = 1e-6
        fd_w = np.zeros(d)
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            fd_w[j] = (bce_loss(w + e, b, X, y)
                       - bce_loss(w - e, b, X, y)) / (2 * h)
        fd_b = (bce_loss(w, b + h, X, y) - bce_loss(w, b - h, X, y)) / (2 * h)
        ok &= _relative_close(gw, fd_w) and _relative_close(gb, fd_b)

    for trial in range(10):  # full toy MoE
        d, h_dim, C, K, S, T = 4, 5, 3, 3, 4, 3
        base = _init_toy_model(d, h_dim, C, seed=trial)
        experts = []
        for _ in range(K):
            e = base.copy()
            for name in ("w1", "b1", "w2", "b2"):
                arr = getattr(e.ffn, name)
                arr += 0.2 * rng.standard_normal(arr.shape)
            experts.append(e)
        moe = unify(experts, rng.standard_normal((K, h_dim)),
                    top_k=int(rng.integers(1, K + 1)))
        moe.router.lambda_raw = float(rng.standard_normal() * 0.5)
        X = rng.standard_normal((S, T, d))
        y = rng.integers(0, C, size=S)
        _, grads = moe_loss_and_grads(moe, X, y)

        def loss():
            return moe_loss_and_grads(moe, X, y)[0]

        def fd(arr):
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = arr[idx]
                arr[idx] = old + 1e-6
                up = loss()
                arr[idx] = old - 1e-6
                down = loss()
                arr[idx] = old
                g[idx] = (up - down) / 2e-6
            return g

        ok &= _relative_close(grads["routing_vectors"],
                              fd(moe.router.routing_vectors))
        for p in range(K):
            for name in ("w1", "b1", "w2", "b2"):
                ok &= _relative_close(getattr(grads["experts"][p], name),
                                      fd(getattr(moe.experts[p], name)))
        old = moe.router.lambda_raw
        moe.router.lambda_raw = old + 1e-6
        up = loss()
        moe.router.lambda_raw = old - 1e-6
        down = loss()
        moe.router.lambda_raw = old
        ok &= _relative_close(np.array(grads["lambda_raw"]),
                              np.array((up - down) / 2e-6))
    elapsed = time.perf_counter() - start
    check(8, "Analytic gradients match finite differences",
          ok and elapsed < 30.0, f"{elapsed:.2f}s")


def test_criterion_9_directional_ablations():
    start = time.perf_counter()
    rows = []
    for seed in range(5):
        spec = DomainSpec(seed=seed)
        cfg = PipelineConfig(seed=seed)
        row = {
            "dpp": run_pipeline(spec, "dpp", "union", cfg).average,
            "topk": run_pipeline(spec, "topk_relevance", "union", cfg).average,
            "random": run_pipeline(spec, "random", "union", cfg).average,
            "private_only": run_pipeline(spec, "dpp", "private_only",
                                         cfg).average,
            "proxy_only": run_pipeline(spec, "dpp", "proxy_only", cfg).average,
        }
        pinned = PipelineConfig(seed=seed, lambda_pinned=True)
        row["lambda_pinned"] = run_pipeline(spec, "dpp", "union",
                                            pinned).average
        rows.append(row)
    elapsed = time.perf_counter() - start

    a = sum(r["dpp"] >= r["topk"] >= r["random"] for r in rows)
    b = sum(r["dpp"] >= r["private_only"] for r in rows)
    c = sum(r["dpp"] >= r["lambda_pinned"] for r in rows)
    d = sum(r["proxy_only"] < r["dpp"] for r in rows)
    detail = (f"a={a}/5 b={b}/5 c={c}/5 d={d}/5, {elapsed:.0f}s; "
              + "; ".join(f"seed{i}: " + " ".join(f"{k}={v:.3f}"
                                                  for k, v in r.items())
                          for i, r in enumerate(rows)))
    ok = a >= 4 and b >= 4 and c >= 3 and d == 5 and elapsed < 300.0
    check(9, "Directional ablations (selection, proxy mix, context router)",
          ok, detail)


def test_criterion_10_complexity(tmp_path):
    start = time.perf_counter()
    out = tmp_path / "bench.json"
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"bench": {
        "n": 3000, "m_values": [200, 400, 500], "dimension": 512,
        "repeats": 5, "out_path": str(out), "seed": 0}}), encoding="utf-8")
    rc = cli_main(["bench", "--config", str(cfg)])
    elapsed = time.perf_counter() - start
    payload = json.loads(out.read_text())
    ratio = payload["ratios"]["400/200"]
    wall_500 = {t["m"]: t["wall_ms"] for t in payload["timings"]}[500]
    ok = (rc == 0 and 1.5 <= ratio <= 3.0 and wall_500 < 60_000.0
          and elapsed < 60.0)
    check(10, "Greedy selection scaling and wall-clock ceiling", ok,
          f"ratio={ratio:.2f}, m=500 wall={wall_500:.0f}ms, "
          f"bench total={elapsed:.1f}s")
