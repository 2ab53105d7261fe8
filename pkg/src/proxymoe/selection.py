"""Relevance-weighted determinantal proxy selection.

The pool kernel is the cosine-similarity matrix L of L2-normalized sample
embeddings, reweighted per client as

    Lw = diag(r) L diag(r),

so the log-probability of a subset S splits into a relevance term and a
diversity (repulsion) term:

    log det(Lw_S) = 2 * sum_{i in S} log r_i + log det(L_S).

Greedy MAP inference adds the item with the largest marginal gain
ln(sigma_i^2) each step, where sigma_i^2 is the candidate's Schur
complement against the selected span.  Each candidate's triangular-solve
vector and residual are cached and updated with one inner product per
step, so scoring all n candidates in a step costs O(n * |selected|)
instead of the O(n * |selected|^3) of per-candidate refactorization (the
latter is kept as the ``dpp_naive`` oracle).  Ties always break toward the
lowest id; candidates whose residual falls to the jitter floor are retired
permanently.
"""

import time
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.base import BaseEstimator

from .data import rng_for
from .errors import (
    DimensionMismatch,
    InsufficientRank,
    NonPositiveRelevance,
    NotPositiveDefinite,
    PoolTooLarge,
    PoolTooSmall,
    SingularSubset,
    ZeroVector,
)
from .linalg import JITTER_FLOOR, cholesky_decompose
from .validation import as_matrix, as_vector

BRUTE_FORCE_MAX_POOL = 16

# Defaults at production scale: candidate pool and proxy set sizes.
DEFAULT_POOL_N = 3000
DEFAULT_PROXY_M = 500


@dataclass(frozen=True)
class KernelConfig:
    kind: str = "cosine"
    normalize_inputs: bool = True

    def __post_init__(self):
        if self.kind != "cosine":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")


@dataclass(frozen=True)
class WeightedKernel:
    """Base similarity matrix plus per-item relevance weighting.

    ``features`` optionally carries row vectors with ``weighted ==
    features @ features.T`` (the relevance-weighted normalized embeddings
    for a cosine kernel).  When present, the greedy selector runs its gain
    cache in feature space, making the per-candidate per-step update
    independent of the current selection size.
    """

    pool_ids: tuple
    base: np.ndarray
    relevance: np.ndarray
    weighted: np.ndarray
    features: np.ndarray = None

    @property
    def size(self):
        return len(self.pool_ids)

    def indices_of(self, ids):
        lookup = {pid: i for i, pid in enumerate(self.pool_ids)}
        try:
            return [lookup[i] for i in ids]
        except KeyError as exc:
            raise SingularSubset(f"id {exc.args[0]!r} is not in the pool") from exc


@dataclass
class ProxySelection:
    """Result of one selection run, JSON-serializable for the CLI."""

    client: int
    selected_ids: tuple
    log_det: float
    gains: list
    method: str
    m: int
    wall_ms: float = 0.0

    def to_json(self):
        return {
            "client": self.client,
            "method": self.method,
            "m": self.m,
            "selected_ids": list(self.selected_ids),
            "log_det": self.log_det,
            "gains": list(self.gains),
            "wall_ms": self.wall_ms,
        }


def normalized_rows(pool, cfg=KernelConfig()):
    """The pool's vectors as the kernel's feature rows (L2-normalized)."""
    Z = pool.vectors()
    if cfg.normalize_inputs:
        norms = np.linalg.norm(Z, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroVector(f"record {pool.ids[zero[0]]!r} has zero norm")
        Z = Z / norms[:, None]
    return Z


def build_kernel(pool, cfg=KernelConfig()):
    """Cosine-similarity matrix of a pool; unit diagonal after normalization."""
    if len(pool) == 0:
        raise PoolTooSmall("cannot build a kernel over an empty pool")
    Z = normalized_rows(pool, cfg)
    K = Z @ Z.T
    K = np.clip((K + K.T) / 2.0, -1.0, 1.0)
    if cfg.normalize_inputs:
        np.fill_diagonal(K, 1.0)
    return K


def weight_kernel(base, r, pool_ids=None, features=None):
    """Fold relevance scores into the kernel: Lw[i, j] = r_i * r_j * L[i, j].

    Passing the base kernel's feature rows (see normalized_rows) lets
    greedy_map use the size-independent feature-space gain cache.
    """
    base = as_matrix(base, "kernel")
    r = as_vector(r, "relevance")
    if r.shape[0] != base.shape[0]:
        raise DimensionMismatch(
            f"relevance length {r.shape[0]} does not match kernel order "
            f"{base.shape[0]}"
        )
    if np.any(r <= 0.0):
        raise NonPositiveRelevance("all relevance scores must be positive")
    if pool_ids is None:
        width = len(str(max(base.shape[0] - 1, 0)))
        pool_ids = tuple(f"{i:0{width}d}" for i in range(base.shape[0]))
    weighted = r[:, None] * base * r[None, :]
    if features is not None:
        features = as_matrix(features, "features")
        if features.shape[0] != base.shape[0]:
            raise DimensionMismatch(
                f"features have {features.shape[0]} rows for an order-"
                f"{base.shape[0]} kernel"
            )
        features = r[:, None] * features
    return WeightedKernel(pool_ids=tuple(pool_ids), base=base,
                          relevance=r, weighted=weighted, features=features)


def log_prob(kernel, subset_ids):
    """Unnormalized log-probability log det(Lw_S) of a subset."""
    ids = list(subset_ids)
    if len(set(ids)) != len(ids):
        raise SingularSubset("subset contains duplicate ids")
    if not ids:
        return 0.0
    idx = kernel.indices_of(ids)
    sub = kernel.weighted[np.ix_(idx, idx)]
    try:
        return cholesky_decompose(sub).log_det
    except NotPositiveDefinite as exc:
        raise SingularSubset(f"subset is numerically singular: {exc}") from exc


def _pick(ids, gains, alive):
    """Deterministic argmax over (gain, id): highest gain, then lowest id."""
    live = np.flatnonzero(alive)
    best = gains[live].max()
    tied = live[gains[live] == best]
    if tied.size > 1:
        tied = tied[np.argsort(ids[tied], kind="stable")]
    return int(tied[0]), float(best)


def greedy_map(kernel, m, client=0):
    """Greedy MAP selection with an incrementally cached Cholesky factor.

    Per step, every live candidate's factor row and residual
    ``sigma_i^2`` are advanced by one inner product; the marginal gain of
    adding candidate i is ``ln(sigma_i^2)``.  With explicit kernel
    features the inner product runs in feature space against the newly
    orthonormalized selected direction (cost per candidate independent of
    the selection size); otherwise it runs against the selected item's
    cached factor row.  Both paths compute identical factors up to
    rounding.
    """
    start = time.perf_counter()
    n = kernel.size
    if m > n:
        raise PoolTooSmall(f"cannot select {m} items from a pool of {n}")
    ids = np.asarray(kernel.pool_ids)
    use_features = kernel.features is not None
    if use_features:
        V = kernel.features
        ortho = np.zeros((m, V.shape[1]))   # orthonormal selected directions
        resid = np.einsum("ij,ij->i", V, V)
    else:
        Lw = kernel.weighted
        resid = np.diag(Lw).copy()
        rows = np.zeros((m, n))             # cached factor rows
    alive = np.ones(n, dtype=bool)
    selected, gains = [], []
    for step in range(m):
        alive &= resid > JITTER_FLOOR       # permanent retirement
        if not alive.any():
            raise InsufficientRank(
                f"only {step} of the requested {m} candidates are linearly "
                f"independent"
            )
        j, sigma2 = _pick(ids, resid, alive)
        gains.append(float(np.log(sigma2)))
        selected.append(str(ids[j]))
        alive[j] = False
        d = np.sqrt(sigma2)
        if use_features:
            coeff = ortho[:step] @ V[j]
            q = (V[j] - coeff @ ortho[:step]) / d
            ortho[step] = q
            new_row = V @ q
        else:
            new_row = (Lw[j, :] - rows[:step, j] @ rows[:step, :]) / d
            rows[step, :] = new_row
        resid -= new_row ** 2
        resid[j] = 0.0
    wall_ms = (time.perf_counter() - start) * 1e3
    return ProxySelection(client=client, selected_ids=tuple(selected),
                          log_det=float(np.sum(gains)), gains=gains,
                          method="dpp", m=m, wall_ms=wall_ms)


def greedy_map_naive(kernel, m, client=0):
    """Reference greedy MAP: a fresh factorization per candidate per step.

    Selection contract (tie-breaks, retirement) is identical to greedy_map;
    only the cost differs.  Kept as the equivalence oracle.
    """
    start = time.perf_counter()
    n = kernel.size
    if m > n:
        raise PoolTooSmall(f"cannot select {m} items from a pool of {n}")
    ids = np.asarray(kernel.pool_ids)
    Lw = kernel.weighted
    alive = np.ones(n, dtype=bool)
    selected_idx, gains = [], []
    current_ld = 0.0
    for _ in range(m):
        gain = np.full(n, -np.inf)
        for i in np.flatnonzero(alive):
            idx = selected_idx + [i]
            try:
                ld = cholesky_decompose(Lw[np.ix_(idx, idx)]).log_det
            except NotPositiveDefinite:
                alive[i] = False
                continue
            gain[i] = ld - current_ld
        if not alive.any():
            raise InsufficientRank(
                f"only {len(selected_idx)} of the requested {m} candidates are "
                f"linearly independent"
            )
        j, best = _pick(ids, gain, alive)
        selected_idx.append(j)
        gains.append(best)
        current_ld += best
        alive[j] = False
    wall_ms = (time.perf_counter() - start) * 1e3
    return ProxySelection(client=client,
                          selected_ids=tuple(str(ids[j]) for j in selected_idx),
                          log_det=current_ld, gains=gains,
                          method="dpp_naive", m=m, wall_ms=wall_ms)


def brute_force_map(kernel, m, client=0):
    """Exhaustive size-m maximizer of log det(Lw_S) for tiny pools.

    Ties break toward the lexicographically smallest sorted id tuple.
    """
    start = time.perf_counter()
    n = kernel.size
    if n > BRUTE_FORCE_MAX_POOL:
        raise PoolTooLarge(
            f"brute force is limited to pools of {BRUTE_FORCE_MAX_POOL}, got {n}"
        )
    if m > n:
        raise PoolTooSmall(f"cannot select {m} items from a pool of {n}")
    ids = list(kernel.pool_ids)
    Lw = kernel.weighted
    best_ld = -np.inf
    best_ids = None
    for combo in combinations(range(n), m):
        sub = Lw[np.ix_(combo, combo)]
        sign, ld = np.linalg.slogdet(sub) if m else (1.0, 0.0)
        if sign <= 0 or not np.isfinite(ld):
            continue
        combo_ids = tuple(sorted(ids[i] for i in combo))
        if ld > best_ld or (ld == best_ld and combo_ids < best_ids):
            best_ld = ld
            best_ids = combo_ids
    if best_ids is None:
        raise InsufficientRank(f"no positive-definite subset of size {m} exists")
    wall_ms = (time.perf_counter() - start) * 1e3
    return ProxySelection(client=client, selected_ids=best_ids,
                          log_det=float(best_ld), gains=[],
                          method="brute_force", m=m, wall_ms=wall_ms)


def _maybe_log_det(kernel, ids):
    if kernel is None:
        return float("nan")
    try:
        return log_prob(kernel, ids)
    except SingularSubset:
        return -np.inf


def select_random(pool, m, seed, kernel=None, client=0):
    """Uniform without-replacement baseline, seeded and deterministic."""
    start = time.perf_counter()
    if m > len(pool):
        raise PoolTooSmall(f"cannot select {m} items from a pool of {len(pool)}")
    rng = rng_for(*seed) if isinstance(seed, tuple) else rng_for(seed)
    chosen = rng.choice(len(pool), size=m, replace=False)
    ids = tuple(pool.ids[i] for i in chosen)
    wall_ms = (time.perf_counter() - start) * 1e3
    return ProxySelection(client=client, selected_ids=ids,
                          log_det=_maybe_log_det(kernel, ids), gains=[],
                          method="random", m=m, wall_ms=wall_ms)


def select_topk_relevance(scores, m, kernel=None, client=0):
    """Similarity-only baseline: top-m by relevance, no diversity term."""
    start = time.perf_counter()
    if m > len(scores.entries):
        raise PoolTooSmall(
            f"cannot select {m} items from {len(scores.entries)} scored records"
        )
    ranked = sorted(scores.entries, key=lambda i: (-scores.entries[i], i))
    ids = tuple(ranked[:m])
    wall_ms = (time.perf_counter() - start) * 1e3
    return ProxySelection(client=client, selected_ids=ids,
                          log_det=_maybe_log_det(kernel, ids), gains=[],
                          method="topk_relevance", m=m, wall_ms=wall_ms)


class DppProxySelector(BaseEstimator):
    """scikit-learn style wrapper: fit on an (n, d) pool, transform to the subset.

    Parameters
    ----------
    m : int
        Number of samples to select.
    method : str
        One of "dpp", "dpp_naive", "brute_force", "random", "topk_relevance".
    normalize_inputs : bool
        L2-normalize rows before the cosine kernel.
    seed : int
        Only used by the "random" method.
    """

    def __init__(self, m=10, method="dpp", normalize_inputs=True, seed=0):
        self.m = m
        self.method = method
        self.normalize_inputs = normalize_inputs
        self.seed = seed

    def fit(self, X, relevance=None):
        X = as_matrix(X, "X")
        if relevance is None:
            relevance = np.ones(X.shape[0])
        from .data import EmbeddingRecord, EmbeddingSet  # local to avoid cycle

        width = len(str(max(X.shape[0] - 1, 0)))
        ids = [f"{i:0{width}d}" for i in range(X.shape[0])]
        pool = EmbeddingSet(
            [EmbeddingRecord(id=i, vector=v) for i, v in zip(ids, X)]
        )
        cfg = KernelConfig(normalize_inputs=self.normalize_inputs)
        kernel = weight_kernel(build_kernel(pool, cfg), relevance,
                               pool_ids=ids,
                               features=normalized_rows(pool, cfg))
        if self.method == "dpp":
            sel = greedy_map(kernel, self.m)
        elif self.method == "dpp_naive":
            sel = greedy_map_naive(kernel, self.m)
        elif self.method == "brute_force":
            sel = brute_force_map(kernel, self.m)
        elif self.method == "random":
            sel = select_random(pool, self.m, self.seed, kernel=kernel)
        elif self.method == "topk_relevance":
            from .relevance import RelevanceScores

            entries = {i: float(r) for i, r in zip(ids, relevance)}
            sel = select_topk_relevance(
                RelevanceScores(client=0, entries=entries), self.m, kernel=kernel
            )
        else:
            raise ValueError(f"unknown method {self.method!r}")
        lookup = {pid: i for i, pid in enumerate(ids)}
        self.selection_ = sel
        self.selected_indices_ = np.array([lookup[i] for i in sel.selected_ids])
        self.log_det_ = sel.log_det
        self.gains_ = list(sel.gains)
        return self

    def transform(self, X):
        X = as_matrix(X, "X")
        return X[self.selected_indices_]

    def fit_transform(self, X, relevance=None):
        return self.fit(X, relevance=relevance).transform(X)
