"""Privacy analysis of the shared per-client routing vectors.

The routing vector is the mean embedding over a client's private and proxy
data and decomposes exactly as

    e = N/(N+m) * mu_priv + m/(N+m) * mu_proxy.

Replacing one private sample changes e by at most 2B/(N+m) <= 2B/m in L2
norm, where B bounds the embedding norms; a mean computed over private
data alone (the similarity-only baseline) has sensitivity 2B/N instead.
The analyzer verifies the decomposition, measures the worst observed
perturbation over exhaustive single-sample replacements, and demonstrates
that recovering mu_priv from e requires the never-shared private count N.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyPrivateSet,
    EmptyUnion,
    InvalidCounts,
)
from .validation import as_matrix, as_vector


@dataclass(frozen=True)
class SensitivityReport:
    """Bounds, empirical worst case, and decomposition check for one client."""

    N: int
    m: int
    B: float
    bound: float                  # 2B/(N+m)
    loose_bound: float            # 2B/m
    empirical_max: float
    private_only_bound: float     # 2B/N, the private-mean baseline
    decomposition_residual: float
    tightness_witness: bool

    def to_json(self):
        return {
            "N": self.N,
            "m": self.m,
            "B": self.B,
            "bound": self.bound,
            "loose_bound": self.loose_bound,
            "empirical_max": self.empirical_max,
            "private_only_bound": self.private_only_bound,
            "decomposition_residual": self.decomposition_residual,
            "tightness_witness": self.tightness_witness,
        }


def routing_vector(private_embs, proxy_embs):
    """Mean embedding over the private-plus-proxy union."""
    private_embs = np.atleast_2d(np.asarray(private_embs, dtype=np.float64)) \
        if len(private_embs) else np.zeros((0, 0))
    proxy_embs = np.atleast_2d(np.asarray(proxy_embs, dtype=np.float64)) \
        if len(proxy_embs) else np.zeros((0, 0))
    n, m = len(private_embs), len(proxy_embs)
    if n + m == 0:
        raise EmptyUnion("private and proxy sets are both empty")
    if n and m and private_embs.shape[1] != proxy_embs.shape[1]:
        raise DimensionMismatch(
            f"private dimension {private_embs.shape[1]} != proxy dimension "
            f"{proxy_embs.shape[1]}"
        )
    stacked = private_embs if m == 0 else (
        proxy_embs if n == 0 else np.vstack([private_embs, proxy_embs]))
    return stacked.mean(axis=0)


def sensitivity_bound(B, N, m):
    """The pair (2B/(N+m), 2B/m); the first never exceeds the second."""
    if B < 0:
        raise InvalidCounts("B must be non-negative")
    if m < 1:
        raise InvalidCounts("proxy count m must be at least 1")
    if N < 0:
        raise InvalidCounts("private count N must be non-negative")
    return 2.0 * B / (N + m), 2.0 * B / m


def private_only_sensitivity(B, N):
    """Sensitivity 2B/N of a mean computed over private data alone."""
    if N < 1:
        raise InvalidCounts("private count N must be at least 1")
    return 2.0 * B / N


def empirical_sensitivity(private_embs, proxy_embs, candidates):
    """Exhaustive single-replacement scan of the routing vector.

    Every private sample is replaced by every candidate vector and the
    worst L2 change of the mean is recorded; B is taken as the largest
    norm observed across all involved vectors, so the reported bounds are
    valid for the scanned data.
    """
    private = as_matrix(private_embs, "private_embs")
    if private.shape[0] == 0:
        raise EmptyPrivateSet("need at least one private sample")
    proxy = as_matrix(proxy_embs, "proxy_embs")
    cands = as_matrix(candidates, "candidates")
    if proxy.shape[0] < 1:
        raise InvalidCounts("proxy count m must be at least 1")
    for other, name in ((proxy, "proxy"), (cands, "candidate")):
        if other.shape[1] != private.shape[1]:
            raise DimensionMismatch(f"{name} vectors have a different dimension")
    N, m = private.shape[0], proxy.shape[0]
    B = max(
        float(np.linalg.norm(private, axis=1).max()),
        float(np.linalg.norm(proxy, axis=1).max()),
        float(np.linalg.norm(cands, axis=1).max()) if cands.shape[0] else 0.0,
    )
    tight, loose = sensitivity_bound(B, N, m)

    e = routing_vector(private, proxy)
    mu_priv = private.mean(axis=0)
    mu_proxy = proxy.mean(axis=0)
    residual = float(np.linalg.norm(
        e - (N / (N + m)) * mu_priv - (m / (N + m)) * mu_proxy))

    # ||e - e'|| = ||x_k - x_k'|| / (N + m) for each (sample, candidate) pair.
    if cands.shape[0]:
        diffs = np.linalg.norm(private[:, None, :] - cands[None, :, :], axis=-1)
        empirical = float(diffs.max() / (N + m))
    else:
        empirical = 0.0

    assert empirical <= tight + 1e-12, "observed perturbation exceeds the bound"
    assert residual <= 1e-12, "routing vector decomposition failed"
    return SensitivityReport(
        N=N, m=m, B=B, bound=tight, loose_bound=loose,
        empirical_max=empirical,
        private_only_bound=private_only_sensitivity(B, N),
        decomposition_residual=residual,
        tightness_witness=abs(empirical - tight) <= 1e-12,
    )


def recovery_requires_n_demo(e, mu_proxy, m, candidate_Ns):
    """Evaluate the recovery formula ((N+m) e - m mu_proxy) / N per guess.

    Distinct hypothesized private counts yield distinct reconstructions of
    the private mean whenever e != mu_proxy, so without the true N the
    private mean is not identifiable from the shared vector.
    """
    e = as_vector(e, "e")
    mu_proxy = as_vector(mu_proxy, "mu_proxy")
    if e.shape != mu_proxy.shape:
        raise DimensionMismatch("e and mu_proxy have different dimensions")
    if m < 1:
        raise InvalidCounts("proxy count m must be at least 1")
    candidate_Ns = list(candidate_Ns)
    if not candidate_Ns or any(n < 1 for n in candidate_Ns):
        raise InvalidCounts("candidate private counts must all be at least 1")
    return [((n + m) * e - m * mu_proxy) / n for n in candidate_Ns]
