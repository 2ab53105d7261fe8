"""Context-aware token routing over expert feed-forward blocks.

Routing blends each token representation with its sequence mean,

    z_blend = (1 - lam) * z_t + lam * z_seq,      lam = sigmoid(lambda_raw),

dots the blend against one learnable routing vector per expert, and
softmaxes the logits into a distribution; the top-k experts' outputs are
combined with their gate values.  Routing vectors are initialized to the
mean embedding of each client's private-plus-proxy data, which gives the
router domain priors before any fine-tuning.

These are the single-token reference operations; the batched training
path in ``moe`` must agree with them exactly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyClientData, EmptySequence
from .validation import as_vector


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))


@dataclass
class RouterLayer:
    """Per-expert routing vectors plus the learnable blend weight.

    ``lambda_pinned`` disables context blending entirely (effective
    lambda exactly 0), which is the token-only ablation.
    """

    routing_vectors: np.ndarray  # (K, dim)
    lambda_raw: float = 0.0
    top_k: int = 1
    lambda_pinned: bool = False

    def __post_init__(self):
        self.routing_vectors = np.asarray(self.routing_vectors, dtype=np.float64)
        if self.routing_vectors.ndim != 2:
            raise DimensionMismatch("routing_vectors must be a (K, dim) matrix")
        if not 1 <= self.top_k <= self.num_experts:
            raise DimensionMismatch(
                f"top_k {self.top_k} outside [1, {self.num_experts}]"
            )

    @property
    def num_experts(self):
        return self.routing_vectors.shape[0]

    @property
    def dim(self):
        return self.routing_vectors.shape[1]

    @property
    def effective_lambda(self):
        return 0.0 if self.lambda_pinned else float(_sigmoid(self.lambda_raw))

    def to_json(self):
        return {
            "K": self.num_experts,
            "dim": self.dim,
            "lambda_raw": self.lambda_raw,
            "lambda_pinned": self.lambda_pinned,
            "top_k": self.top_k,
            "routing_vectors": [[float(v) for v in row]
                                for row in self.routing_vectors],
        }

    @classmethod
    def from_json(cls, obj):
        layer = cls(routing_vectors=np.asarray(obj["routing_vectors"]),
                    lambda_raw=float(obj["lambda_raw"]),
                    top_k=int(obj.get("top_k", 1)),
                    lambda_pinned=bool(obj.get("lambda_pinned", False)))
        if layer.num_experts != obj["K"] or layer.dim != obj["dim"]:
            raise DimensionMismatch("router JSON shape fields disagree with data")
        return layer


@dataclass(frozen=True)
class RoutingDecision:
    distribution: np.ndarray  # (K,), sums to 1
    chosen: tuple             # top_k expert indices, ties toward lowest
    weights: np.ndarray       # gate values of the chosen experts


def blend(z_t, z_seq, lam):
    """Convex combination (1 - lam) * z_t + lam * z_seq."""
    z_t = as_vector(z_t, "z_t")
    z_seq = as_vector(z_seq, "z_seq")
    if z_t.shape != z_seq.shape:
        raise DimensionMismatch(
            f"token dim {z_t.shape[0]} != sequence dim {z_seq.shape[0]}"
        )
    if not 0.0 <= lam <= 1.0:
        raise DimensionMismatch(f"lambda {lam} outside [0, 1]")
    return (1.0 - lam) * z_t + lam * z_seq


def sequence_embedding(tokens):
    """Arithmetic mean of the token representations."""
    tokens = list(tokens)
    if not tokens:
        raise EmptySequence("sequence has no tokens")
    return np.mean([as_vector(t, "token") for t in tokens], axis=0)


def softmax(logits):
    shifted = logits - np.max(logits)
    e = np.exp(shifted)
    return e / e.sum()


def top_k_indices(distribution, k):
    """Indices of the k largest entries, ties toward the lowest index."""
    order = np.argsort(-distribution, kind="stable")
    return tuple(int(i) for i in order[:k])


def routing_distribution(router, z_t, z_seq):
    """Softmax routing over the blended representation."""
    z = blend(z_t, z_seq, router.effective_lambda)
    if z.shape[0] != router.dim:
        raise DimensionMismatch(
            f"representation dim {z.shape[0]} != router dim {router.dim}"
        )
    pi = softmax(router.routing_vectors @ z)
    chosen = top_k_indices(pi, router.top_k)
    return RoutingDecision(distribution=pi, chosen=chosen,
                           weights=pi[list(chosen)])


def init_routing_vectors(expert_encoders, client_unions):
    """Domain-aware initialization: mean encoded embedding per client union.

    ``client_unions[p]`` holds the raw input vectors (tokens) of client p's
    private-plus-proxy data; ``expert_encoders[p]`` maps them into the
    routing space.
    """
    vectors = []
    for p, (encode, union) in enumerate(zip(expert_encoders, client_unions)):
        union = np.asarray(union, dtype=np.float64)
        if union.size == 0:
            raise EmptyClientData(f"client {p} has no private or proxy data")
        vectors.append(np.mean([encode(x) for x in union], axis=0))
    return np.stack(vectors)


def moe_forward(experts, router, z_t, z_seq):
    """Gate-weighted sum of the chosen experts' outputs on the raw token."""
    z_t = as_vector(z_t, "z_t")
    decision = routing_distribution(router, z_t, z_seq)
    out = None
    for gate, p in zip(decision.weights, decision.chosen):
        value = experts[p](z_t)
        if out is None:
            out = gate * value
        elif value.shape != out.shape:
            raise DimensionMismatch("expert outputs disagree in dimension")
        else:
            out = out + gate * value
    return out
