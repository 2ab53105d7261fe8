"""Per-client relevance scoring of public samples.

A logistic regression is trained to distinguish a client's private samples
(positive) from public samples (negative); its predicted probability that a
public sample belongs to the client domain is the relevance score used to
restrict the candidate pool and to weight the selection kernel.

Training is full-batch gradient descent from a zero initialization, so runs
are bitwise reproducible; scores are clamped to [r_min, 1 - r_min] so their
logarithms stay finite downstream.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DimensionMismatch, Diverged, EmptyTrainingSet, InvalidSpec, PoolTooSmall
from .validation import as_matrix, as_vector

R_MIN = 1e-6


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(weights, bias, X, y):
    """Stable binary cross-entropy of a linear logit model."""
    z = X @ weights + bias
    # -y*log(sigma) - (1-y)*log(1-sigma) == softplus(-z) + (1-y)*z
    return float(np.mean(np.logaddexp(0.0, -z) + (1.0 - y) * z))


def bce_gradient(weights, bias, X, y):
    """Analytic gradient of bce_loss w.r.t. (weights, bias)."""
    z = X @ weights + bias
    delta = _sigmoid(z) - y
    return X.T @ delta / len(y), float(np.mean(delta))


class RelevanceClassifier(BaseEstimator):
    """Logistic domain-membership scorer with a scikit-learn surface.

    Parameters
    ----------
    learning_rate : float
        Step size of full-batch gradient descent.
    epochs : int
        Number of full-batch updates; zero leaves the model at w = 0, b = 0
        (every score 0.5).
    r_min : float
        Scores are clamped to [r_min, 1 - r_min].
    seed : int
        Kept for config symmetry; training itself is deterministic.
    """

    def __init__(self, learning_rate=0.1, epochs=500, r_min=R_MIN, seed=0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.r_min = r_min
        self.seed = seed

    def fit(self, X, y):
        X = as_matrix(X, "X")
        y = as_vector(y, "y")
        if X.shape[0] != y.shape[0]:
            raise DimensionMismatch(
                f"X has {X.shape[0]} rows but y has {y.shape[0]} entries"
            )
        w = np.zeros(X.shape[1])
        b = 0.0
        initial = bce_loss(w, b, X, y)
        loss = initial
        for _ in range(self.epochs):
            gw, gb = bce_gradient(w, b, X, y)
            w -= self.learning_rate * gw
            b -= self.learning_rate * gb
            loss = bce_loss(w, b, X, y)
            if not np.isfinite(loss):
                raise Diverged(f"loss became non-finite ({loss})")
        self.weights_ = w
        self.bias_ = b
        self.training_log_ = {"initial_loss": initial, "final_loss": loss,
                              "iterations": self.epochs}
        return self

    def decision_function(self, X):
        X = as_matrix(X, "X")
        if X.shape[1] != self.weights_.shape[0]:
            raise DimensionMismatch(
                f"X has dimension {X.shape[1]}, model has {self.weights_.shape[0]}"
            )
        return X @ self.weights_ + self.bias_

    def predict_proba(self, X):
        p = np.clip(_sigmoid(self.decision_function(X)),
                    self.r_min, 1.0 - self.r_min)
        return np.column_stack([1.0 - p, p])


def train_relevance_classifier(positives, negatives, learning_rate=0.1,
                               epochs=500, seed=0):
    """Fit the domain classifier on private positives vs. public negatives."""
    if len(positives) == 0 or len(negatives) == 0:
        raise EmptyTrainingSet("both positive and negative sets must be non-empty")
    if positives.dimension != negatives.dimension:
        raise DimensionMismatch(
            f"positives have dimension {positives.dimension}, "
            f"negatives {negatives.dimension}"
        )
    X = np.vstack([positives.vectors(), negatives.vectors()])
    y = np.concatenate([np.ones(len(positives)), np.zeros(len(negatives))])
    model = RelevanceClassifier(learning_rate=learning_rate, epochs=epochs,
                                seed=seed)
    return model.fit(X, y)


def score(model, x):
    """Clamped probability that a single vector belongs to the client domain."""
    x = as_vector(x, "x")
    return float(model.predict_proba(x[None, :])[0, 1])


@dataclass(frozen=True)
class RelevanceScores:
    """Per-client relevance of every public sample, keyed by id."""

    client: int
    entries: dict = field(default_factory=dict)


def score_set(model, public, client=0):
    """Score every record of a (sample-level) public set."""
    probs = model.predict_proba(public.vectors())[:, 1]
    return RelevanceScores(
        client=client,
        entries={rec.id: float(p) for rec, p in zip(public, probs)},
    )


def candidate_pool(scores, public, n):
    """The n highest-scoring public records, descending score, ties by id."""
    if n > len(public):
        raise PoolTooSmall(f"requested {n} candidates from a set of {len(public)}")
    missing = [rec.id for rec in public if rec.id not in scores.entries]
    if missing:
        raise InvalidSpec(f"no relevance score for ids {missing[:3]}...")
    ranked = sorted(public.ids, key=lambda i: (-scores.entries[i], i))
    return public.subset(ranked[:n])
