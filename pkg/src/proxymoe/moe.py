"""Desk-scale expert unification pipeline.

The toy model is a frozen tanh encoder, one trainable two-layer FFN block
(linear, ReLU, linear), and a frozen linear head; sequences are classified
from the mean of per-token head outputs.  The pipeline branches one expert
per client from a shared seed, fine-tunes each on private plus proxy data,
merges the FFN blocks behind a context-aware router initialized from mean
client embeddings, and fine-tunes the merged model on the union of proxy
sets.

All gradients are computed analytically in numpy (verified against central
finite differences in the tests), optimization is plain constant-rate
gradient descent, and every stage is a pure function of its config seeds.
"""

from dataclasses import dataclass, asdict

import numpy as np

from .data import (
    EmbeddingSet,
    collapse_sequences,
    expand_samples,
    generate_synthetic_domains,
    rng_for,
)
from .errors import (
    DimensionMismatch,
    Diverged,
    EmptyTrainingSet,
    IncompatibleExperts,
    InvalidSpec,
)
from .relevance import candidate_pool, score_set, train_relevance_classifier
from .router import RouterLayer, init_routing_vectors
from .selection import (
    build_kernel,
    greedy_map,
    greedy_map_naive,
    normalized_rows,
    select_random,
    select_topk_relevance,
    weight_kernel,
)

_STREAM_MODEL_INIT = 201
_STREAM_SHUFFLE = 202
_STREAM_NEGATIVES = 203
_STREAM_ROUTER_RANDOM = 204
_STREAM_RANDOM_SELECT = 205

PROXY_MIXES = ("union", "private_only", "proxy_only")
SELECTION_METHODS = ("dpp", "dpp_naive", "random", "topk_relevance")


@dataclass
class FfnParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def copy(self):
        return FfnParams(self.w1.copy(), self.b1.copy(),
                         self.w2.copy(), self.b2.copy())


@dataclass
class ToyModel:
    enc_w: np.ndarray   # (d, h)
    enc_b: np.ndarray   # (h,)
    ffn: FfnParams      # h -> h
    head_w: np.ndarray  # (h, C)
    head_b: np.ndarray  # (C,)

    @property
    def dims(self):
        return (self.enc_w.shape[0], self.enc_w.shape[1], self.head_w.shape[1])

    def copy(self):
        return ToyModel(self.enc_w.copy(), self.enc_b.copy(), self.ffn.copy(),
                        self.head_w.copy(), self.head_b.copy())

    def encode(self, x):
        return np.tanh(x @ self.enc_w + self.enc_b)


@dataclass
class MoEModel:
    enc_w: np.ndarray
    enc_b: np.ndarray
    experts: list       # of FfnParams
    router: RouterLayer
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def num_experts(self):
        return len(self.experts)

    def copy(self):
        return MoEModel(self.enc_w.copy(), self.enc_b.copy(),
                        [f.copy() for f in self.experts],
                        RouterLayer(self.router.routing_vectors.copy(),
                                    lambda_raw=self.router.lambda_raw,
                                    top_k=self.router.top_k,
                                    lambda_pinned=self.router.lambda_pinned),
                        self.head_w.copy(), self.head_b.copy())

    def encode(self, x):
        return np.tanh(x @ self.enc_w + self.enc_b)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.2
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    proxy_mix: str = "union"

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size < 1:
            raise InvalidSpec("hyperparameters must be non-negative, batch >= 1")
        if self.proxy_mix not in PROXY_MIXES:
            raise InvalidSpec(f"proxy_mix must be one of {PROXY_MIXES}")


@dataclass
class EvalReport:
    per_domain: dict
    average: float
    routing_histogram: dict = None
    config_echo: dict = None

    def to_json(self):
        return {
            "per_domain": {str(k): v for k, v in self.per_domain.items()},
            "average": self.average,
            "routing_histogram": (
                None if self.routing_histogram is None
                else {str(k): list(map(int, v))
                      for k, v in self.routing_histogram.items()}
            ),
            "config_echo": self.config_echo,
        }


# -- data marshalling ---------------------------------------------------------

def _NUM_LABELS(emb_set):
    return int(max(rec.label for rec in emb_set if rec.label is not None)) + 1


def sequence_arrays(emb_set):
    """Group token records into (S, T, d) inputs and (S,) labels."""
    groups = {}
    order = []
    for rec in emb_set:
        key = rec.seq if rec.seq is not None else rec.id
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    lengths = {len(groups[k]) for k in order}
    if len(lengths) > 1:
        raise DimensionMismatch(f"sequences have mixed lengths {sorted(lengths)}")
    X = np.stack([[t.vector for t in groups[k]] for k in order])
    labels = [groups[k][0].label for k in order]
    if any(lab is None for lab in labels):
        raise InvalidSpec("training data must be labeled")
    return X, np.asarray(labels, dtype=np.int64)


def _concat_sets(a, b):
    return EmbeddingSet(list(a.records) + list(b.records), role=a.role)


# -- forward / backward -------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _ffn_forward(ffn, Z):
    A = Z @ ffn.w1 + ffn.b1
    H = _relu(A)
    return A, H, H @ ffn.w2 + ffn.b2


def _ffn_backward(ffn, Z, A, H, dF):
    h = Z.shape[-1]
    flatZ = Z.reshape(-1, h)
    flatH = H.reshape(-1, h)
    flatdF = dF.reshape(-1, dF.shape[-1])
    gw2 = flatH.T @ flatdF
    gb2 = flatdF.sum(axis=0)
    dH = dF @ ffn.w2.T
    dA = dH * (A > 0)
    flatdA = dA.reshape(-1, h)
    gw1 = flatZ.T @ flatdA
    gb1 = flatdA.sum(axis=0)
    dZ = dA @ ffn.w1.T
    return FfnParams(gw1, gb1, gw2, gb2), dZ


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _ce_loss(seq_logits, y):
    shifted = seq_logits - seq_logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(y)), y]))


def _ce_grad(seq_logits, y):
    p = _softmax_rows(seq_logits)
    p[np.arange(len(y)), y] -= 1.0
    return p / len(y)


def toy_forward(model, X):
    """Token logits averaged into sequence logits."""
    Z = np.tanh(X @ model.enc_w + model.enc_b)
    A, H, F = _ffn_forward(model.ffn, Z)
    logits = F @ model.head_w + model.head_b
    return {"Z": Z, "A": A, "H": H, "F": F, "logits": logits,
            "seq_logits": logits.mean(axis=1)}


def toy_loss(model, emb_set):
    X, y = sequence_arrays(emb_set)
    return _ce_loss(toy_forward(model, X)["seq_logits"], y)


def toy_loss_and_grads(model, X, y):
    """Cross-entropy and analytic gradients for every toy-model parameter."""
    cache = toy_forward(model, X)
    S, T, _ = X.shape
    loss = _ce_loss(cache["seq_logits"], y)
    dlogits = np.repeat(_ce_grad(cache["seq_logits"], y)[:, None, :] / T, T, axis=1)
    flatF = cache["F"].reshape(-1, model.head_w.shape[0])
    flatdL = dlogits.reshape(-1, dlogits.shape[-1])
    ghead_w = flatF.T @ flatdL
    ghead_b = flatdL.sum(axis=0)
    dF = dlogits @ model.head_w.T
    gffn, dZ = _ffn_backward(model.ffn, cache["Z"], cache["A"], cache["H"], dF)
    dpre = dZ * (1.0 - cache["Z"] ** 2)
    flatX = X.reshape(-1, X.shape[-1])
    flatdpre = dpre.reshape(-1, dpre.shape[-1])
    genc_w = flatX.T @ flatdpre
    genc_b = flatdpre.sum(axis=0)
    return loss, {"enc_w": genc_w, "enc_b": genc_b, "ffn": gffn,
                  "head_w": ghead_w, "head_b": ghead_b}


def moe_forward_batch(moe, X):
    """Vectorized counterpart of the per-token routing reference ops."""
    Z = np.tanh(X @ moe.enc_w + moe.enc_b)
    z_seq = Z.mean(axis=1)
    lam = moe.router.effective_lambda
    z_blend = (1.0 - lam) * Z + lam * z_seq[:, None, :]
    r_logits = z_blend @ moe.router.routing_vectors.T
    pi = _softmax_rows(r_logits)
    k = moe.router.top_k
    sel = np.argsort(-pi, axis=-1, kind="stable")[:, :, :k]
    gates = np.take_along_axis(pi, sel, axis=-1)
    caches, F_all = [], []
    for ffn in moe.experts:
        A, H, F = _ffn_forward(ffn, Z)
        caches.append((A, H))
        F_all.append(F)
    F_all = np.stack(F_all)  # (K, S, T, h)
    S, T, h = Z.shape
    sidx = np.arange(S)[:, None]
    tidx = np.arange(T)[None, :]
    out = np.zeros((S, T, h))
    for j in range(k):
        out += gates[:, :, j, None] * F_all[sel[:, :, j], sidx, tidx, :]
    logits = out @ moe.head_w + moe.head_b
    return {"Z": Z, "z_seq": z_seq, "z_blend": z_blend, "pi": pi, "sel": sel,
            "gates": gates, "caches": caches, "F_all": F_all, "out": out,
            "logits": logits, "seq_logits": logits.mean(axis=1), "lam": lam}


def moe_loss(moe, emb_set):
    X, y = sequence_arrays(emb_set)
    return _ce_loss(moe_forward_batch(moe, X)["seq_logits"], y)


def moe_loss_and_grads(moe, X, y):
    """Loss plus analytic gradients for expert FFNs, routing vectors, lambda.

    Gate weights of the selected experts carry exact gradients; unselected
    experts' outputs never enter the sum, so their FFN parameters receive
    zero gradient while their routing vectors still feel the softmax
    coupling.  The encoder and head are frozen by contract.
    """
    cache = moe_forward_batch(moe, X)
    S, T, h = cache["Z"].shape
    K = moe.num_experts
    k = moe.router.top_k
    loss = _ce_loss(cache["seq_logits"], y)
    dlogits = np.repeat(_ce_grad(cache["seq_logits"], y)[:, None, :] / T, T, axis=1)
    dout = dlogits @ moe.head_w.T
    sidx = np.arange(S)[:, None]
    tidx = np.arange(T)[None, :]

    dpi = np.zeros_like(cache["pi"])
    dF_per_expert = [np.zeros((S, T, h)) for _ in range(K)]
    for j in range(k):
        pj = cache["sel"][:, :, j]
        Fj = cache["F_all"][pj, sidx, tidx, :]
        dpi[sidx, tidx, pj] += (dout * Fj).sum(axis=-1)
        contrib = cache["gates"][:, :, j, None] * dout
        for p in range(K):
            mask = pj == p
            if mask.any():
                dF_per_expert[p][mask] += contrib[mask]

    expert_grads = []
    for p in range(K):
        A, H = cache["caches"][p]
        g, _ = _ffn_backward(moe.experts[p], cache["Z"], A, H, dF_per_expert[p])
        expert_grads.append(g)

    pi = cache["pi"]
    dr_logits = pi * (dpi - (dpi * pi).sum(axis=-1, keepdims=True))
    gE = np.einsum("stk,sth->kh", dr_logits, cache["z_blend"])
    dz_blend = dr_logits @ moe.router.routing_vectors
    if moe.router.lambda_pinned:
        glam_raw = 0.0
    else:
        dlam = float((dz_blend * (cache["z_seq"][:, None, :] - cache["Z"])).sum())
        lam = cache["lam"]
        glam_raw = dlam * lam * (1.0 - lam)
    return loss, {"experts": expert_grads, "routing_vectors": gE,
                  "lambda_raw": glam_raw}


# -- training loops -----------------------------------------------------------

def _minibatches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _check_finite(loss):
    if not np.isfinite(loss):
        raise Diverged(f"training loss became non-finite ({loss})")


def _init_toy_model(d, h, C, seed):
    rng = rng_for(seed, _STREAM_MODEL_INIT)
    return ToyModel(
        enc_w=rng.standard_normal((d, h)) / np.sqrt(d),
        enc_b=np.zeros(h),
        ffn=FfnParams(
            w1=rng.standard_normal((h, h)) / np.sqrt(h),
            b1=np.zeros(h),
            w2=rng.standard_normal((h, h)) / np.sqrt(h),
            b2=np.zeros(h),
        ),
        head_w=rng.standard_normal((h, C)) / np.sqrt(h),
        head_b=np.zeros(C),
    )


def train_seed(public, cfg, hidden_dim=32, num_classes=None):
    """Train every parameter of a fresh model on the labeled public set."""
    if len(public) == 0:
        raise EmptyTrainingSet("public set is empty")
    X, y = sequence_arrays(public)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    model = _init_toy_model(X.shape[-1], hidden_dim, num_classes, cfg.seed)
    rng = rng_for(cfg.seed, _STREAM_SHUFFLE)
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        for batch in _minibatches(len(y), cfg.batch_size, rng):
            loss, g = toy_loss_and_grads(model, X[batch], y[batch])
            _check_finite(loss)
            model.enc_w -= lr * g["enc_w"]
            model.enc_b -= lr * g["enc_b"]
            model.head_w -= lr * g["head_w"]
            model.head_b -= lr * g["head_b"]
            for name in ("w1", "b1", "w2", "b2"):
                arr = getattr(model.ffn, name)
                arr -= lr * getattr(g["ffn"], name)
    return model


def branch_and_finetune_expert(seed_model, private, proxy, cfg):
    """Branch from the seed and fine-tune only the FFN block.

    The training set follows cfg.proxy_mix: the private-plus-proxy union,
    private only, or proxy only.  Encoder and head stay bit-identical to
    the seed's.
    """
    if cfg.proxy_mix == "private_only":
        data = private
    elif cfg.proxy_mix == "proxy_only":
        data = proxy
    else:
        if proxy is None or len(proxy) == 0:
            raise EmptyTrainingSet(
                "proxy set may be empty only with proxy_mix='private_only'"
            )
        data = _concat_sets(private, proxy)
    if data is None or len(data) == 0:
        raise EmptyTrainingSet("expert training set is empty")
    X, y = sequence_arrays(data)
    model = seed_model.copy()
    rng = rng_for(cfg.seed, _STREAM_SHUFFLE)
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        for batch in _minibatches(len(y), cfg.batch_size, rng):
            loss, g = toy_loss_and_grads(model, X[batch], y[batch])
            _check_finite(loss)
            for name in ("w1", "b1", "w2", "b2"):
                arr = getattr(model.ffn, name)
                arr -= lr * getattr(g["ffn"], name)
    return model


def unify(experts, router_init, top_k=1, lambda_pinned=False):
    """Merge experts' FFN blocks behind a router; blend weight starts at 0.5."""
    first = experts[0]
    for other in experts[1:]:
        if not (np.array_equal(first.enc_w, other.enc_w)
                and np.array_equal(first.enc_b, other.enc_b)
                and np.array_equal(first.head_w, other.head_w)
                and np.array_equal(first.head_b, other.head_b)):
            raise IncompatibleExperts(
                "experts do not share bit-identical encoder and head"
            )
    router = RouterLayer(routing_vectors=np.asarray(router_init, dtype=np.float64),
                         lambda_raw=0.0, top_k=top_k, lambda_pinned=lambda_pinned)
    if router.num_experts != len(experts):
        raise IncompatibleExperts(
            f"{len(experts)} experts but {router.num_experts} routing vectors"
        )
    return MoEModel(enc_w=first.enc_w.copy(), enc_b=first.enc_b.copy(),
                    experts=[e.ffn.copy() for e in experts], router=router,
                    head_w=first.head_w.copy(), head_b=first.head_b.copy())


def finetune_moe(moe, union_proxies, cfg):
    """Fine-tune expert FFNs and the router on the aggregated proxy data."""
    if union_proxies is None or len(union_proxies) == 0:
        raise EmptyTrainingSet("aggregated proxy set is empty")
    X, y = sequence_arrays(union_proxies)
    model = moe.copy()
    rng = rng_for(cfg.seed, _STREAM_SHUFFLE)
    lr = cfg.learning_rate
    for _ in range(cfg.epochs):
        for batch in _minibatches(len(y), cfg.batch_size, rng):
            loss, g = moe_loss_and_grads(model, X[batch], y[batch])
            _check_finite(loss)
            for ffn, gffn in zip(model.experts, g["experts"]):
                for name in ("w1", "b1", "w2", "b2"):
                    arr = getattr(ffn, name)
                    arr -= lr * getattr(gffn, name)
            model.router.routing_vectors -= lr * g["routing_vectors"]
            model.router.lambda_raw -= lr * g["lambda_raw"]
    return model


# -- evaluation ---------------------------------------------------------------

def predict(model, X):
    if isinstance(model, MoEModel):
        return moe_forward_batch(model, X)["seq_logits"].argmax(axis=1)
    return toy_forward(model, X)["seq_logits"].argmax(axis=1)


def evaluate(model, tests):
    """Per-domain accuracy, the arithmetic-mean average, and routing usage."""
    per_domain = {}
    histogram = {} if isinstance(model, MoEModel) else None
    for i, test_set in enumerate(tests):
        domain = test_set.records[0].domain if len(test_set) else i
        X, y = sequence_arrays(test_set)
        per_domain[domain] = float(np.mean(predict(model, X) == y))
        if histogram is not None:
            pi = moe_forward_batch(model, X)["pi"]
            winners = pi.argmax(axis=-1).ravel()
            histogram[domain] = [int((winners == p).sum())
                                 for p in range(model.num_experts)]
    average = float(np.mean(list(per_domain.values())))
    return EvalReport(per_domain=per_domain, average=average,
                      routing_histogram=histogram)


# -- end-to-end pipeline ------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    """Desk-scale defaults for the full unification pipeline."""

    pool_n: int = 60
    proxy_m: int = 15
    top_k: int = 1
    lambda_pinned: bool = False
    router_init: str = "domain_aware"   # or "random"
    relevance_lr: float = 0.5
    relevance_epochs: int = 300
    hidden_dim: int = 32
    learning_rate: float = 0.2
    moe_learning_rate: float = 0.05
    seed_epochs: int = 50
    expert_epochs: int = 110
    moe_epochs: int = 40
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.router_init not in ("domain_aware", "random"):
            raise InvalidSpec("router_init must be 'domain_aware' or 'random'")


def select_proxies(public_samples, client_samples, method, pool_n, proxy_m,
                   relevance_lr, relevance_epochs, seed, client=0):
    """Relevance -> candidate pool -> per-method proxy selection.

    Operates on sample-level (sequence-collapsed) sets and returns the
    selection plus the scores it was based on.
    """
    n_neg = min(10 * len(client_samples), len(public_samples))
    neg_idx = rng_for(seed, _STREAM_NEGATIVES, client).choice(
        len(public_samples), size=n_neg, replace=False)
    negatives = public_samples.subset([public_samples.ids[i] for i in neg_idx])
    model = train_relevance_classifier(client_samples, negatives,
                                       learning_rate=relevance_lr,
                                       epochs=relevance_epochs, seed=seed)
    scores = score_set(model, public_samples, client=client)
    pool = candidate_pool(scores, public_samples, pool_n)
    base = build_kernel(pool)
    r = np.array([scores.entries[i] for i in pool.ids])
    kernel = weight_kernel(base, r, pool_ids=pool.ids,
                           features=normalized_rows(pool))
    if method == "dpp":
        sel = greedy_map(kernel, proxy_m, client=client)
    elif method == "dpp_naive":
        sel = greedy_map_naive(kernel, proxy_m, client=client)
    elif method == "random":
        # Random draws from the whole public set: it captures neither
        # relevance nor diversity, unlike pool-restricted methods.
        sel = select_random(public_samples, proxy_m,
                            seed=(seed, _STREAM_RANDOM_SELECT, client),
                            client=client)
    elif method == "topk_relevance":
        pool_scores = type(scores)(client=client,
                                   entries={i: scores.entries[i]
                                            for i in pool.ids})
        sel = select_topk_relevance(pool_scores, proxy_m, kernel=kernel,
                                    client=client)
    else:
        raise InvalidSpec(f"selection method must be one of {SELECTION_METHODS}")
    return sel, scores


def run_pipeline(spec, selection_method="dpp", proxy_mix="union",
                 cfg=PipelineConfig()):
    """Execute the full unification pipeline on the synthetic task.

    Stages: seed training, per-client relevance scoring and proxy
    selection, proxy-aligned expert fine-tuning, domain-aware router
    initialization, merging, final fine-tuning on the aggregated proxies,
    and per-domain evaluation.
    """
    public, clients, tests = generate_synthetic_domains(spec)
    seed_cfg = TrainConfig(learning_rate=cfg.learning_rate,
                           epochs=cfg.seed_epochs, batch_size=cfg.batch_size,
                           seed=cfg.seed)
    # The seed pretrains on the generic (distractor) slice of the public
    # corpus: client domains are out-of-distribution for it, like a public
    # instruction corpus with no client-domain overlap.
    generic = EmbeddingSet([r for r in public if r.domain == -1],
                           role="public")
    if len(generic) == 0:
        generic = public
    seed_model = train_seed(generic, seed_cfg, hidden_dim=cfg.hidden_dim,
                            num_classes=_NUM_LABELS(public))

    public_samples = collapse_sequences(public)
    experts, proxies = [], []
    for p, client_set in enumerate(clients):
        client_samples = collapse_sequences(client_set)
        sel, _ = select_proxies(public_samples, client_samples,
                                selection_method, cfg.pool_n, cfg.proxy_m,
                                cfg.relevance_lr, cfg.relevance_epochs,
                                cfg.seed, client=p)
        proxy = expand_samples(public, sel.selected_ids, role="proxy")
        proxies.append(proxy)
        expert_cfg = TrainConfig(learning_rate=cfg.learning_rate,
                                 epochs=cfg.expert_epochs,
                                 batch_size=cfg.batch_size, seed=cfg.seed,
                                 proxy_mix=proxy_mix)
        experts.append(branch_and_finetune_expert(seed_model, client_set,
                                                  proxy, expert_cfg))

    if cfg.router_init == "domain_aware":
        unions = [
            np.vstack([clients[p].vectors(), proxies[p].vectors()])
            for p in range(len(clients))
        ]
        router_init = init_routing_vectors(
            [e.encode for e in experts], unions)
    else:
        rng = rng_for(cfg.seed, _STREAM_ROUTER_RANDOM)
        router_init = rng.standard_normal(
            (len(experts), cfg.hidden_dim)) / np.sqrt(cfg.hidden_dim)

    moe = unify(experts, router_init, top_k=cfg.top_k,
                lambda_pinned=cfg.lambda_pinned)

    seen = set()
    union_records = []
    for proxy in proxies:
        for rec in proxy:
            if rec.id not in seen:
                seen.add(rec.id)
                union_records.append(rec)
    union_proxies = EmbeddingSet(union_records, role="proxy")
    moe_cfg = TrainConfig(learning_rate=cfg.moe_learning_rate,
                          epochs=cfg.moe_epochs, batch_size=cfg.batch_size,
                          seed=cfg.seed)
    moe = finetune_moe(moe, union_proxies, moe_cfg)

    report = evaluate(moe, tests)
    report.config_echo = {
        "spec": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                 for k, v in asdict(spec).items()},
        "selection_method": selection_method,
        "proxy_mix": proxy_mix,
        "pipeline": asdict(cfg),
    }
    return report
