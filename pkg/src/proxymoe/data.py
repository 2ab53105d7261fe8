"""Embedding sets: JSONL persistence, synthetic multi-domain tasks, PCA.

File format is UTF-8 JSON lines, one record per line:

    {"id": "a", "vec": [0.1, 0.2], "label": 1, "domain": 0, "seq": "s-00"}

``label``, ``domain`` and ``seq`` are optional.  Sequences of T tokens are
stored as T consecutive records sharing a ``seq`` group id, so one format
serves both single-vector (T=1) and token-sequence (T>1) data.

All randomness uses the Philox counter-based generator, seeded per
(seed, stream, index) so that adding a domain never perturbs the draws of
existing ones and output is bit-identical across platforms.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSet, DimensionMismatch, InvalidSpec, ParseError

# Stream tags keeping the per-purpose Philox streams disjoint.
_STREAM_DOMAIN_GEOMETRY = 101
_STREAM_DISTRACTOR_GEOMETRY = 102
_STREAM_COLLISION_GEOMETRY = 103
_STREAM_CLIENT_DATA = 104
_STREAM_TEST_DATA = 105
_STREAM_PUBLIC_DOMAIN = 106
_STREAM_PUBLIC_DISTRACTOR = 107

# The mode geometry (centers, class directions, lobes) is a fixed property
# of the task family, like a benchmark's datasets; spec.seed varies the
# sampled data, not the task itself.
_GEOMETRY_KEY = 90817

# Geometry of the synthetic task.  Every mode (client domain or
# distractor) carries its labels along its own class direction, so a token
# is only decodable by a model that knows which domain it came from.
# Collision tokens are drawn around one shared center and are therefore
# ambiguous at token level; sequence context resolves them.  Client
# domains are bimodal: two angular lobes, the outer one scoring higher on
# any radial relevance ranking.  Public sequences come in bursts of
# near-duplicates (scraped-corpus redundancy): ranking-only selection
# fills its budget with burst-mates while determinantal repulsion skips
# them.
_CENTER_SCALE = 3.0
_CLASS_MARGIN = 1.2
_PUBLIC_STDDEV_FACTOR = 1.0
_PUBLIC_DOMAIN_FRACTION = 0.25
_PUBLIC_DISTRACTOR_MULTIPLIER = 4
_PUBLIC_BURST = 4
_BURST_JITTER = 0.2
_SUBMODE_SPREAD = 1.8
_SUBMODE_RADIAL = 0.6
_DISTRACTOR_ADJACENCY = 0.4
_CLIENT_COLLISION_FACTOR = 0.15
_NUM_CLASSES = 2


def rng_for(*key):
    """Project-wide deterministic generator for an integer key tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    label: int = None
    domain: int = None
    seq: str = None


class EmbeddingSet:
    """An ordered collection of same-dimension embedding records."""

    def __init__(self, records, role="public"):
        records = list(records)
        if records:
            dim = records[0].vector.shape[0]
            for rec in records:
                if rec.vector.shape[0] != dim:
                    raise DimensionMismatch(
                        f"record {rec.id!r} has dimension {rec.vector.shape[0]}, "
                        f"expected {dim}"
                    )
        else:
            dim = 0
        ids = [rec.id for rec in records]
        if len(set(ids)) != len(ids):
            raise InvalidSpec("record ids are not unique within the set")
        self.records = records
        self.dimension = dim
        self.role = role
        self._by_id = {rec.id: rec for rec in records}

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, rec_id):
        return self._by_id[rec_id]

    def __contains__(self, rec_id):
        return rec_id in self._by_id

    @property
    def ids(self):
        return [rec.id for rec in self.records]

    def vectors(self):
        """Stack all vectors into an (n, dim) float64 matrix."""
        if not self.records:
            return np.zeros((0, self.dimension))
        return np.stack([rec.vector for rec in self.records])

    def labels(self):
        return np.array([rec.label for rec in self.records])

    def subset(self, ids, role=None):
        """Records for the given ids, in the given order."""
        return EmbeddingSet(
            [self._by_id[i] for i in ids], role=role or self.role
        )

    def has_sequences(self):
        return any(rec.seq is not None for rec in self.records)


def load_embeddings(path, role="public"):
    """Load an EmbeddingSet from a JSON-lines file.

    Raises ParseError (with the offending line number) on malformed input,
    DimensionMismatch when a line's vector length differs from the first.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or 'cannot read file'}") from exc

    records = []
    dim = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
        if not isinstance(obj, dict):
            raise ParseError("record is not an object", line=lineno)
        if "id" not in obj or "vec" not in obj:
            raise ParseError("record needs 'id' and 'vec' fields", line=lineno)
        if not isinstance(obj["id"], str):
            raise ParseError("'id' must be a string", line=lineno)
        vec = obj["vec"]
        if not isinstance(vec, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec
        ):
            raise ParseError("'vec' must be an array of numbers", line=lineno)
        label = obj.get("label")
        domain = obj.get("domain")
        seq = obj.get("seq")
        if label is not None and not isinstance(label, int):
            raise ParseError("'label' must be an integer", line=lineno)
        if domain is not None and not isinstance(domain, int):
            raise ParseError("'domain' must be an integer", line=lineno)
        if seq is not None and not isinstance(seq, str):
            raise ParseError("'seq' must be a string", line=lineno)
        vector = np.asarray(vec, dtype=np.float64)
        if dim is None:
            dim = vector.shape[0]
        elif vector.shape[0] != dim:
            raise DimensionMismatch(
                f"line {lineno}: vector has {vector.shape[0]} dims, expected {dim}"
            )
        records.append(
            EmbeddingRecord(id=obj["id"], vector=vector, label=label,
                            domain=domain, seq=seq)
        )
    if not records:
        raise ParseError("empty set")
    return EmbeddingSet(records, role=role)


def save_embeddings(emb_set, path):
    """Write a set as JSON lines; load_embeddings round-trips it exactly."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in emb_set:
            obj = {"id": rec.id, "vec": [float(v) for v in rec.vector]}
            if rec.label is not None:
                obj["label"] = int(rec.label)
            if rec.domain is not None:
                obj["domain"] = int(rec.domain)
            if rec.seq is not None:
                obj["seq"] = rec.seq
            fh.write(json.dumps(obj) + "\n")


def collapse_sequences(emb_set, role=None):
    """Collapse token records into one sample per sequence group.

    Records sharing a ``seq`` id become a single record whose vector is the
    token mean and whose id is the group id; records without a group pass
    through unchanged.  Selection and relevance scoring operate on this
    sample-level view.
    """
    groups = {}
    order = []
    for rec in emb_set:
        key = rec.seq if rec.seq is not None else rec.id
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(rec)
    collapsed = []
    for key in order:
        toks = groups[key]
        vec = np.mean([t.vector for t in toks], axis=0)
        collapsed.append(
            EmbeddingRecord(id=key, vector=vec, label=toks[0].label,
                            domain=toks[0].domain)
        )
    return EmbeddingSet(collapsed, role=role or emb_set.role)


def expand_samples(emb_set, sample_ids, role="proxy"):
    """Recover all token records behind the given sample-level ids."""
    wanted = set(sample_ids)
    records = [
        rec for rec in emb_set
        if (rec.seq if rec.seq is not None else rec.id) in wanted
    ]
    return EmbeddingSet(records, role=role)


@dataclass(frozen=True)
class DomainSpec:
    """Parameters of the synthetic multi-domain sequence task."""

    num_domains: int = 3
    tokens_per_sequence: int = 4
    sequences_per_domain: int = 100
    dimension: int = 16
    cluster_centers: np.ndarray = None
    intra_cluster_stddev: float = 0.8
    collision_overlap: float = 0.55
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1:
            raise InvalidSpec("num_domains must be >= 1")
        if self.tokens_per_sequence < 1:
            raise InvalidSpec("tokens_per_sequence must be >= 1")
        if self.sequences_per_domain < 1:
            raise InvalidSpec("sequences_per_domain must be >= 1")
        if self.dimension < 2:
            raise InvalidSpec("dimension must be >= 2")
        if not 0.0 <= self.collision_overlap <= 1.0:
            raise InvalidSpec("collision_overlap must be in [0, 1]")
        if self.intra_cluster_stddev <= 0:
            raise InvalidSpec("intra_cluster_stddev must be positive")
        if self.cluster_centers is not None:
            centers = np.asarray(self.cluster_centers, dtype=np.float64)
            if centers.shape != (self.num_domains, self.dimension):
                raise InvalidSpec(
                    f"cluster_centers must have shape "
                    f"({self.num_domains}, {self.dimension})"
                )
            object.__setattr__(self, "cluster_centers", centers)


def _unit(v):
    return v / np.linalg.norm(v)


def _mode_geometry(spec):
    """Centers, per-lobe class directions, submodes, and collision center.

    Each client domain p and each distractor mode g gets an independent
    stream, so geometry for existing domains is unaffected by K changing.
    A client domain's two lobes carry labels along two different class
    directions; all directions are orthogonalized against the center and
    the collision center so position and label stay decoupled.
    """
    d = spec.dimension
    collision_center = _CENTER_SCALE * _unit(
        rng_for(_GEOMETRY_KEY, _STREAM_COLLISION_GEOMETRY).standard_normal(d)
    )

    def draw_dir(rng, refs):
        raw = rng.standard_normal(d)
        for ref in refs:
            u = _unit(ref)
            raw = raw - (raw @ u) * u
        return _unit(raw)

    def draw_mode(stream, index, with_submode=False):
        rng = rng_for(_GEOMETRY_KEY, stream, index)
        raw = rng.standard_normal(d)
        raw = raw - (raw @ _unit(collision_center)) * _unit(collision_center)
        center = _CENTER_SCALE * _unit(raw)
        primary_dir = draw_dir(rng, (center, collision_center))
        if not with_submode:
            return center, primary_dir, None, None
        secondary_dir = draw_dir(rng, (center, collision_center, primary_dir))
        ortho = draw_dir(rng, (center, collision_center, primary_dir,
                               secondary_dir))
        submode = _unit(_SUBMODE_RADIAL * _unit(center)
                        + np.sqrt(1 - _SUBMODE_RADIAL ** 2) * ortho)
        return center, primary_dir, secondary_dir, submode

    centers, class_dirs, submodes = [], [], []
    for p in range(spec.num_domains):
        center, primary, secondary, submode = draw_mode(
            _STREAM_DOMAIN_GEOMETRY, p, with_submode=True)
        centers.append(center)
        class_dirs.append((primary, secondary))
        submodes.append(submode)
    if spec.cluster_centers is not None:
        centers = [spec.cluster_centers[p] for p in range(spec.num_domains)]
    # Distractor g is an adjacent topic of client domain g: close enough to
    # interfere when selected, but off-domain.
    dis_centers, dis_dirs = [], []
    for g in range(spec.num_domains):
        center, class_dir, _, _ = draw_mode(_STREAM_DISTRACTOR_GEOMETRY, g)
        adjacent = _CENTER_SCALE * _unit(
            _DISTRACTOR_ADJACENCY * _unit(centers[g])
            + (1.0 - _DISTRACTOR_ADJACENCY) * _unit(center))
        dis_centers.append(adjacent)
        dis_dirs.append(class_dir)
    return centers, class_dirs, submodes, dis_centers, dis_dirs, collision_center


def _draw_sequences(spec, rng, count, center, class_dir, collision_center,
                    stddev, id_prefix, domain, submode_dir=None,
                    burst_size=1, collision_rate=None, lobes="both"):
    """Sample sequences around one mode.

    Unimodal modes take a single class direction.  Bimodal modes take a
    (primary, secondary) direction pair; each sequence sits in one lobe
    and its labels sit on that lobe's direction, so the decode rule for a
    lobe can only be learned from data that covers it.  ``lobes`` limits
    sampling to the primary lobe (a client's narrow local slice) or spans
    both (the full deployed domain).  With burst_size > 1, consecutive
    sequences are jittered near-duplicates of one freshly drawn content.
    """
    T = spec.tokens_per_sequence
    if collision_rate is None:
        collision_rate = spec.collision_overlap
    records = []
    content = None
    label = 0
    for i in range(count):
        if i % burst_size == 0:
            label = int(rng.integers(_NUM_CLASSES))
            base_center = center
            direction = class_dir
            if submode_dir is not None:
                lobe = 1.0 if lobes == "primary" else 2.0 * rng.integers(2) - 1.0
                base_center = center + lobe * _SUBMODE_SPREAD * submode_dir
                direction = class_dir[0] if lobe > 0 else class_dir[1]
            offset = (2 * label - 1) * _CLASS_MARGIN * direction
            content = np.stack([
                (collision_center if rng.random() < collision_rate
                 else base_center)
                + offset + stddev * rng.standard_normal(spec.dimension)
                for _ in range(T)
            ])
            tokens = content
        else:
            tokens = content + _BURST_JITTER * stddev * rng.standard_normal(
                content.shape)
        sid = f"{id_prefix}-{i:04d}"
        for t in range(T):
            if T == 1:
                records.append(EmbeddingRecord(id=sid, vector=tokens[t],
                                               label=label, domain=domain))
            else:
                records.append(EmbeddingRecord(id=f"{sid}:{t}", vector=tokens[t],
                                               label=label, domain=domain,
                                               seq=sid))
    return records


def generate_synthetic_domains(spec):
    """Build the public pool, per-client private sets, and test sets.

    The public set mixes broad draws around every client-domain center plus
    an equal number of distractor modes (domain index -1); client sets are
    tight draws around their own center; test sets are fresh draws from the
    client distributions.  Deterministic per (spec.seed, domain index).
    """
    centers, class_dirs, submodes, dis_centers, dis_dirs, collision = \
        _mode_geometry(spec)
    public_std = spec.intra_cluster_stddev * _PUBLIC_STDDEV_FACTOR

    # Client-domain content is rare in the public corpus; generic
    # distractor topics dominate it.
    n_domain = max(int(spec.sequences_per_domain * _PUBLIC_DOMAIN_FRACTION),
                   2 * _PUBLIC_BURST)
    n_distract = spec.sequences_per_domain * _PUBLIC_DISTRACTOR_MULTIPLIER
    public_records = []
    for p in range(spec.num_domains):
        rng = rng_for(spec.seed, _STREAM_PUBLIC_DOMAIN, p)
        public_records += _draw_sequences(
            spec, rng, n_domain, centers[p], class_dirs[p],
            collision, public_std, f"pub-d{p}", p, submode_dir=submodes[p],
            burst_size=_PUBLIC_BURST)
    for g in range(spec.num_domains):
        rng = rng_for(spec.seed, _STREAM_PUBLIC_DISTRACTOR, g)
        public_records += _draw_sequences(
            spec, rng, n_distract, dis_centers[g], dis_dirs[g],
            collision, public_std, f"pub-x{g}", -1,
            burst_size=_PUBLIC_BURST)
    public = EmbeddingSet(public_records, role="public")

    clients, tests = [], []
    for p in range(spec.num_domains):
        rng = rng_for(spec.seed, _STREAM_CLIENT_DATA, p)
        clients.append(EmbeddingSet(
            _draw_sequences(spec, rng, spec.sequences_per_domain, centers[p],
                            class_dirs[p], collision,
                            spec.intra_cluster_stddev, f"c{p}", p,
                            submode_dir=submodes[p],
                            collision_rate=spec.collision_overlap
                            * _CLIENT_COLLISION_FACTOR,
                            lobes="primary"),
            role="private"))
        rng = rng_for(spec.seed, _STREAM_TEST_DATA, p)
        tests.append(EmbeddingSet(
            _draw_sequences(spec, rng, max(spec.sequences_per_domain, 8),
                            centers[p], class_dirs[p], collision,
                            spec.intra_cluster_stddev, f"t{p}", p,
                            submode_dir=submodes[p]),
            role="test"))
    return public, clients, tests


@dataclass(frozen=True)
class Projection2D:
    points: list = field(default_factory=list)  # (id, x, y) tuples
    retained_variance: float = 0.0


def pca_project_2d(emb_set, basis_vectors=None):
    """Project onto the top-2 principal components of the mean-centered set.

    ``basis_vectors`` optionally supplies a different matrix to fit the
    basis on (e.g. pool plus private overlay) while projecting the set.
    Raises DegenerateSet for fewer than 2 records or all-identical vectors.
    """
    if len(emb_set) < 2:
        raise DegenerateSet("need at least 2 records to project")
    fit = basis_vectors if basis_vectors is not None else emb_set.vectors()
    mean = fit.mean(axis=0)
    cov = np.cov(fit - mean, rowvar=False, bias=True)
    cov = np.atleast_2d(cov)
    total = float(np.trace(cov))
    if total <= 1e-18:
        raise DegenerateSet("all vectors are identical")
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order]
    if comps.shape[1] < 2:  # 1-D input
        comps = np.hstack([comps, np.zeros((comps.shape[0], 1))])
        evals = np.append(evals, 0.0)
    # Deterministic sign: largest-magnitude loading is positive.
    for j in range(2):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    coords = (emb_set.vectors() - mean) @ comps
    retained = float(evals[order].sum() / total)
    points = [(rec.id, float(x), float(y))
              for rec, (x, y) in zip(emb_set, coords)]
    return Projection2D(points=points, retained_variance=retained)
