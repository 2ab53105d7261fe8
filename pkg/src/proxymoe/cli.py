"""Command-line front end.

Five subcommands: ``select`` (relevance-weighted proxy selection over
embedding files), ``simulate`` (the synthetic end-to-end pipeline),
``privacy-report`` (routing-vector sensitivity analysis), ``bench``
(greedy-selection timing grid), and ``project`` (2-D PCA emission with
selection markers).

Configuration is a JSON object with one section per command; CLI flags
override file values and ``--seed`` overrides every nested seed.  Exit
codes: 0 success, 1 internal error, 2 input error.  Errors are printed as
one machine-parseable line: ``error: <ErrorClass>: <message>``.
"""

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .data import (
    DomainSpec,
    collapse_sequences,
    load_embeddings,
    pca_project_2d,
    rng_for,
)
from .errors import InputError, InvalidSpec, ParseError, ProxymoeError
from .moe import PipelineConfig, run_pipeline, select_proxies
from .privacy import empirical_sensitivity
from .selection import (
    DEFAULT_POOL_N,
    DEFAULT_PROXY_M,
    KernelConfig,
    build_kernel,
    greedy_map,
    normalized_rows,
    weight_kernel,
)


def _from_dict(cls, obj, where):
    if not isinstance(obj, dict):
        raise ParseError(f"config section {where!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ParseError(f"unknown config keys in {where!r}: {unknown}")
    return cls(**obj)


@dataclass(frozen=True)
class SelectConfig:
    public_path: str = None
    client_path: str = None
    out_path: str = "selection.json"
    client_index: int = 0
    pool_n: int = DEFAULT_POOL_N
    m: int = DEFAULT_PROXY_M
    method: str = "dpp"
    normalize_inputs: bool = True
    relevance_lr: float = 0.1
    relevance_epochs: int = 500
    seed: int = 0


@dataclass(frozen=True)
class SimulateConfig:
    num_domains: int = 3
    tokens_per_sequence: int = 4
    sequences_per_domain: int = 100
    dimension: int = 16
    intra_cluster_stddev: float = 0.8
    collision_overlap: float = 0.55
    pool_n: int = 60
    proxy_m: int = 15
    top_k: int = 1
    lambda_pinned: bool = False
    router_init: str = "domain_aware"
    relevance_lr: float = 0.5
    relevance_epochs: int = 300
    hidden_dim: int = 32
    learning_rate: float = 0.2
    moe_learning_rate: float = 0.05
    seed_epochs: int = 50
    expert_epochs: int = 110
    moe_epochs: int = 40
    batch_size: int = 16
    selection_method: str = "dpp"
    proxy_mix: str = "union"
    out_path: str = "report.json"
    seed: int = 0


@dataclass(frozen=True)
class PrivacyConfig:
    private_path: str = None
    proxy_path: str = None
    candidates_path: str = None   # defaults to private + proxy vectors
    out_path: str = "privacy.json"
    seed: int = 0


@dataclass(frozen=True)
class BenchConfig:
    n: int = DEFAULT_POOL_N
    m_values: tuple = (200, 400, DEFAULT_PROXY_M)
    dimension: int = 512
    repeats: int = 1
    out_path: str = "bench.json"
    seed: int = 0


@dataclass(frozen=True)
class ProjectConfig:
    public_path: str = None
    selection_path: str = None
    private_path: str = None
    out_path: str = "projection.csv"
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = None   # master seed; overrides every section seed when set
    select: SelectConfig = SelectConfig()
    simulate: SimulateConfig = SimulateConfig()
    privacy: PrivacyConfig = PrivacyConfig()
    bench: BenchConfig = BenchConfig()
    project: ProjectConfig = ProjectConfig()

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ParseError("config root must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ParseError(f"unknown config keys: {unknown}")
        sections = {}
        for name, section_cls in (("select", SelectConfig),
                                  ("simulate", SimulateConfig),
                                  ("privacy", PrivacyConfig),
                                  ("bench", BenchConfig),
                                  ("project", ProjectConfig)):
            if name in obj:
                sections[name] = _from_dict(section_cls, obj[name], name)
        seed = obj.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ParseError("'seed' must be an integer")
        cfg = cls(seed=seed, **sections)
        if seed is not None:
            cfg = cfg.with_master_seed(seed)
        return cfg

    def with_master_seed(self, seed):
        from dataclasses import replace

        return RunConfig(
            seed=seed,
            select=replace(self.select, seed=seed),
            simulate=replace(self.simulate, seed=seed),
            privacy=replace(self.privacy, seed=seed),
            bench=replace(self.bench, seed=seed),
            project=replace(self.project, seed=seed),
        )


def _load_config(path):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or 'cannot read config'}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}") from exc
    return RunConfig.from_dict(obj)


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(value, name, command):
    if value is None:
        raise InvalidSpec(f"'{name}' is required for the {command} command")
    return value


# -- commands -----------------------------------------------------------------

def cmd_select(cfg):
    c = cfg.select
    public = load_embeddings(_require(c.public_path, "public_path", "select"))
    client = load_embeddings(_require(c.client_path, "client_path", "select"),
                             role="private")
    public_samples = collapse_sequences(public)
    client_samples = collapse_sequences(client)
    start = time.perf_counter()
    sel, _ = select_proxies(public_samples, client_samples, c.method,
                            c.pool_n, c.m, c.relevance_lr, c.relevance_epochs,
                            c.seed, client=c.client_index)
    sel.wall_ms = (time.perf_counter() - start) * 1e3
    payload = sel.to_json()
    payload["config_echo"] = asdict(c)
    _write_json(payload, c.out_path)
    return payload


def cmd_simulate(cfg):
    c = cfg.simulate
    spec = DomainSpec(num_domains=c.num_domains,
                      tokens_per_sequence=c.tokens_per_sequence,
                      sequences_per_domain=c.sequences_per_domain,
                      dimension=c.dimension,
                      intra_cluster_stddev=c.intra_cluster_stddev,
                      collision_overlap=c.collision_overlap,
                      seed=c.seed)
    pipe = PipelineConfig(pool_n=c.pool_n, proxy_m=c.proxy_m, top_k=c.top_k,
                          lambda_pinned=c.lambda_pinned,
                          router_init=c.router_init,
                          relevance_lr=c.relevance_lr,
                          relevance_epochs=c.relevance_epochs,
                          hidden_dim=c.hidden_dim,
                          learning_rate=c.learning_rate,
                          moe_learning_rate=c.moe_learning_rate,
                          seed_epochs=c.seed_epochs,
                          expert_epochs=c.expert_epochs,
                          moe_epochs=c.moe_epochs,
                          batch_size=c.batch_size, seed=c.seed)
    report = run_pipeline(spec, selection_method=c.selection_method,
                          proxy_mix=c.proxy_mix, cfg=pipe)
    payload = report.to_json()
    payload["config_echo"] = asdict(c)
    _write_json(payload, c.out_path)
    return payload


def cmd_privacy_report(cfg):
    c = cfg.privacy
    private = load_embeddings(_require(c.private_path, "private_path",
                                       "privacy-report"), role="private")
    proxy = load_embeddings(_require(c.proxy_path, "proxy_path",
                                     "privacy-report"), role="proxy")
    if c.candidates_path is not None:
        candidates = load_embeddings(c.candidates_path).vectors()
    else:
        candidates = np.vstack([private.vectors(), proxy.vectors()])
    report = empirical_sensitivity(private.vectors(), proxy.vectors(),
                                   candidates)
    payload = report.to_json()
    payload["config_echo"] = asdict(c)
    _write_json(payload, c.out_path)
    return payload


def _bench_kernel(c):
    from .data import EmbeddingRecord, EmbeddingSet

    rng = rng_for(c.seed, 301)
    X = rng.standard_normal((c.n, c.dimension))
    width = len(str(c.n - 1))
    pool = EmbeddingSet([
        EmbeddingRecord(id=f"{i:0{width}d}", vector=v) for i, v in enumerate(X)
    ])
    base = build_kernel(pool, KernelConfig())
    relevance = rng.uniform(0.2, 1.0, size=c.n)
    return weight_kernel(base, relevance, pool_ids=pool.ids,
                         features=normalized_rows(pool))


def cmd_bench(cfg):
    c = cfg.bench
    kernel = _bench_kernel(c)
    greedy_map(kernel, int(min(c.m_values)))  # warm caches and BLAS pools
    # repeats are interleaved so bursty machine noise hits every m equally;
    # scaling ratios are medians of per-repeat (adjacent) ratios, which
    # cancels noise that is correlated in time
    samples = {int(m): [] for m in c.m_values}
    for _ in range(max(c.repeats, 1)):
        for m in c.m_values:
            start = time.perf_counter()
            greedy_map(kernel, int(m))
            samples[int(m)].append((time.perf_counter() - start) * 1e3)
    timings = [{"m": m, "wall_ms": min(walls), "per_step_ms": min(walls) / m}
               for m, walls in samples.items()]
    ratios = {}
    for hi in samples:
        for lo in samples:
            if hi == 2 * lo:
                per_repeat = [a / b for a, b in zip(samples[hi], samples[lo])]
                ratios[f"{hi}/{lo}"] = float(np.median(per_repeat))
    payload = {"n": c.n, "dimension": c.dimension, "timings": timings,
               "ratios": ratios, "config_echo": asdict(c)}
    payload["config_echo"]["m_values"] = list(c.m_values)
    _write_json(payload, c.out_path)
    return payload


def cmd_project(cfg):
    c = cfg.project
    public = load_embeddings(_require(c.public_path, "public_path", "project"))
    pool = collapse_sequences(public)
    selected = set()
    if c.selection_path is not None:
        try:
            with open(c.selection_path, encoding="utf-8") as fh:
                selected = set(json.load(fh)["selected_ids"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise ParseError(f"{c.selection_path}: not a selection JSON "
                             f"({exc})") from exc
    rows = []
    if c.private_path is not None:
        private = collapse_sequences(load_embeddings(c.private_path,
                                                     role="private"))
        basis = np.vstack([pool.vectors(), private.vectors()])
        proj_pool = pca_project_2d(pool, basis_vectors=basis)
        proj_priv = pca_project_2d(private, basis_vectors=basis)
        for rec_id, x, y in proj_priv.points:
            rows.append((rec_id, x, y, "private"))
    else:
        proj_pool = pca_project_2d(pool)
    for rec_id, x, y in proj_pool.points:
        marker = "selected" if rec_id in selected else "pool"
        rows.append((rec_id, x, y, marker))
    with open(c.out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "marker"])
        for row in rows:
            writer.writerow(row)
    return {"rows": len(rows),
            "retained_variance": proj_pool.retained_variance}


_COMMANDS = {
    "select": cmd_select,
    "simulate": cmd_simulate,
    "privacy-report": cmd_privacy_report,
    "bench": cmd_bench,
    "project": cmd_project,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="proxymoe",
        description="Privacy-preserving MoE unification toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--out", default=None, help="output path override")
        p.add_argument("--seed", type=int, default=None,
                       help="override every nested seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_master_seed(args.seed)
        if args.out is not None:
            from dataclasses import replace

            key = {"select": "select", "simulate": "simulate",
                   "privacy-report": "privacy", "bench": "bench",
                   "project": "project"}[args.command]
            cfg = replace(cfg, **{key: replace(getattr(cfg, key),
                                               out_path=args.out)})
        _COMMANDS[args.command](cfg)
    except InputError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ProxymoeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
