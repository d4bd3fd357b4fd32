"""Experiment config, world construction, training, evaluation, ablations and sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from billp._toml import load_toml, loads_toml
from billp.agent import VARIANTS, AgentConfig, BiLLPAgent, EpisodeTrace, write_traces
from billp.catalog import (
    DatasetManifest,
    DatasetSplit,
    ItemCatalog,
    distance_percentile,
    load_snapshot,
    prepare,
    save_snapshot,
    train_scorer,
    user_sequences,
    write_split_index,
)
from billp.env import EnvConfig, RecEnv
from billp.gateway import AuditLog, ChatBackend, LocalServerBackend, OpenAIBackend, StubBackend, StubScript, mix_seed
from billp.harness.metrics import MetricsReport, aggregate, episode_metrics
from billp.memory import Memories

log = logging.getLogger(__name__)

CONFIG_VERSION = 1


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "stub"  # stub | openai | local
    script: str | None = None
    model: str = "gpt-3.5-turbo-16k"
    base_url: str | None = None
    api_key_env: str = "OPENAI_API_KEY"
    max_attempts: int = 5
    context_limit: int | None = 16_384
    requests_per_second: float | None = None
    max_concurrency: int = 4


@dataclass(frozen=True)
class ScorerConfig:
    dim: int = 16
    epochs: int = 50
    lr: float = 0.05
    reg: float = 0.01
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: Path
    workdir: Path
    env: EnvConfig = EnvConfig()
    beta_percentile: float | None = None
    agent: AgentConfig = AgentConfig()
    backend: BackendConfig = BackendConfig()
    scorer: ScorerConfig = ScorerConfig()
    train_episodes: int = 100
    eval_episodes: int = 100
    seeds: int = 3
    workers: int = 1

    def __post_init__(self):
        for name in ("eval_episodes", "seeds", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.train_episodes < 0:
            raise ConfigError("train_episodes must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["manifest"] = str(self.manifest)
        d["workdir"] = str(self.workdir)
        return d

    def hash(self) -> str:
        """Identity of the experiment; the output location is not part of it."""
        d = self.to_dict()
        d.pop("workdir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {"env": EnvConfig, "agent": AgentConfig, "backend": BackendConfig, "scorer": ScorerConfig}


def _build(cls, raw: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value`` with a TOML-literal value (bare words become strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    try:
        parsed = loads_toml(f"v = {value}")["v"]
    except Exception:
        parsed = value
    return key.strip().split("."), parsed


def config_from_dict(raw: dict, base_dir: Path) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    data = raw.pop("data", {})
    if "manifest" not in data:
        raise ConfigError("[data] manifest is required")
    exp = raw.pop("experiment", {})
    sections = {k: raw.pop(k, {}) for k in _SECTIONS}
    workdir = raw.pop("workdir", "runs")
    if raw:
        raise ConfigError(f"unknown top-level key(s): {sorted(raw)}")

    def resolve(p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else (base_dir / path)

    beta_pct = sections["env"].pop("beta_percentile", None)
    backend = dict(sections["backend"])
    if backend.get("script"):
        backend["script"] = str(resolve(backend["script"]))
    allowed = {"train_episodes", "eval_episodes", "seeds", "workers"}
    if set(exp) - allowed:
        raise ConfigError(f"[experiment] unknown key(s): {sorted(set(exp) - allowed)}")
    try:
        return ExperimentConfig(
            manifest=resolve(data["manifest"]),
            workdir=resolve(workdir),
            env=_build(EnvConfig, sections["env"], "env"),
            beta_percentile=beta_pct,
            agent=_build(AgentConfig, sections["agent"], "agent"),
            backend=_build(BackendConfig, backend, "backend"),
            scorer=_build(ScorerConfig, sections["scorer"], "scorer"),
            **exp,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = load_toml(path)
    except Exception as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for ov in overrides:
        keys, value = parse_override(ov)
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return config_from_dict(raw, path.parent)


# ---------------------------------------------------------------------------
# world


@dataclass
class World:
    catalog: ItemCatalog
    split: DatasetSplit
    train_env: RecEnv
    test_env: RecEnv
    n_malformed: int = 0

    def env(self, split: str) -> RecEnv:
        return self.train_env if split == "train" else self.test_env


def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.workdir / "data"


def ingest(cfg: ExperimentConfig) -> dict:
    manifest = DatasetManifest.from_file(cfg.manifest)
    prep = prepare(manifest)
    d = data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    write_split_index(d / "split.json", prep.split)
    summary = {
        "records": len(prep.log.records),
        "malformed": prep.log.n_malformed,
        "filtered": len(prep.filtered),
        "train": len(prep.split.train),
        "test": len(prep.split.test),
        "items": len(prep.catalog),
        "users": len({r.user_id for r in prep.filtered}),
    }
    (d / "ingest.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def train_scorers(cfg: ExperimentConfig, force: bool = False) -> dict[str, Path]:
    prep = prepare(DatasetManifest.from_file(cfg.manifest))
    d = data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    for part in ("train", "test"):
        path = d / f"scorer_{part}.npz"
        if force or not path.is_file():
            sc = cfg.scorer
            scorer = train_scorer(
                getattr(prep.split, part), dim=sc.dim, epochs=sc.epochs, lr=sc.lr,
                reg=sc.reg, seed=sc.seed, batch_size=sc.batch_size,
            )
            save_snapshot(path, prep.catalog, scorer)
        out[part] = path
    return out


def build_world(cfg: ExperimentConfig) -> World:
    """Load (or train and cache) both environments described by the config."""
    manifest = DatasetManifest.from_file(cfg.manifest)
    prep = prepare(manifest)
    paths = train_scorers(cfg)
    warm = user_sequences(prep.split.train)
    envs = {}
    for part in ("train", "test"):
        _, scorer = load_snapshot(paths[part])
        cat = prep.catalog.with_embeddings(scorer)
        env_cfg = replace(cfg.env, split=part)
        if cfg.beta_percentile is not None:
            env_cfg = replace(env_cfg, beta=distance_percentile(cat, cfg.beta_percentile))
        envs[part] = RecEnv(cat, scorer, warm, env_cfg)
    return World(prep.catalog, prep.split, envs["train"], envs["test"], prep.log.n_malformed)


def make_backend(bc: BackendConfig, seed: int, audit: AuditLog | None = None) -> ChatBackend:
    if bc.kind == "stub":
        if bc.script:
            script = StubScript.from_file(bc.script)
        else:
            from billp.toy import default_stub_script

            script = default_stub_script()
        return StubBackend(script, seed=seed, audit=audit)
    common = dict(
        model=bc.model, api_key_env=bc.api_key_env, max_attempts=bc.max_attempts,
        context_limit=bc.context_limit, requests_per_second=bc.requests_per_second,
        max_concurrency=bc.max_concurrency, audit=audit,
    )
    if bc.kind == "openai":
        return OpenAIBackend(bc.base_url or "https://api.openai.com/v1", **common)
    if bc.kind == "local":
        return LocalServerBackend(bc.base_url or "http://127.0.0.1:8000/v1", **common)
    raise ConfigError(f"unknown backend kind {bc.kind!r}")


def sample_users(env: RecEnv, n: int, seed: int, min_warm: int) -> list[str]:
    users = env.users(min_warm)
    if not users:
        raise ConfigError(f"no user in the {env.config.split} environment has {min_warm} warm-start items")
    rng = np.random.default_rng(seed)
    return [users[int(k)] for k in rng.integers(len(users), size=n)]


# ---------------------------------------------------------------------------
# training / evaluation


@dataclass
class TrainResult:
    memories: Memories
    traces: list[EpisodeTrace]
    snapshot_dir: Path
    audit: AuditLog
    writes: dict[str, int] = field(default_factory=dict)


def train(
    cfg: ExperimentConfig,
    seed: int,
    out_dir: str | Path | None = None,
    world: World | None = None,
    backend: ChatBackend | None = None,
) -> TrainResult:
    """Run training episodes sequentially on the train environment, writing memories."""
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir else cfg.workdir / "train"
    out.mkdir(parents=True, exist_ok=True)
    audit = AuditLog(out / "audit_train.jsonl")
    if backend is None:
        backend = make_backend(cfg.backend, seed, audit)
    else:
        backend.audit = audit
    env = world.train_env
    memories = Memories.empty()
    agent = BiLLPAgent(backend, world.catalog, memories, cfg.agent, v_max=env.config.max_rounds * 5.0)
    traces = []
    users = sample_users(env, cfg.train_episodes, mix_seed(seed, "train-users"), cfg.agent.warm_start_len) if cfg.train_episodes else []
    for k, user in enumerate(users):
        trace = agent.run_episode(env, user, seed=mix_seed(seed, "train", k), episode_id=f"train-{k}")
        traces.append(trace)
    snap = out / "memory"
    memories.save(snap)
    write_traces(out / "train_traces.jsonl", traces)
    writes = memories.writes()
    (out / "train_summary.json").write_text(
        json.dumps(
            {
                "policy": cfg.agent.label,
                "seed": seed,
                "config_hash": cfg.hash(),
                "episodes": len(traces),
                "aborted": sum(t.aborted for t in traces),
                "memory_writes": writes,
                "memory_digests": memories.digests(),
                "llm_calls": audit.counts(),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return TrainResult(memories, traces, snap, audit, writes)


def load_memories(snapshot_dir: str | Path | None) -> Memories:
    if snapshot_dir is None or not (Path(snapshot_dir) / "planner.mem").is_file():
        log.warning("no memory snapshot at %s; evaluating with EMPTY memories (cold start)", snapshot_dir)
        return Memories.empty()
    return Memories.load(snapshot_dir)


def evaluate(
    cfg: ExperimentConfig,
    snapshot_dir: str | Path | None,
    seed: int,
    out_dir: str | Path | None = None,
    world: World | None = None,
    backend: ChatBackend | None = None,
    split: str = "test",
    label: str | None = None,
) -> tuple[MetricsReport, list[EpisodeTrace]]:
    """Frozen-memory evaluation over ``cfg.seeds`` seeds (seed, seed+1, ...)."""
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir else cfg.workdir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    env = world.env(split)
    label = label or cfg.agent.label
    audit = AuditLog(out / "audit_eval.jsonl")
    all_traces: list[EpisodeTrace] = []
    per_seed = []
    seeds = [seed + s for s in range(cfg.seeds)]
    memories = load_memories(snapshot_dir)
    before = memories.digests()
    for s in seeds:
        if backend is None:
            be = make_backend(cfg.backend, s, audit)
        else:
            be = backend.fork(s)
            be.audit = audit
        agent = BiLLPAgent(be, world.catalog, memories, replace(cfg.agent, label=label), frozen=True)
        users = sample_users(env, cfg.eval_episodes, mix_seed(s, "eval-users"), cfg.agent.warm_start_len)
        jobs = [(user, mix_seed(s, "eval", k), f"eval-s{s}-{k}") for k, user in enumerate(users)]

        def run(job):
            user, ep_seed, ep_id = job
            return agent.run_episode(env, user, seed=ep_seed, episode_id=ep_id)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                traces = list(pool.map(run, jobs))
        else:
            traces = [run(j) for j in jobs]
        all_traces.extend(traces)
        per_seed.append([episode_metrics(t) for t in traces if not t.aborted and t.steps])
    if memories.digests() != before:
        raise RuntimeError("evaluation modified the memories")
    report = aggregate(per_seed, seeds=seeds, label=label)
    report.config_hash = cfg.hash()
    report.n_aborted = sum(t.aborted for t in all_traces)
    report.extra = {"split": split, "llm_calls": audit.counts(), "memory_sizes": {k: len(getattr(memories, k)) for k in ("planner", "actor", "critic")}}
    slug = slugify(label)
    (out / f"report_{slug}.json").write_text(report.to_json())
    (out / f"report_{slug}.txt").write_text(report.table() + "\n")
    write_traces(out / f"eval_traces_{slug}.jsonl", all_traces)
    return report, all_traces


def slugify(label: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in label.lower()).strip("_") or "policy"


def ablate(cfg: ExperimentConfig, seed: int, out_dir: str | Path | None = None, world: World | None = None) -> dict[str, dict]:
    """Train and evaluate BiLLP, w/o Macro, w/o Micro and ActOnly on the same world."""
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir else cfg.workdir / "ablate"
    results = {}
    for name in VARIANTS:
        vcfg = replace(cfg, agent=cfg.agent.variant(name))
        d = out / slugify(name)
        tr = train(vcfg, seed, d / "train", world)
        report, _ = evaluate(vcfg, tr.snapshot_dir, seed, d / "eval", world, label=name)
        results[name] = {
            "report": report,
            "train_writes": tr.writes,
            "train_llm_calls": tr.audit.counts(),
        }
    summary = {
        name: {
            "len": [r["report"].len_mean, r["report"].len_std],
            "r_each": [r["report"].r_each_mean, r["report"].r_each_std],
            "r_traj": [r["report"].r_traj_mean, r["report"].r_traj_std],
            "train_memory_writes": r["train_writes"],
            "train_llm_calls": r["train_llm_calls"],
        }
        for name, r in results.items()
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return results


def sweep_window(
    cfg: ExperimentConfig,
    snapshot_dir: str | Path | None,
    windows: Sequence[int],
    seed: int,
    out_dir: str | Path | None = None,
    world: World | None = None,
    backend: ChatBackend | None = None,
) -> dict[int, MetricsReport]:
    """Evaluate the same memories under each quit-window size."""
    if not windows:
        raise ValueError("need at least one window size")
    world = world or build_world(cfg)
    out = Path(out_dir) if out_dir else cfg.workdir / "sweep"
    results = {}
    for w in windows:
        wcfg = replace(cfg, env=replace(cfg.env, window=w))
        wworld = replace(
            world,
            train_env=world.train_env.with_config(window=w),
            test_env=world.test_env.with_config(window=w),
        )
        report, _ = evaluate(wcfg, snapshot_dir, seed, out / f"W{w}", wworld, backend)
        results[w] = report
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep_summary.json").write_text(
        json.dumps({str(w): {"len": r.len_mean, "r_each": r.r_each_mean, "r_traj": r.r_traj_mean} for w, r in results.items()}, indent=2, sort_keys=True)
    )
    return results
