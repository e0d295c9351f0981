"""Declarative experiment runner behind the CLI subcommands.

One ExperimentConfig describes a full study: the task and its harder
variant, the model, training, the inference step grid, dataset sizes, and
the seed list. Commands are pure functions of (config, disk state):

  cmd_gen     write train/test/harder dataset files
  cmd_train   train one model per seed, checkpoints + loss CSV
  cmd_eval    solve every split at every T, report JSON + CSV
  cmd_ablate  4-row mechanism ladder with shared seeds
  cmd_plot_traces  export per-landscape energy curves (optional PNG)

Every artifact embeds the config hash; wall-clock timings are written to a
separate sidecar so the main reports are byte-reproducible.
"""
from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from ebsolve import checkpoint as ck
from ebsolve import tasks as tk
from ebsolve import training as tr
from ebsolve.inference import SolveConfig, anneal_solve, discretize
from ebsolve.models import ModelSpec, build_model
from ebsolve.schedule import NoiseSchedule, make_cosine_schedule
from ebsolve.util import atomic_write_text, canonical_json, config_hash

OUTPUT_ENV = "EBSOLVE_OUT"
CONFIG_FORMAT = "ebsolve-config-v1"
REPORT_FORMAT = "ebsolve-report-v1"
ABLATION_FORMAT = "ebsolve-ablation-v1"
TRACES_FORMAT = "ebsolve-traces-v1"

SPLITS = (("train", "standard"), ("test", "standard"), ("harder", "harder"))
DIFFICULTIES = ("standard", "harder")

# order-indexed givens ranges: (standard, harder)
SUDOKU_GIVENS = {2: ((8, 12), (5, 8)), 3: ((31, 42), (17, 34))}

# per-arch (width, depth, train batch size) sized for single-core runs
ARCH_DEFAULTS = {"mlp": (128, 3, 128), "board": (64, 2, 16),
                 "edge_relational": (64, 2, 8), "plan_relational": (64, 2, 8)}


def default_negative(kind: tk.TaskKind) -> tr.NegativeSpec:
    """The negative-mining recipe matching a task's output encoding."""
    if kind.discrete:
        if kind.group_size:
            return tr.NegativeSpec("onehot", kind.group_size)
        return tr.NegativeSpec("binary")
    return tr.NegativeSpec("continuous")


def default_model_spec(task: tk.TaskKind, arch: str | None = None,
                       width: int | None = None, depth: int | None = None,
                       levels: int = 10) -> ModelSpec:
    arch = arch or task.default_arch
    dw, dd, _ = ARCH_DEFAULTS[arch]
    return ModelSpec(arch=arch, x_dim=task.x_dim, y_dim=task.y_dim,
                     width=width or dw, depth=depth or dd, levels=levels,
                     extras=model_extras(arch, task))


def model_extras(arch: str, task: tk.TaskKind) -> dict:
    """Architecture side data the ModelSpec dims alone cannot carry."""
    if arch == "board":
        return {"order": task.order}
    if arch == "plan_relational":
        return {"n_nodes": task.n, "l2_head": 1}
    if arch == "edge_relational":
        # dense per-row heads; the max-pool head starves per-entry gradients
        # at this scale (stuck near 85% per-entry accuracy, train == test)
        return {"l2_head": 1}
    return {}


@dataclass(frozen=True)
class AblationFlags:
    """Which mechanisms are enabled for one run."""

    gradient_descent: bool = True   # False: ancestral noisy updates instead
    refinement: bool = True         # False: a single step per landscape
    contrastive: bool = True        # False: train without the contrastive term

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# the 4-row ladder, weakest mechanism set first
ABLATION_LADDER = (
    ("noisy", AblationFlags(False, False, False)),
    ("gradient_descent", AblationFlags(True, False, False)),
    ("refinement", AblationFlags(True, True, False)),
    ("contrastive", AblationFlags(True, True, True)),
)


@dataclass(frozen=True)
class ExperimentConfig:
    task: tk.TaskKind
    model: ModelSpec
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    solve: SolveConfig = field(default_factory=SolveConfig)
    t_grid: tuple[int, ...] = (10,)
    train_count: int = 2000
    test_count: int = 100
    harder_count: int = 100
    seeds: tuple[int, ...] = (0,)
    outdir: str = "run"
    checkpoint_interval: int = 0    # 0: final checkpoint only
    eval_chunk: int = 32

    def __post_init__(self):
        object.__setattr__(self, "t_grid", tuple(int(t) for t in self.t_grid))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.t_grid or any(t < 0 for t in self.t_grid):
            raise ValueError("t_grid must be non-empty with T >= 0")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.train_count < 1 or self.test_count < 0 or self.harder_count < 0:
            raise ValueError("dataset counts must be positive (train) / >= 0")
        if self.checkpoint_interval < 0 or self.eval_chunk < 1:
            raise ValueError("checkpoint_interval >= 0 and eval_chunk >= 1")
        if (self.model.x_dim, self.model.y_dim) != (self.task.x_dim,
                                                    self.task.y_dim):
            raise ValueError(
                f"model dims ({self.model.x_dim}, {self.model.y_dim}) do not "
                f"match task dims ({self.task.x_dim}, {self.task.y_dim})")
        if (split_kind(self.task, "harder") != self.task
                and self.model.arch not in ("edge_relational",
                                            "plan_relational")):
            raise ValueError(f"harder split of {self.task.name} changes "
                             f"sizes; arch {self.model.arch!r} cannot follow")

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "train": _train_to_dict(self.train),
            "solve": _solve_to_dict(self.solve),
            "t_grid": list(self.t_grid),
            "train_count": self.train_count,
            "test_count": self.test_count,
            "harder_count": self.harder_count,
            "seeds": list(self.seeds),
            "outdir": self.outdir,
            "checkpoint_interval": self.checkpoint_interval,
            "eval_chunk": self.eval_chunk,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = _checked_keys("config", d, {f.name for f in
                                        dataclasses.fields(cls)})
        return cls(task=tk.TaskKind.from_dict(d["task"]),
                   model=ModelSpec.from_dict(d["model"]),
                   train=_train_from_dict(d.get("train", {})),
                   solve=_solve_from_dict(d.get("solve", {})),
                   t_grid=tuple(d.get("t_grid", (10,))),
                   train_count=d.get("train_count", 2000),
                   test_count=d.get("test_count", 100),
                   harder_count=d.get("harder_count", 100),
                   seeds=tuple(d.get("seeds", (0,))),
                   outdir=d.get("outdir", "run"),
                   checkpoint_interval=d.get("checkpoint_interval", 0),
                   eval_chunk=d.get("eval_chunk", 32))


def _checked_keys(section: str, d: dict, allowed: set) -> dict:
    unknown = set(d) - allowed
    if unknown:
        raise ValueError(f"unknown {section} keys: {sorted(unknown)}")
    return d


def _train_to_dict(cfg: tr.TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["negative"] = dataclasses.asdict(cfg.negative)
    return d


def _train_from_dict(d: dict) -> tr.TrainConfig:
    d = dict(_checked_keys("train", d, {f.name for f in
                                        dataclasses.fields(tr.TrainConfig)}))
    if "negative" in d:
        nd = _checked_keys("negative", d["negative"],
                           {f.name for f in
                            dataclasses.fields(tr.NegativeSpec)})
        d["negative"] = tr.NegativeSpec(**nd)
    return tr.TrainConfig(**d)


def _solve_to_dict(cfg: SolveConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["step_sizes"] = (None if cfg.step_sizes is None
                       else list(cfg.step_sizes))
    return d


def _solve_from_dict(d: dict) -> SolveConfig:
    d = dict(_checked_keys("solve", d, {f.name for f in
                                        dataclasses.fields(SolveConfig)}))
    if d.get("step_sizes") is not None:
        d["step_sizes"] = tuple(d["step_sizes"])
    return SolveConfig(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def experiment_hash(cfg: ExperimentConfig) -> str:
    return config_hash(cfg.to_dict())


# ---------------------------------------------------------------------------
# difficulty ladder

def split_kind(task: tk.TaskKind, difficulty: str) -> tk.TaskKind:
    """The TaskKind evaluated at a difficulty; graphs grow when harder."""
    if difficulty == "harder":
        if task.name == "connectivity":
            return tk.TaskKind("connectivity", n=harder_nodes(task.n))
        if task.name == "shortest_path":
            n = harder_nodes(task.n)
            return tk.TaskKind("shortest_path", n=n, horizon=n)
    return task


def harder_nodes(n: int) -> int:
    return max(n + 1, round(n * 1.5))


def generate_split(task: tk.TaskKind, difficulty: str, count: int,
                   seed: int) -> list[tk.ProblemInstance]:
    """Dispatch to the task generators with the difficulty's parameters."""
    harder = difficulty == "harder"
    kind = split_kind(task, difficulty)
    if task.name == "addition":
        return tk.gen_addition(kind.n, 2.0 if harder else 1.0, count, seed,
                               difficulty)
    if task.name == "completion":
        return tk.gen_completion(kind.n, kind.rank, 0.5,
                                 2.25 if harder else 1.0, count, seed,
                                 difficulty)
    if task.name == "inverse":
        return tk.gen_inverse(kind.n, 16.0 if harder else 4.0, count, seed,
                              difficulty)
    if task.name == "sudoku":
        givens = SUDOKU_GIVENS[kind.order][1 if harder else 0]
        return tk.gen_sudoku(kind.order, givens, count, seed, difficulty)
    if task.name == "connectivity":
        return tk.gen_connectivity(kind.n, count, seed, difficulty)
    if task.name == "shortest_path":
        return tk.gen_shortest_path(kind.n, kind.horizon, count, seed,
                                    difficulty)
    raise ValueError(f"no generator for task {task.name!r}")


def dataset_seed(seed: int, split: str) -> int:
    offsets = {"train": 0, "test": 1, "harder": 2}
    return seed * 1000003 + offsets[split]


# ---------------------------------------------------------------------------
# paths

def resolve_outdir(outdir: str) -> str:
    root = os.environ.get(OUTPUT_ENV, "")
    if root and not os.path.isabs(outdir):
        return os.path.join(root, outdir)
    return outdir


def dataset_path(out: str, task: tk.TaskKind, split: str, seed: int) -> str:
    return os.path.join(out, "datasets", f"{task.name}-{split}-s{seed}.jsonl")


def checkpoint_path(out: str, task: tk.TaskKind, seed: int,
                    variant: str = "", tag: str = "final") -> str:
    v = f"-{variant}" if variant else ""
    return os.path.join(out, "checkpoints",
                        f"{task.name}-s{seed}{v}-{tag}.ckpt")


def loss_csv_path(out: str, task: tk.TaskKind, seed: int,
                  variant: str = "") -> str:
    v = f"-{variant}" if variant else ""
    return os.path.join(out, f"loss-{task.name}-s{seed}{v}.csv")


def record_config(cfg: ExperimentConfig) -> str:
    """Write config.json once; reject reuse of the dir by another config."""
    out = resolve_outdir(cfg.outdir)
    h = experiment_hash(cfg)
    path = os.path.join(out, "config.json")
    doc = {"format": CONFIG_FORMAT, "hash": h, "config": cfg.to_dict()}
    if os.path.exists(path):
        with open(path) as fh:
            stored = json.load(fh)
        if stored.get("hash") != h:
            raise ValueError(f"{path} holds a different config "
                             f"(hash {stored.get('hash')!r} != {h!r})")
    else:
        atomic_write_text(path, canonical_json(doc) + "\n")
    return h


# ---------------------------------------------------------------------------
# gen

def cmd_gen(cfg: ExperimentConfig) -> dict:
    h = record_config(cfg)
    out = resolve_outdir(cfg.outdir)
    counts = {"train": cfg.train_count, "test": cfg.test_count,
              "harder": cfg.harder_count}
    files = []
    for seed in cfg.seeds:
        for split, difficulty in SPLITS:
            insts = generate_split(cfg.task, difficulty, counts[split],
                                   dataset_seed(seed, split))
            path = dataset_path(out, cfg.task, split, seed)
            tk.save_instances(path, split_kind(cfg.task, difficulty), insts)
            files.append(path)
    return {"config_hash": h, "files": files}


def _load_split(cfg: ExperimentConfig, split: str, seed: int):
    out = resolve_outdir(cfg.outdir)
    path = dataset_path(out, cfg.task, split, seed)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset {path} missing; run gen first")
    return tk.load_instances(path)


# ---------------------------------------------------------------------------
# train

def train_one(cfg: ExperimentConfig, seed: int,
              train_cfg: tr.TrainConfig | None = None, variant: str = "",
              resume_from: str | None = None) -> str:
    """Train one model; returns the final checkpoint path.

    On divergence the last finite state is still checkpointed before the
    error propagates. `resume_from` continues a run from a checkpoint of
    the same config (hash-checked through config.json + RNG digest).
    """
    record_config(cfg)
    out = resolve_outdir(cfg.outdir)
    tcfg = replace(train_cfg if train_cfg is not None else cfg.train,
                   seed=seed)
    _, insts = _load_split(cfg, "train", seed)
    X, Y = tk.stack_xy(insts)
    sched = make_cosine_schedule(cfg.model.levels)
    start = 0
    if resume_from is None:
        model = build_model(cfg.model, seed=seed)
        state = tr.AdamState.init(model)
    else:
        ckpt = ck.load_checkpoint(resume_from)
        if ckpt.spec != cfg.model:
            raise ValueError("resume checkpoint spec does not match config")
        if ckpt.rng_digest != ck.training_rng_digest(seed, ckpt.iteration):
            raise ValueError("resume checkpoint RNG digest mismatch: "
                             "different seed or iteration counter")
        model, sched = ck.restore_model(ckpt)
        state = ck.restore_adam(ckpt, model)
        start = ckpt.iteration

    final_path = checkpoint_path(out, cfg.task, seed, variant)
    csv_path = loss_csv_path(out, cfg.task, seed, variant)
    prior_lines: list[str] = []
    if start > 0 and os.path.exists(csv_path):
        with open(csv_path) as fh:
            for line in fh.read().splitlines()[1:]:
                if line and int(line.split(",", 1)[0]) < start:
                    prior_lines.append(line)
    rows: list[tuple[int, float, float, float]] = []

    def callback(it, mdl, st, history):
        rows[:] = history
        done = it + 1
        if (cfg.checkpoint_interval and done % cfg.checkpoint_interval == 0
                and done < tcfg.iterations):
            ck.save_checkpoint(
                checkpoint_path(out, cfg.task, seed, variant, f"i{done}"),
                ck.from_training(mdl, sched, done, seed, adam=st))

    diverged = None
    try:
        tr.train(model, X, Y, sched, tcfg, state=state,
                 start_iteration=start, callback=callback)
        iteration = tcfg.iterations
    except tr.TrainingDiverged as exc:
        diverged = exc
        iteration = exc.iteration

    ck.save_checkpoint(final_path,
                       ck.from_training(model, sched, iteration, seed,
                                        adam=state))
    _write_loss_csv(csv_path, rows, prior_lines)
    if diverged is not None:
        raise diverged
    return final_path


def _write_loss_csv(path: str, rows, prior_lines=()) -> None:
    lines = ["iteration,loss_mse,loss_contrast", *prior_lines]
    for it, _total, mse, con in rows:
        lines.append(f"{it},{mse!r},{con!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_train(cfg: ExperimentConfig,
              resume_from: str | None = None) -> dict:
    h = record_config(cfg)
    if resume_from is not None and len(cfg.seeds) != 1:
        raise ValueError("resume requires a single-seed config")
    paths = [train_one(cfg, seed,
                       resume_from=resume_from if len(cfg.seeds) == 1
                       else None)
             for seed in cfg.seeds]
    return {"config_hash": h, "checkpoints": paths}


# ---------------------------------------------------------------------------
# eval

def solve_instances(model, sched: NoiseSchedule, instances, solve_cfg,
                    chunk: int = 32) -> np.ndarray:
    """Batched annealed solving; chunking never changes the answers."""
    kind = instances[0].kind
    X, _ = tk.stack_xy(instances)
    preds = []
    for lo in range(0, X.shape[0], chunk):
        Y, _traces = anneal_solve(model, X[lo:lo + chunk], sched, solve_cfg,
                                  index_base=lo, y_dim=kind.y_dim)
        preds.append(Y)
    out = np.concatenate(preds, axis=0)
    if kind.discrete:
        out = discretize(out, kind.group_size)
    return out


def score_instances(instances, preds: np.ndarray) -> list[float]:
    return [tk.metric(inst.kind, preds[i], inst)
            for i, inst in enumerate(instances)]


@dataclass
class EvalReport:
    rows: list[dict]
    aggregates: list[dict]
    config_hash: str
    wall_clock: dict = field(default_factory=dict)

    def to_canonical(self) -> dict:
        return {"format": REPORT_FORMAT, "config_hash": self.config_hash,
                "rows": self.rows, "aggregates": self.aggregates}

    def to_csv(self) -> str:
        lines = ["difficulty,T,seed,count,metric,metric_graph"]
        for r in self.rows:
            extra = "" if r.get("metric_graph") is None else repr(
                r["metric_graph"])
            lines.append(f"{r['difficulty']},{r['T']},{r['seed']},"
                         f"{r['count']},{r['metric']!r},{extra}")
        return "\n".join(lines) + "\n"


def _difficulty_splits() -> list[tuple[str, str]]:
    return [("standard", "test"), ("harder", "harder")]


def evaluate_model(model, sched, instances, t_grid, solve_cfg,
                   chunk: int = 32):
    """Rows of (T, metric mean, per-instance scores) for one split."""
    rows = []
    for T in t_grid:
        scfg = replace(solve_cfg, steps=int(T))
        t0 = time.perf_counter()
        preds = solve_instances(model, sched, instances, scfg, chunk=chunk)
        dt = time.perf_counter() - t0
        scores = score_instances(instances, preds)
        rows.append((int(T), scores, dt))
    return rows


def cmd_eval(cfg: ExperimentConfig) -> EvalReport:
    h = record_config(cfg)
    out = resolve_outdir(cfg.outdir)
    models = {}
    for seed in cfg.seeds:
        ckpt = ck.load_checkpoint(checkpoint_path(out, cfg.task, seed))
        if ckpt.spec != cfg.model:
            raise ValueError("checkpoint spec does not match config")
        models[seed] = ck.restore_model(ckpt)
    rows = []
    clocks = {}
    for difficulty, split in _difficulty_splits():
        for T in cfg.t_grid:
            for seed in cfg.seeds:
                model, sched = models[seed]
                kind, insts = _load_split(cfg, split, seed)
                scfg = replace(cfg.solve, steps=int(T), seed=seed)
                t0 = time.perf_counter()
                preds = solve_instances(model, sched, insts, scfg,
                                        chunk=cfg.eval_chunk)
                clocks[f"{difficulty}/T{T}/s{seed}"] = (time.perf_counter()
                                                        - t0)
                scores = score_instances(insts, preds)
                row = {"difficulty": difficulty, "T": int(T),
                       "seed": int(seed), "count": len(insts),
                       "metric": float(np.mean(scores)),
                       "metric_graph": None}
                if cfg.task.name == "connectivity":
                    row["metric_graph"] = float(np.mean(
                        [tk.connectivity_graph_exact(preds[i], inst)
                         for i, inst in enumerate(insts)]))
                rows.append(row)
    report = EvalReport(rows=rows, aggregates=_aggregate(rows),
                        config_hash=h, wall_clock=clocks)
    _write_report(out, report)
    return report


def _aggregate(rows: list[dict]) -> list[dict]:
    out = []
    seen = []
    for r in rows:
        key = (r["difficulty"], r["T"])
        if key in seen:
            continue
        seen.append(key)
        vals = [q["metric"] for q in rows
                if (q["difficulty"], q["T"]) == key]
        out.append({"difficulty": key[0], "T": key[1],
                    "mean": float(np.mean(vals)),
                    "stddev": float(np.std(vals)),
                    "seeds": len(vals)})
    return out


def _write_report(out: str, report: EvalReport) -> None:
    atomic_write_text(os.path.join(out, "report.json"),
                      canonical_json(report.to_canonical()) + "\n")
    atomic_write_text(os.path.join(out, "report.csv"), report.to_csv())
    atomic_write_text(os.path.join(out, "timing.json"),
                      canonical_json({"wall_clock_seconds":
                                      report.wall_clock}) + "\n")


# ---------------------------------------------------------------------------
# ablate

def ablation_row_config(cfg: ExperimentConfig, flags: AblationFlags
                        ) -> SolveConfig:
    if not flags.gradient_descent:
        return replace(cfg.solve, noisy_mode=True)
    steps = cfg.solve.steps if flags.refinement else 1
    return replace(cfg.solve, steps=steps, noisy_mode=False)


def cmd_ablate(cfg: ExperimentConfig) -> dict:
    """Train twice per seed (with/without contrastive), eval the 4 rows."""
    h = record_config(cfg)
    out = resolve_outdir(cfg.outdir)
    rows = []
    clocks = {}
    for seed in cfg.seeds:
        variants = {
            False: train_one(cfg, seed,
                             replace(cfg.train, contrastive_weight=0.0),
                             variant="nc"),
            True: train_one(cfg, seed, cfg.train),
        }
        for name, flags in ABLATION_LADDER:
            ckpt = ck.load_checkpoint(variants[flags.contrastive])
            model, sched = ck.restore_model(ckpt)
            scfg = replace(ablation_row_config(cfg, flags), seed=seed)
            for difficulty, split in _difficulty_splits():
                kind, insts = _load_split(cfg, split, seed)
                t0 = time.perf_counter()
                preds = solve_instances(model, sched, insts, scfg,
                                        chunk=cfg.eval_chunk)
                clocks[f"{name}/{difficulty}/s{seed}"] = (time.perf_counter()
                                                          - t0)
                scores = score_instances(insts, preds)
                rows.append({"row": name, "flags": flags.to_dict(),
                             "flags_hash": config_hash(flags.to_dict()),
                             "difficulty": difficulty, "seed": int(seed),
                             "T": (None if scfg.noisy_mode
                                   else int(scfg.steps)),
                             "count": len(insts),
                             "metric": float(np.mean(scores))})
    aggregates = []
    for name, _flags in ABLATION_LADDER:
        for difficulty in DIFFICULTIES:
            vals = [r["metric"] for r in rows
                    if r["row"] == name and r["difficulty"] == difficulty]
            aggregates.append({"row": name, "difficulty": difficulty,
                               "mean": float(np.mean(vals)),
                               "stddev": float(np.std(vals)),
                               "seeds": len(vals)})
    doc = {"format": ABLATION_FORMAT, "config_hash": h, "rows": rows,
           "aggregates": aggregates}
    atomic_write_text(os.path.join(out, "ablation.json"),
                      canonical_json(doc) + "\n")
    lines = ["row,difficulty,seed,T,count,metric"]
    for r in rows:
        t = "" if r["T"] is None else r["T"]
        lines.append(f"{r['row']},{r['difficulty']},{r['seed']},{t},"
                     f"{r['count']},{r['metric']!r}")
    atomic_write_text(os.path.join(out, "ablation.csv"),
                      "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(out, "ablation-timing.json"),
                      canonical_json({"wall_clock_seconds": clocks}) + "\n")
    return doc


# ---------------------------------------------------------------------------
# traces

def cmd_plot_traces(cfg: ExperimentConfig, difficulty: str = "standard",
                    count: int = 4, T: int | None = None,
                    png: str | None = None) -> str:
    """Solve a few instances and export their energy-vs-step curves."""
    h = record_config(cfg)
    out = resolve_outdir(cfg.outdir)
    seed = cfg.seeds[0]
    ckpt = ck.load_checkpoint(checkpoint_path(out, cfg.task, seed))
    model, sched = ck.restore_model(ckpt)
    split = dict(_difficulty_splits())[difficulty]
    kind, insts = _load_split(cfg, split, seed)
    insts = insts[:count]
    steps = int(T) if T is not None else cfg.solve.steps
    scfg = replace(cfg.solve, steps=steps, seed=seed)
    X, _ = tk.stack_xy(insts)
    _, traces = anneal_solve(model, X, sched, scfg, y_dim=kind.y_dim)
    doc = {"format": TRACES_FORMAT, "config_hash": h,
           "difficulty": difficulty, "T": steps,
           "traces": [t.to_dict() for t in traces]}
    path = os.path.join(out, f"traces-{cfg.task.name}-{difficulty}.json")
    atomic_write_text(path, canonical_json(doc) + "\n")
    if png:
        _render_traces(doc, png)
    return path


def _render_traces(doc: dict, png: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    for i, trace in enumerate(doc["traces"]):
        xs = []
        ys = []
        offset = 0
        for land in trace["landscapes"]:
            energies = land["retained_energies"]
            xs.extend(range(offset, offset + len(energies)))
            ys.extend(energies)
            offset += len(energies)
        ax.plot(xs, ys, label=f"instance {i}")
    ax.set_xlabel("optimization step (level-major)")
    ax.set_ylabel("energy")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(png, dpi=120)
    plt.close(fig)
