"""Release gate: the ten headline criteria, one pass/fail line each.

Criteria 1-3 re-run the differentiation/schedule/inference oracles at full
strength; 4-9 train desk-scale models end to end; 10 checks byte-level
determinism of the artifact layer. The whole file runs in roughly 40 minutes
on one CPU core; every test prints `[PASS] ...` with its measured numbers
(visible with -s or -rA, and on any failure).
"""
import os
import time

import numpy as np
import pytest

from gradcheck import check_one_graph, rel_error

from ebsolve import autodiff as ad
from ebsolve import checkpoint as ck
from ebsolve import harness as hz
from ebsolve import tasks as tk
from ebsolve import training as tr
from ebsolve.inference import SolveConfig, anneal_solve, trace_is_monotone
from ebsolve.models import ModelSpec, build_model
from ebsolve.schedule import make_cosine_schedule

from test_inference import ConstantTargetModel, ScheduleQuadModel, _const_steps


def _line(num: int, label: str, ok: bool, detail: str, t0: float) -> None:
    tag = "PASS" if ok else "FAIL"
    print(f"[{tag}] criterion {num:02d} {label}: {detail} "
          f"[{time.perf_counter() - t0:.0f}s]")
    assert ok, f"criterion {num:02d} {label}: {detail}"


def _train_task(task, seed, iterations, batch_size, *, width=None,
                train_count=2000):
    """Generate the standard training split and fit a fresh model on it."""
    sched = make_cosine_schedule(10)
    spec = hz.default_model_spec(task, width=width)
    insts = hz.generate_split(task, "standard", train_count,
                              hz.dataset_seed(seed, "train"))
    X, Y = tk.stack_xy(insts)
    model = build_model(spec, seed=seed)
    cfg = tr.TrainConfig(iterations=iterations, batch_size=batch_size,
                         lr=1e-3, seed=seed,
                         negative=hz.default_negative(task))
    tr.train(model, X, Y, sched, cfg)
    return model, sched


def _metric(model, sched, insts, solve_cfg, chunk=25) -> float:
    preds = hz.solve_instances(model, sched, insts, solve_cfg, chunk=chunk)
    return float(np.mean(hz.score_instances(insts, preds)))


def test_01_differentiation_correctness():
    t0 = time.perf_counter()
    worst1 = 0.0
    for seed in range(200):
        err, _ = check_one_graph(seed)
        worst1 = max(worst1, err)

    # Second order: d/dtheta of ||grad_y E - eps||^2 on a tiny real model,
    # the exact reverse-over-reverse path the training loss runs.
    spec = ModelSpec(arch="mlp", x_dim=2, y_dim=2, levels=2, width=5, depth=1)
    model = build_model(spec, seed=3)
    n_params = model.n_params()
    rng = np.random.default_rng(7)
    X = rng.standard_normal((3, 2))
    Y0 = rng.standard_normal((3, 2))
    eps = rng.standard_normal((3, 2))
    ks = np.array([1, 2, 1])

    def loss_value() -> float:
        yt = ad.tensor(Y0)
        e = model.energy_batch(X, yt, ks)
        (gy,) = ad.grad(ad.tsum(e), [yt])
        return ad.sq_l2(ad.sub(gy, ad.tensor(eps))).item()

    yt = ad.tensor(Y0)
    e = model.energy_batch(X, yt, ks)
    (gy,) = ad.grad(ad.tsum(e), [yt])
    loss = ad.sq_l2(ad.sub(gy, ad.tensor(eps)))
    names = list(model.params)
    grads = ad.grad(loss, [model.params[n] for n in names])

    h = 1e-6
    worst2 = 0.0
    for name, g in zip(names, grads):
        base = model.params[name].data.copy()
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for i in range(base.size):
            for sign in (+1, -1):
                bumped = base.copy().reshape(-1)
                bumped[i] += sign * h
                model.params[name] = ad.tensor(bumped.reshape(base.shape))
                flat[i] += sign * loss_value() / (2 * h)
        model.params[name] = ad.tensor(base)
        worst2 = max(worst2, rel_error(g.data, fd))

    ok = worst1 < 1e-4 and worst2 < 1e-3 and n_params <= 200
    _line(1, "differentiation", ok,
          f"first-order worst rel err {worst1:.2e} over 200 graphs (<1e-4); "
          f"second-order worst {worst2:.2e} (<1e-3) on {n_params} params",
          t0)


def test_02_schedule_and_corruption_invariants():
    t0 = time.perf_counter()
    worst = 0.0
    for K in range(1, 65):
        sched = make_cosine_schedule(K)
        assert sched.alpha_bar[0] == 1.0 and sched.alpha_bar[K] == 0.0
        assert sched.sigma[0] == 0.0 and sched.sigma[K] == 1.0
        assert np.all(np.diff(sched.alpha_bar) < 0.0)
        assert np.all(np.diff(sched.sigma) > 0.0)
        rng = np.random.default_rng(K)
        y = rng.standard_normal((4, 3))
        zero = np.zeros_like(y)
        # Exclude k = K: the signal coefficient there is exactly zero, so no
        # rescale can recover the k-1 corruption from it.
        for k in range(1, K):
            lhs = sched.rescale_between(sched.corrupt(y, k, zero), k, k - 1)
            rhs = sched.corrupt(y, k - 1, zero)
            np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-15)
            scale = np.max(np.abs(rhs)) or 1.0
            worst = max(worst, np.max(np.abs(lhs - rhs)) / scale)
    _line(2, "schedule invariants", True,
          f"endpoints/monotonicity exact and commuting square within "
          f"{worst:.1e} for K in 1..64", t0)


def test_03_inference_invariants():
    t0 = time.perf_counter()
    K = 10
    sched = make_cosine_schedule(K)

    # Monotone retained energy on every trace of a random real model.
    spec = ModelSpec(arch="mlp", x_dim=3, y_dim=2, levels=K, width=8, depth=2)
    model = build_model(spec, seed=1)
    X = np.random.default_rng(2).standard_normal((40, 3))
    _, traces = anneal_solve(model, X, sched, SolveConfig(steps=10, seed=0))
    n_mono = sum(trace_is_monotone(t) for t in traces)

    # Quadratic head converges to the analytic optimum.
    quad_worst = 0.0
    for lam in (0.5, 0.75, 1.0):
        m = ConstantTargetModel(3, levels=K)
        Xq = np.random.default_rng(5).standard_normal((4, 3))
        y, _ = anneal_solve(m, Xq, sched, _const_steps(K, lam))
        quad_worst = max(quad_worst, float(np.max(np.abs(y - Xq))))

    # More steps never raise the final energy of the schedule-tracking
    # quadratic: 100 seeded solves, T ladder per solve.
    m = ScheduleQuadModel(3, sched)
    bad = 0
    for i in range(100):
        x = np.random.default_rng(1000 + i).standard_normal((1, 3))
        finals = []
        for T in (1, 2, 5, 10, 25):
            _, trs = anneal_solve(m, x, sched,
                                  SolveConfig(steps=T, lambda0=0.75, seed=i))
            finals.append(trs[0].final_energy())
        if any(b > a + 1e-12 for a, b in zip(finals, finals[1:])):
            bad += 1

    ok = n_mono == len(traces) and quad_worst <= 1e-8 and bad == 0
    _line(3, "inference invariants", ok,
          f"{n_mono}/{len(traces)} traces monotone; quadratic optimum gap "
          f"{quad_worst:.1e} (<=1e-8); monotone-T violations {bad}/100", t0)


def test_04_addition_held_out_mse():
    t0 = time.perf_counter()
    task = tk.TaskKind("addition", n=8)
    model, sched = _train_task(task, seed=0, iterations=2000, batch_size=128)
    test = hz.generate_split(task, "standard", 100, hz.dataset_seed(0, "test"))
    mse = _metric(model, sched, test, SolveConfig(steps=10, seed=0))
    _line(4, "addition", mse < 0.01,
          f"held-out elementwise MSE {mse:.4f} (<0.01) after 2000 iterations",
          t0)


def test_05_inverse_step_count_trend():
    t0 = time.perf_counter()
    task = tk.TaskKind("inverse", n=8)
    at10, at40 = [], []
    for seed in range(5):
        model, sched = _train_task(task, seed, iterations=3000,
                                   batch_size=128)
        harder = hz.generate_split(task, "harder", 100,
                                   hz.dataset_seed(seed, "harder"))
        at10.append(_metric(model, sched, harder,
                            SolveConfig(steps=10, lambda0=0.05, seed=seed)))
        at40.append(_metric(model, sched, harder,
                            SolveConfig(steps=40, lambda0=0.05, seed=seed)))
    m10, m40 = float(np.mean(at10)), float(np.mean(at40))
    _line(5, "inverse step trend", m40 <= m10,
          f"harder-set MSE mean T=40 {m40:.3f} <= T=10 {m10:.3f} "
          f"across 5 seeds", t0)


def _ablation_config(task, train, steps, outdir):
    return hz.ExperimentConfig(
        task=task, model=hz.default_model_spec(task), train=train,
        solve=SolveConfig(steps=steps), t_grid=(steps,), train_count=2000,
        test_count=100, harder_count=100, seeds=(0, 1, 2, 3, 4),
        outdir=outdir, eval_chunk=25)


def test_06_ablation_ordering(tmp_path):
    t0 = time.perf_counter()
    jobs = [
        ("addition", _ablation_config(
            tk.TaskKind("addition", n=8),
            tr.TrainConfig(iterations=2000, batch_size=128, lr=1e-3,
                           negative=tr.NegativeSpec("continuous")),
            10, str(tmp_path / "abl-add")), False),
        ("sudoku", _ablation_config(
            tk.TaskKind("sudoku", order=2),
            tr.TrainConfig(iterations=3000, batch_size=16, lr=1e-3,
                           negative=tr.NegativeSpec("onehot", 4)),
            20, str(tmp_path / "abl-sud")), True),
    ]
    details = []
    ok = True
    for name, cfg, higher_is_better in jobs:
        hz.cmd_gen(cfg)
        doc = hz.cmd_ablate(cfg)
        rows = {(a["row"], a["difficulty"]): a for a in doc["aggregates"]}
        full = rows[("contrastive", "harder")]
        for ablated in ("noisy", "gradient_descent", "refinement"):
            r = rows[(ablated, "harder")]
            if higher_is_better:
                good = full["mean"] >= r["mean"] - r["stddev"]
            else:
                good = full["mean"] <= r["mean"] + r["stddev"]
            ok = ok and good
            details.append(f"{name}: full {full['mean']:.3f} vs {ablated} "
                           f"{r['mean']:.3f} (sd {r['stddev']:.3f})")
    _line(6, "ablation ordering", ok, "; ".join(details), t0)


def test_07_sudoku_accuracy_and_t_trend():
    t0 = time.perf_counter()
    task = tk.TaskKind("sudoku", order=2)
    model, sched = _train_task(task, seed=0, iterations=3000, batch_size=16)
    test = hz.generate_split(task, "standard", 100, hz.dataset_seed(0, "test"))
    harder = hz.generate_split(task, "harder", 100,
                               hz.dataset_seed(0, "harder"))
    std = _metric(model, sched, test, SolveConfig(steps=20, seed=0))
    hs = [_metric(model, sched, harder, SolveConfig(steps=T, seed=0))
          for T in (5, 20, 50)]
    ok = std >= 0.90 and hs[0] > 0.0 and hs[0] <= hs[1] <= hs[2]
    _line(7, "sudoku", ok,
          f"standard validity accuracy {std:.2f} (>=0.90); harder over "
          f"T=5/20/50: {hs[0]:.2f}/{hs[1]:.2f}/{hs[2]:.2f} "
          f"(positive, non-decreasing)", t0)


def test_08_connectivity_accuracy_and_oracle():
    t0 = time.perf_counter()
    task = tk.TaskKind("connectivity", n=8)
    model, sched = _train_task(task, seed=0, iterations=3000, batch_size=8)
    test = hz.generate_split(task, "standard", 100, hz.dataset_seed(0, "test"))
    harder = hz.generate_split(task, "harder", 100,
                               hz.dataset_seed(0, "harder"))
    std = _metric(model, sched, test, SolveConfig(steps=10, seed=0))
    hard = _metric(model, sched, harder, SolveConfig(steps=10, seed=0))

    mismatched = 0
    for inst in tk.gen_connectivity(8, 1000, seed=77):
        adj = inst.x.reshape(8, 8)
        if not np.array_equal(inst.y_star.reshape(8, 8),
                              tk.bfs_reachability(adj)):
            mismatched += 1

    ok = std >= 0.95 and std - hard <= 0.10 and mismatched == 0
    _line(8, "connectivity", ok,
          f"per-entry accuracy standard {std:.3f} (>=0.95), harder {hard:.3f} "
          f"(gap {std - hard:+.3f} <= 0.10); generator vs BFS mismatches "
          f"{mismatched}/1000", t0)


def test_09_shortest_path_first_action():
    t0 = time.perf_counter()
    task = tk.TaskKind("shortest_path", n=8, horizon=8)
    model, sched = _train_task(task, seed=0, iterations=3000, batch_size=8)

    def baseline(insts) -> float:
        # Expected first-action success of a uniformly random out-neighbor.
        vals = []
        for inst in insts:
            n = inst.kind.n
            adj = inst.x[:n * n].reshape(n, n)
            start = int(np.argmax(inst.x[n * n:n * n + n]))
            goal = int(np.argmax(inst.x[n * n + n:]))
            dist = tk.floyd_warshall_dist(adj)[:, goal]
            outs = [v for v in range(n) if adj[start, v] > 0 and v != start]
            good = sum(1 for v in outs
                       if np.isfinite(dist[v]) and dist[v] < dist[start])
            vals.append(good / len(outs) if outs else 0.0)
        return float(np.mean(vals))

    ok = True
    parts = []
    for split, difficulty in (("test", "standard"), ("harder", "harder")):
        insts = hz.generate_split(task, difficulty, 100,
                                  hz.dataset_seed(0, split))
        acc = _metric(model, sched, insts, SolveConfig(steps=10, seed=0))
        base = baseline(insts)
        ok = ok and acc >= 0.70 and acc >= base + 0.20
        parts.append(f"{difficulty} {acc:.2f} (base {base:.2f})")
    _line(9, "shortest path", ok,
          "first-action success " + "; ".join(parts) +
          " (each >=0.70 and >= base+0.20)", t0)


def test_10_determinism_and_persistence(tmp_path):
    t0 = time.perf_counter()
    task = tk.TaskKind("addition", n=4)
    out = str(tmp_path / "run")
    cfg = hz.ExperimentConfig(
        task=task,
        model=hz.default_model_spec(task, width=16),
        train=tr.TrainConfig(iterations=60, batch_size=16, lr=1e-3,
                             negative=tr.NegativeSpec("continuous")),
        solve=SolveConfig(steps=3), t_grid=(1, 3), train_count=40,
        test_count=10, harder_count=10, seeds=(0,),
        outdir=out, eval_chunk=4)
    ckpt_rel = os.path.relpath(hz.checkpoint_path(out, task, 0), out)

    def run_all() -> dict[str, bytes]:
        # Same config, same directory: the rerun must regenerate every
        # artifact byte for byte.
        hz.cmd_gen(cfg)
        hz.cmd_train(cfg)
        hz.cmd_eval(cfg)
        grabbed = {}
        for name in ("report.json", "report.csv", ckpt_rel):
            with open(os.path.join(out, name), "rb") as fh:
                grabbed[name] = fh.read()
        return grabbed

    first = run_all()
    second = run_all()
    same = {n: first[n] == second[n] for n in first}

    ckpt_path = hz.checkpoint_path(out, task, 0)
    ckpt = ck.load_checkpoint(ckpt_path)
    resaved = os.path.join(out, "resaved.ckpt")
    ck.save_checkpoint(resaved, ckpt)
    with open(resaved, "rb") as fh:
        same_ckpt = second[ckpt_rel] == fh.read()
    re2 = ck.load_checkpoint(resaved)
    bit_exact = all(np.array_equal(a, re2.arrays[n], equal_nan=True)
                    for n, a in ckpt.arrays.items())

    ok = all(same.values()) and same_ckpt and bit_exact
    rerun = ", ".join(f"{os.path.basename(n)} {v}" for n, v in same.items())
    _line(10, "determinism/persistence", ok,
          f"re-run byte-identical ({rerun}); checkpoint round-trip "
          f"byte-identical {same_ckpt}, arrays bit-exact {bit_exact}", t0)
