"""Task generators, validity oracles, metrics, and dataset files.

Six task families: three continuous (elementwise addition, low-rank matrix
completion, matrix inverse), two discrete (small Sudoku boards, directed
graph connectivity) and one planning task (shortest path as a step-by-node
one-hot matrix). Every instance derives its RNG substream from
(seed, task name, index), so streams are deterministic, prefix-stable in
count, and embarrassingly parallel.

Dataset files are JSON lines: one header line with the format version and
task description, then one instance per line with decimal-text values.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import discretize
from .util import atomic_write_text, canonical_json, substream

TASK_NAMES = ("addition", "completion", "inverse", "sudoku",
              "connectivity", "shortest_path")
DATASET_FORMAT = "ebsolve-dataset-v1"


@dataclass(frozen=True)
class TaskKind:
    """Task family plus the size parameters that fix its encoding."""

    name: str
    n: int = 0        # matrix side or node count
    rank: int = 0     # completion factor rank
    order: int = 0    # sudoku block order (side = order^2)
    horizon: int = 0  # planning steps

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}")
        if self.name == "sudoku":
            if self.order not in (2, 3):
                raise ValueError("sudoku supports order 2 or 3")
        elif self.name == "shortest_path":
            if self.n < 2 or self.horizon < 2:
                raise ValueError("shortest_path needs n >= 2, horizon >= 2")
        elif self.name == "connectivity":
            if self.n < 2:
                raise ValueError("connectivity needs n >= 2")
        else:
            if self.n < 1:
                raise ValueError(f"{self.name} needs n >= 1")
            if self.name == "completion" and not 1 <= self.rank <= self.n:
                raise ValueError("completion needs 1 <= rank <= n")

    @property
    def side(self) -> int:
        return self.order * self.order

    @property
    def x_dim(self) -> int:
        return {
            "addition": 2 * self.n * self.n,
            "completion": 2 * self.n * self.n,
            "inverse": self.n * self.n,
            "sudoku": self.side ** 2 * (self.side + 1),
            "connectivity": self.n * self.n,
            "shortest_path": self.n * self.n + 2 * self.n,
        }[self.name]

    @property
    def y_dim(self) -> int:
        return {
            "addition": self.n * self.n,
            "completion": self.n * self.n,
            "inverse": self.n * self.n,
            "sudoku": self.side ** 3,
            "connectivity": self.n * self.n,
            "shortest_path": self.horizon * self.n,
        }[self.name]

    @property
    def group_size(self) -> int | None:
        """Categorical group width for discretize; None marks binary entries."""
        if self.name == "sudoku":
            return self.side
        if self.name == "shortest_path":
            return self.n
        return None

    @property
    def discrete(self) -> bool:
        return self.name in ("sudoku", "connectivity", "shortest_path")

    @property
    def default_arch(self) -> str:
        return {"addition": "mlp", "completion": "mlp", "inverse": "mlp",
                "sudoku": "board", "connectivity": "edge_relational",
                "shortest_path": "plan_relational"}[self.name]

    def to_dict(self) -> dict:
        return {"name": self.name, "n": self.n, "rank": self.rank,
                "order": self.order, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskKind":
        return cls(name=d["name"], n=int(d.get("n", 0)),
                   rank=int(d.get("rank", 0)), order=int(d.get("order", 0)),
                   horizon=int(d.get("horizon", 0)))


@dataclass
class ProblemInstance:
    x: np.ndarray
    y_star: np.ndarray
    kind: TaskKind
    difficulty: str = "standard"
    meta: dict = field(default_factory=dict)


def _rng(seed: int, name: str, index: int) -> np.random.Generator:
    return np.random.default_rng(substream(seed, name, index))


# ---------------------------------------------------------------------------
# continuous tasks

def gen_addition(n: int, magnitude: float, count: int, seed: int,
                 difficulty: str = "standard") -> list[ProblemInstance]:
    """Elementwise matrix addition: x = (A, B) flattened, y = A + B."""
    kind = TaskKind("addition", n=n)
    out = []
    for i in range(count):
        rng = _rng(seed, "addition", i)
        ab = rng.uniform(-magnitude, magnitude, size=(2, n, n))
        out.append(ProblemInstance(
            x=ab.reshape(-1).copy(), y_star=(ab[0] + ab[1]).reshape(-1),
            kind=kind, difficulty=difficulty,
            meta={"magnitude": float(magnitude)}))
    return out


def gen_completion(n: int, rank: int, mask_frac: float, magnitude: float,
                   count: int, seed: int,
                   difficulty: str = "standard") -> list[ProblemInstance]:
    """Low-rank completion: hide mask_frac of M = U V^T, recover all of M.

    U, V entries are scaled so the entries of M have stddev `magnitude`
    (the harder split raises the factor magnitudes, i.e. magnitude * s^2
    for an entry scale-up of s)."""
    kind = TaskKind("completion", n=n, rank=rank)
    if not 0.0 <= mask_frac < 1.0:
        raise ValueError("mask_frac must be in [0, 1)")
    s = float(np.sqrt(magnitude / np.sqrt(rank)))
    hidden = int(round(mask_frac * n * n))
    out = []
    for i in range(count):
        rng = _rng(seed, "completion", i)
        U = s * rng.standard_normal((n, rank))
        V = s * rng.standard_normal((n, rank))
        M = U @ V.T
        mask = np.ones(n * n)
        mask[rng.choice(n * n, size=hidden, replace=False)] = 0.0
        out.append(ProblemInstance(
            x=np.concatenate([M.reshape(-1) * mask, mask]),
            y_star=M.reshape(-1).copy(), kind=kind, difficulty=difficulty,
            meta={"magnitude": float(magnitude), "mask_frac": float(mask_frac)}))
    return out


def pivoted_inverse(A: np.ndarray) -> np.ndarray:
    """Matrix inverse by Gauss-Jordan elimination with partial pivoting."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("square matrix required")
    M = np.hstack([A, np.eye(n)])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(M[col:, col])))
        if M[piv, col] == 0.0:
            raise ValueError("singular matrix")
        if piv != col:
            M[[col, piv]] = M[[piv, col]]
        M[col] /= M[col, col]
        for r in range(n):
            if r != col and M[r, col] != 0.0:
                M[r] -= M[r, col] * M[col]
    return M[:, n:].copy()


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def gen_inverse(n: int, condition: float, count: int, seed: int,
                difficulty: str = "standard") -> list[ProblemInstance]:
    """Matrix inversion with an exactly controlled condition number.

    A = Q1 diag(s) Q2 with s log-spaced from 1 down to 1/condition, so the
    singular values span the requested condition number exactly."""
    kind = TaskKind("inverse", n=n)
    if condition < 1.0:
        raise ValueError("condition must be >= 1")
    spectrum = (np.ones(1) if n == 1 else
                np.exp(np.linspace(0.0, -np.log(condition), n)))
    out = []
    for i in range(count):
        rng = _rng(seed, "inverse", i)
        A = (_random_orthogonal(rng, n) * spectrum) @ _random_orthogonal(rng, n)
        out.append(ProblemInstance(
            x=A.reshape(-1).copy(),
            y_star=pivoted_inverse(A).reshape(-1), kind=kind,
            difficulty=difficulty, meta={"condition": float(condition)}))
    return out


# ---------------------------------------------------------------------------
# sudoku

def _block_of(cell: int, order: int) -> int:
    side = order * order
    r, c = divmod(cell, side)
    return (r // order) * order + c // order


def _groups(order: int) -> list[list[int]]:
    """Row, column and block index groups over flattened cells."""
    side = order * order
    cells = range(side * side)
    groups = [[c for c in cells if c // side == g] for g in range(side)]
    groups += [[c for c in cells if c % side == g] for g in range(side)]
    groups += [[c for c in cells if _block_of(c, order) == g]
               for g in range(side)]
    return groups


def solve_board(digits: np.ndarray, order: int,
                rng: np.random.Generator | None = None) -> np.ndarray | None:
    """Backtracking solver; 0 marks empty. Returns a solution or None.

    Tries the most constrained cell first; candidate order is shuffled when
    an rng is supplied (used to sample random complete boards)."""
    side = order * order
    board = np.array(digits, dtype=np.int64)
    peers = [[] for _ in range(side * side)]
    for g in _groups(order):
        for c in g:
            peers[c].extend(p for p in g if p != c)

    def candidates(c):
        used = {board[p] for p in peers[c]}
        return [v for v in range(1, side + 1) if v not in used]

    def step():
        empty = [c for c in range(side * side) if board[c] == 0]
        if not empty:
            return True
        cands = {c: candidates(c) for c in empty}
        cell = min(empty, key=lambda c: len(cands[c]))
        opts = cands[cell]
        if rng is not None:
            opts = [opts[j] for j in rng.permutation(len(opts))]
        for v in opts:
            board[cell] = v
            if step():
                return True
            board[cell] = 0
        return False

    return board if step() else None


def board_is_valid(digits: np.ndarray, order: int) -> bool:
    """True when every row, column and block is a permutation of 1..side."""
    side = order * order
    digits = np.asarray(digits, dtype=np.int64)
    want = set(range(1, side + 1))
    return all(set(digits[g].tolist()) == want for g in _groups(order))


def board_to_onehot(digits: np.ndarray, order: int) -> np.ndarray:
    side = order * order
    out = np.zeros((side * side, side))
    out[np.arange(side * side), np.asarray(digits) - 1] = 1.0
    return out.reshape(-1)


def onehot_to_board(y: np.ndarray, order: int) -> np.ndarray:
    """Digits from one-hot rows; rows that are not one-hot come back as 0."""
    side = order * order
    rows = np.asarray(y, dtype=np.float64).reshape(side * side, side)
    digits = np.argmax(rows, axis=1) + 1
    onehot = np.zeros_like(rows)
    onehot[np.arange(side * side), digits - 1] = 1.0
    digits[np.any(rows != onehot, axis=1)] = 0
    return digits


def sudoku_encode_x(digits: np.ndarray, given: np.ndarray,
                    order: int) -> np.ndarray:
    """Per cell: one-hot of the given value (zeros if hidden) plus a mask bit."""
    side = order * order
    cells = side * side
    x = np.zeros((cells, side + 1))
    for c in range(cells):
        if given[c]:
            x[c, digits[c] - 1] = 1.0
            x[c, side] = 1.0
    return x.reshape(-1)


def gen_sudoku(order: int, givens_range: tuple[int, int], count: int,
               seed: int, difficulty: str = "standard") -> list[ProblemInstance]:
    """Complete boards by randomized backtracking, then keep g random givens.

    Dropping givens only enlarges the solution set, so solvability is
    preserved by construction; the solver re-checks each puzzle anyway."""
    kind = TaskKind("sudoku", order=order)
    side = order * order
    cells = side * side
    lo, hi = int(givens_range[0]), int(givens_range[1])
    if not 0 <= lo <= hi <= cells:
        raise ValueError(f"invalid givens range [{lo}, {hi}]")
    out = []
    for i in range(count):
        rng = _rng(seed, "sudoku", i)
        solution = solve_board(np.zeros(cells, dtype=np.int64), order, rng)
        g = int(rng.integers(lo, hi + 1))
        given = np.zeros(cells, dtype=bool)
        given[rng.choice(cells, size=g, replace=False)] = True
        puzzle = np.where(given, solution, 0)
        assert solve_board(puzzle, order) is not None
        out.append(ProblemInstance(
            x=sudoku_encode_x(solution, given, order),
            y_star=board_to_onehot(solution, order), kind=kind,
            difficulty=difficulty, meta={"givens": g}))
    return out


def sudoku_givens(x: np.ndarray, order: int) -> np.ndarray:
    """Given digits from the input encoding; 0 where the mask bit is off."""
    side = order * order
    xr = np.asarray(x, dtype=np.float64).reshape(side * side, side + 1)
    return np.where(xr[:, side] > 0.5, np.argmax(xr[:, :side], axis=1) + 1, 0)


# ---------------------------------------------------------------------------
# graphs

def _geometric_graph(rng: np.random.Generator, n: int, deg_lo: int,
                     deg_hi: int) -> tuple[np.ndarray, np.ndarray]:
    """Directed graph on uniform points: each node links its d closest."""
    pts = rng.uniform(0.0, 1.0, size=(n, 2))
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    A = np.zeros((n, n))
    degs = rng.integers(deg_lo, deg_hi + 1, size=n)
    for u in range(n):
        A[u, np.argsort(d2[u])[:degs[u]]] = 1.0
    return A, pts


def bfs_reachability(A: np.ndarray) -> np.ndarray:
    """Boolean reachability by BFS from every node; diagonal is True."""
    n = A.shape[0]
    R = np.zeros((n, n), dtype=bool)
    for s in range(n):
        seen = {s}
        queue = [s]
        while queue:
            u = queue.pop()
            for v in np.nonzero(A[u] > 0)[0]:
                if int(v) not in seen:
                    seen.add(int(v))
                    queue.append(int(v))
        R[s, sorted(seen)] = True
    return R


def floyd_warshall_reach(A: np.ndarray) -> np.ndarray:
    """Boolean transitive closure with self-reachability on the diagonal."""
    n = A.shape[0]
    R = (np.asarray(A) > 0) | np.eye(n, dtype=bool)
    for u in range(n):
        R |= np.outer(R[:, u], R[u, :])
    return R


def floyd_warshall_dist(A: np.ndarray) -> np.ndarray:
    """All-pairs unit-edge distances; n+1 encodes unreachable."""
    n = A.shape[0]
    inf = n + 1
    D = np.full((n, n), inf, dtype=np.int64)
    D[np.asarray(A) > 0] = 1
    np.fill_diagonal(D, 0)
    for u in range(n):
        D = np.minimum(D, D[:, u:u + 1] + D[u:u + 1, :])
    return np.minimum(D, inf)


def gen_connectivity(n: int, count: int, seed: int,
                     difficulty: str = "standard") -> list[ProblemInstance]:
    """Directed reachability: x = adjacency, y = transitive closure."""
    kind = TaskKind("connectivity", n=n)
    out = []
    for i in range(count):
        rng = _rng(seed, "connectivity", i)
        A, pts = _geometric_graph(rng, n, 1, n // 2)
        out.append(ProblemInstance(
            x=A.reshape(-1).copy(),
            y_star=floyd_warshall_reach(A).astype(np.float64).reshape(-1),
            kind=kind, difficulty=difficulty,
            meta={"coords": [[float(v) for v in p] for p in pts]}))
    return out


def default_plan_degrees(n: int) -> tuple[int, int]:
    """Out-degree range for planning graphs, kept >= 2 at desk scale so the
    random-neighbor baseline has real choices to get wrong (measured ~0.43
    success at n in {8, 12} with this range)."""
    return 2, max(4, n // 3)


def plan_rows(path: list[int], horizon: int, n: int) -> np.ndarray:
    """One-hot row per step; the goal row repeats after arrival."""
    rows = np.zeros((horizon, n))
    for t in range(horizon):
        rows[t, path[min(t, len(path) - 1)]] = 1.0
    return rows.reshape(-1)


def gen_shortest_path(n: int, horizon: int, count: int, seed: int,
                      difficulty: str = "standard",
                      degree_range: tuple[int, int] | None = None,
                      max_retries: int = 200) -> list[ProblemInstance]:
    """Shortest-path planning on unit-edge geometric graphs.

    x packs (adjacency, one-hot start, one-hot goal); y is one one-hot row
    per step along a shortest path, starting at the start node and padded
    with the goal after arrival. Start/goal pairs are drawn uniformly from
    pairs with 1 <= distance <= horizon - 1; graphs without such a pair are
    redrawn, and an instance is rejected after max_retries graphs."""
    kind = TaskKind("shortest_path", n=n, horizon=horizon)
    deg_lo, deg_hi = degree_range or default_plan_degrees(n)
    out = []
    for i in range(count):
        rng = _rng(seed, "shortest_path", i)
        for attempt in range(max_retries):
            A, _ = _geometric_graph(rng, n, deg_lo, deg_hi)
            D = floyd_warshall_dist(A)
            s_idx, g_idx = np.nonzero((D >= 1) & (D <= horizon - 1))
            if s_idx.size:
                break
        else:
            raise RuntimeError(
                f"no start/goal with distance in [1, {horizon - 1}] after "
                f"{max_retries} graphs (n={n}, degrees [{deg_lo},{deg_hi}])")
        pick = int(rng.integers(s_idx.size))
        start, goal = int(s_idx[pick]), int(g_idx[pick])
        path = [start]
        while path[-1] != goal:
            v = path[-1]
            nbrs = np.nonzero(A[v] > 0)[0]
            step = min(int(w) for w in nbrs if D[w, goal] == D[v, goal] - 1)
            path.append(step)
        x = np.concatenate([A.reshape(-1), np.eye(n)[start], np.eye(n)[goal]])
        dist = np.where(D > n, -1, D)  # -1 encodes unreachable in files
        out.append(ProblemInstance(
            x=x, y_star=plan_rows(path, horizon, n), kind=kind,
            difficulty=difficulty,
            meta={"start": start, "goal": goal,
                  "dist": [[int(v) for v in row] for row in dist]}))
    return out


# ---------------------------------------------------------------------------
# validity oracles

def instance_is_valid(inst: ProblemInstance) -> bool:
    """Exact task-specific check that y_star is a correct output for x."""
    kind, x, y = inst.kind, inst.x, inst.y_star
    if kind.name == "addition":
        half = x.size // 2
        return np.array_equal(x[:half] + x[half:], y)
    if kind.name == "completion":
        n = kind.n
        mask = x[n * n:]
        if not np.array_equal(x[:n * n], y * mask):
            return False
        sv = np.linalg.svd(y.reshape(n, n), compute_uv=False)
        return bool(np.all(sv[kind.rank:] < 1e-8))
    if kind.name == "inverse":
        n = kind.n
        resid = x.reshape(n, n) @ y.reshape(n, n) - np.eye(n)
        return bool(np.max(np.abs(resid)) < 1e-8)
    if kind.name == "sudoku":
        digits = onehot_to_board(y, kind.order)
        if np.any(digits == 0) or not board_is_valid(digits, kind.order):
            return False
        given = sudoku_givens(x, kind.order)
        return bool(np.all((given == 0) | (given == digits)))
    if kind.name == "connectivity":
        n = kind.n
        R = bfs_reachability(x.reshape(n, n)).astype(np.float64)
        return np.array_equal(y, R.reshape(-1))
    if kind.name == "shortest_path":
        return _plan_is_valid(inst)
    raise ValueError(f"unknown task {kind.name!r}")


def _plan_is_valid(inst: ProblemInstance) -> bool:
    n, horizon = inst.kind.n, inst.kind.horizon
    A = inst.x[:n * n].reshape(n, n)
    start = int(np.argmax(inst.x[n * n:n * n + n]))
    goal = int(np.argmax(inst.x[n * n + n:]))
    rows = inst.y_star.reshape(horizon, n)
    if not (np.all(np.sum(rows, axis=1) == 1.0)
            and np.all((rows == 0.0) | (rows == 1.0))):
        return False
    nodes = np.argmax(rows, axis=1)
    if nodes[0] != start or nodes[-1] != goal:
        return False
    D = floyd_warshall_dist(A)
    for t in range(len(nodes) - 1):
        u, v = int(nodes[t]), int(nodes[t + 1])
        if u == goal:
            if v != goal:  # stays put after arrival
                return False
        elif not (A[u, v] == 1.0 and D[v, goal] == D[u, goal] - 1):
            return False
    return True


# ---------------------------------------------------------------------------
# metrics

def metric(kind: TaskKind, y_pred: np.ndarray, inst: ProblemInstance) -> float:
    """Headline per-instance score: MSE (continuous, lower is better) or
    accuracy in [0, 1] (discrete, higher is better)."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_pred.shape != inst.y_star.shape:
        raise ValueError(f"prediction shape {y_pred.shape} != "
                         f"{inst.y_star.shape}")
    if kind.name in ("addition", "completion", "inverse"):
        return float(np.mean((y_pred - inst.y_star) ** 2))
    if kind.name == "sudoku":
        digits = onehot_to_board(discretize(y_pred, kind.side), kind.order)
        if np.any(digits == 0) or not board_is_valid(digits, kind.order):
            return 0.0
        given = sudoku_givens(inst.x, kind.order)
        return float(np.all((given == 0) | (given == digits)))
    if kind.name == "connectivity":
        return float(np.mean(discretize(y_pred) == inst.y_star))
    if kind.name == "shortest_path":
        return first_action_success(y_pred, inst)
    raise ValueError(f"unknown task {kind.name!r}")


def connectivity_graph_exact(y_pred: np.ndarray, inst: ProblemInstance) -> float:
    """Secondary connectivity score: 1 only if every entry matches."""
    return float(np.array_equal(discretize(y_pred), inst.y_star))


def _plan_context(inst: ProblemInstance):
    n = inst.kind.n
    A = inst.x[:n * n].reshape(n, n)
    start = int(np.argmax(inst.x[n * n:n * n + n]))
    goal = int(np.argmax(inst.x[n * n + n:]))
    dist = np.asarray(inst.meta["dist"], dtype=np.int64)
    return n, A, start, goal, dist


def first_action_success(y_pred: np.ndarray, inst: ProblemInstance) -> float:
    """1 if the predicted first move is an out-neighbor of the start that
    strictly reduces the distance to the goal."""
    n, A, start, goal, dist = _plan_context(inst)
    move = int(np.argmax(np.asarray(y_pred).reshape(inst.kind.horizon, n)[1]))
    ok = (A[start, move] == 1.0 and dist[move, goal] >= 0
          and dist[move, goal] < dist[start, goal])
    return float(ok)


def first_action_random_rate(inst: ProblemInstance) -> float:
    """Exact success probability of moving to a uniform random out-neighbor."""
    n, A, start, goal, dist = _plan_context(inst)
    nbrs = np.nonzero(A[start] > 0)[0]
    good = sum(1 for v in nbrs
               if dist[v, goal] >= 0 and dist[v, goal] < dist[start, goal])
    return good / len(nbrs)


# ---------------------------------------------------------------------------
# dataset files

def save_instances(path, kind: TaskKind, instances) -> None:
    """Write the versioned JSON-lines dataset format."""
    lines = [canonical_json({"format": DATASET_FORMAT,
                             "task": kind.to_dict(),
                             "count": len(instances)})]
    for inst in instances:
        lines.append(canonical_json({
            "kind": inst.kind.name,
            "difficulty": inst.difficulty,
            "shapes": {"x": [int(inst.x.size)], "y_star": [int(inst.y_star.size)]},
            "x": [float(v) for v in inst.x],
            "y_star": [float(v) for v in inst.y_star],
            "meta": inst.meta,
        }))
    atomic_write_text(str(path), "\n".join(lines) + "\n")


def load_instances(path) -> tuple[TaskKind, list[ProblemInstance]]:
    import json

    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln]
    head = json.loads(lines[0])
    if head.get("format") != DATASET_FORMAT:
        raise ValueError(f"unsupported dataset format {head.get('format')!r}")
    kind = TaskKind.from_dict(head["task"])
    if head["count"] != len(lines) - 1:
        raise ValueError(f"header says {head['count']} instances, "
                         f"file has {len(lines) - 1}")
    out = []
    for ln in lines[1:]:
        row = json.loads(ln)
        if row["kind"] != kind.name:
            raise ValueError("instance kind differs from header task")
        out.append(ProblemInstance(
            x=np.array(row["x"], dtype=np.float64),
            y_star=np.array(row["y_star"], dtype=np.float64),
            kind=kind, difficulty=row["difficulty"], meta=row["meta"]))
    return kind, out


def stack_xy(instances) -> tuple[np.ndarray, np.ndarray]:
    """Instance lists to training matrices."""
    X = np.stack([inst.x for inst in instances])
    Y = np.stack([inst.y_star for inst in instances])
    return X, Y
