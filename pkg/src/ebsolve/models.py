"""Energy model architectures.

Every model maps (x, y, level) to one scalar energy per instance. Training
shapes these landscapes so that descending them recovers the target output;
the architectures therefore must be twice differentiable in y, which is why
all activations are smooth (SiLU) and max-pooling is the only piecewise op.

Conventions shared by all architectures:
  - the noise level k enters through a learned embedding added to the first
    hidden layer;
  - parameters initialize from a uniform fan-in rule, U(-1/sqrt(fan_in),
    +1/sqrt(fan_in)), biases included, embeddings treated as width-fan-in;
  - batched evaluation returns a rank-1 tensor of per-instance energies.

The mlp head emits its scalar directly; the board head emits a per-cell
tensor o and scores E = 0.5 * ||o||^2; the two relational heads max-pool
their features and apply a final linear map to a scalar.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ebsolve import autodiff as ad
from ebsolve.autodiff import Tensor

ARCHITECTURES = ("mlp", "board", "edge_relational", "plan_relational")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture tag plus the integers needed to rebuild a model."""

    arch: str
    x_dim: int
    y_dim: int
    levels: int
    width: int = 128
    depth: int = 3
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        for name in ("x_dim", "y_dim", "levels", "width", "depth"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.arch == "board":
            order = self.extras.get("order")
            if not isinstance(order, int) or order < 2:
                raise ValueError("board models need extras['order'] >= 2")
            side = order * order
            if self.y_dim != side * side * side:
                raise ValueError("board y_dim must be cells * values")
            if self.x_dim != side * side * (side + 1):
                raise ValueError("board x_dim must be cells * (values + 1)")
        if self.arch == "edge_relational":
            n = _isqrt_exact(self.y_dim)
            if n is None or self.x_dim != self.y_dim:
                raise ValueError("edge models need square x_dim == y_dim == n*n")
            if self.extras.get("l2_head", 0) not in (0, 1):
                raise ValueError("edge extras['l2_head'] must be 0 or 1")
        if self.arch == "plan_relational":
            n = self.extras.get("n_nodes")
            if not isinstance(n, int) or n < 2:
                raise ValueError("plan models need extras['n_nodes'] >= 2")
            if self.x_dim != n * n + 2 * n:
                raise ValueError("plan x_dim must be n*n + 2n (adjacency, start, goal)")
            if self.y_dim % n:
                raise ValueError("plan y_dim must be horizon * n_nodes")
            if self.extras.get("l2_head", 0) not in (0, 1):
                raise ValueError("plan extras['l2_head'] must be 0 or 1")

    def to_dict(self) -> dict:
        return {"arch": self.arch, "x_dim": self.x_dim, "y_dim": self.y_dim,
                "levels": self.levels, "width": self.width, "depth": self.depth,
                "extras": dict(self.extras)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(arch=d["arch"], x_dim=int(d["x_dim"]), y_dim=int(d["y_dim"]),
                   levels=int(d["levels"]), width=int(d["width"]),
                   depth=int(d["depth"]),
                   extras={k: int(v) for k, v in d.get("extras", {}).items()})


def _isqrt_exact(v: int) -> int | None:
    r = int(np.sqrt(v))
    for c in (r - 1, r, r + 1):
        if c >= 0 and c * c == v:
            return c
    return None


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EnergyModel:
    """Base: named parameters, level embedding, linear-layer helpers."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    # -- parameter plumbing -------------------------------------------------
    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter name mismatch: {sorted(missing)}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {v.shape} != "
                                 f"{self.params[k].shape}")
        self.params = {k: ad.tensor(arrays[k]) for k in self.params}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- shared forward helpers --------------------------------------------
    def _linear(self, rows: Tensor, wname: str, bname: str) -> Tensor:
        return ad.add_rows(ad.matmul(rows, self.params[wname]),
                           self.params[bname])

    def _level_rows(self, ks: np.ndarray, batch: int, group: int) -> Tensor:
        """Per-row level embedding, instances repeated `group` times."""
        K = self.spec.levels
        onehot = np.zeros((batch, K + 1))
        onehot[np.arange(batch), ks] = 1.0
        emb = ad.matmul(Tensor(onehot), self.params["level_emb"])  # [B, w]
        if group == 1:
            return emb
        w = self.spec.width
        return ad.reshape(ad.expand(emb, 1, group), (batch * group, w))

    # -- interface ----------------------------------------------------------
    def energy_batch(self, X: np.ndarray, Y: Tensor, ks: np.ndarray) -> Tensor:
        raise NotImplementedError

    def check_levels(self, ks: np.ndarray, batch: int) -> np.ndarray:
        ks = np.asarray(ks, dtype=np.int64)
        if ks.shape != (batch,):
            raise ValueError(f"ks must have shape ({batch},), got {ks.shape}")
        if np.any(ks < 0) or np.any(ks > self.spec.levels):
            raise ValueError("level index outside 0..K")
        return ks


def energy(model: EnergyModel, x: np.ndarray, y, k: int) -> Tensor:
    """Scalar energy of one instance; y may be a Tensor or an array."""
    x = np.asarray(x, dtype=np.float64)
    yt = y if isinstance(y, Tensor) else ad.tensor(np.asarray(y, dtype=np.float64))
    e = model.energy_batch(x[None, :], ad.reshape(yt, (1, yt.size)),
                           np.array([int(k)]))
    return ad.reshape(e, ())


def gradient_y(model: EnergyModel, x: np.ndarray, y, k: int) -> Tensor:
    """Gradient of the energy in y; differentiable again wrt parameters."""
    yt = y if isinstance(y, Tensor) else ad.tensor(np.asarray(y, dtype=np.float64))
    e = energy(model, x, yt, k)
    (g,) = ad.grad(e, [yt])
    return g


# ---------------------------------------------------------------------------
# mlp: concat(x, y) -> silu stack -> scalar

class MlpEnergy(EnergyModel):
    @classmethod
    def build(cls, spec: ModelSpec, rng: np.random.Generator) -> "MlpEnergy":
        w, d = spec.width, spec.depth
        fan0 = spec.x_dim + spec.y_dim
        p: dict[str, np.ndarray] = {
            "w0": _uniform(rng, fan0, (fan0, w)),
            "b0": _uniform(rng, fan0, (w,)),
            "level_emb": _uniform(rng, w, (spec.levels + 1, w)),
        }
        for i in range(1, d):
            p[f"w{i}"] = _uniform(rng, w, (w, w))
            p[f"b{i}"] = _uniform(rng, w, (w,))
        p["w_out"] = _uniform(rng, w, (w, 1))
        p["b_out"] = _uniform(rng, w, (1,))
        return cls(spec, {k: ad.tensor(v) for k, v in p.items()})

    def energy_batch(self, X, Y, ks):
        spec = self.spec
        B = X.shape[0]
        ks = self.check_levels(ks, B)
        if X.shape != (B, spec.x_dim) or Y.shape != (B, spec.y_dim):
            raise ValueError(f"mlp expects x[{B},{spec.x_dim}] y[{B},{spec.y_dim}], "
                             f"got {X.shape} {Y.shape}")
        rows = ad.concat([Tensor(np.asarray(X, dtype=np.float64)), Y], axis=1)
        h = ad.silu(ad.add(self._linear(rows, "w0", "b0"),
                           self._level_rows(ks, B, 1)))
        for i in range(1, spec.depth):
            h = ad.silu(self._linear(h, f"w{i}", f"b{i}"))
        e = self._linear(h, "w_out", "b_out")
        return ad.reshape(e, (B,))


# ---------------------------------------------------------------------------
# board: per-cell residual MLP with row/col/block pooling, L2 energy head

class BoardEnergy(EnergyModel):
    """Cells share one MLP; each residual block feeds back features pooled
    over the cell's row, column and block constraint groups, which is how
    information travels between cells. E = 0.5 * ||o||^2 over per-cell
    outputs o."""

    def __init__(self, spec: ModelSpec, params: dict[str, Tensor]):
        super().__init__(spec, params)
        self._pools = [Tensor(P) for P in _board_pool_matrices(spec.extras["order"])]

    @classmethod
    def build(cls, spec: ModelSpec, rng: np.random.Generator) -> "BoardEnergy":
        order = spec.extras["order"]
        side = order * order
        cells = side * side
        vals = side
        w = spec.width
        fan0 = 2 * vals + 1
        p: dict[str, np.ndarray] = {
            "w_in": _uniform(rng, fan0, (fan0, w)),
            "b_in": _uniform(rng, fan0, (w,)),
            "level_emb": _uniform(rng, w, (spec.levels + 1, w)),
            "coord_emb": _uniform(rng, w, (cells, w)),
        }
        for i in range(spec.depth):
            p[f"w_mix{i}"] = _uniform(rng, 4 * w, (4 * w, w))
            p[f"b_mix{i}"] = _uniform(rng, 4 * w, (w,))
        p["w_out"] = _uniform(rng, w, (w, vals))
        p["b_out"] = _uniform(rng, w, (vals,))
        return cls(spec, {k: ad.tensor(v) for k, v in p.items()})

    def _pool(self, h: Tensor, P: Tensor, B: int, cells: int) -> Tensor:
        w = self.spec.width
        g = ad.reshape(h, (B, cells, w))
        g = ad.transpose(g, (1, 0, 2))
        g = ad.matmul(P, ad.reshape(g, (cells, B * w)))
        g = ad.transpose(ad.reshape(g, (cells, B, w)), (1, 0, 2))
        return ad.reshape(g, (B * cells, w))

    def energy_batch(self, X, Y, ks):
        spec = self.spec
        order = spec.extras["order"]
        side = order * order
        cells, vals = side * side, side
        B = X.shape[0]
        ks = self.check_levels(ks, B)
        if X.shape != (B, spec.x_dim) or Y.shape != (B, spec.y_dim):
            raise ValueError(f"board expects x[{B},{spec.x_dim}] y[{B},{spec.y_dim}], "
                             f"got {X.shape} {Y.shape}")
        xr = np.asarray(X, dtype=np.float64).reshape(B * cells, vals + 1)
        yr = ad.reshape(Y, (B * cells, vals))
        rows = ad.concat([Tensor(xr), yr], axis=1)
        coord = ad.reshape(ad.expand(self.params["coord_emb"], 0, B),
                           (B * cells, spec.width))
        h = ad.silu(ad.add(ad.add(self._linear(rows, "w_in", "b_in"),
                                  self._level_rows(ks, B, cells)), coord))
        for i in range(spec.depth):
            pooled = [self._pool(h, P, B, cells) for P in self._pools]
            u = ad.concat([h] + pooled, axis=1)
            h = ad.add(h, ad.silu(self._linear(u, f"w_mix{i}", f"b_mix{i}")))
        o = self._linear(h, "w_out", "b_out")
        per_entry = ad.reshape(ad.mul(o, o), (B, cells * vals))
        return ad.scale(ad.sum_axis(per_entry, 1), 0.5)


def _board_pool_matrices(order: int) -> list[np.ndarray]:
    """Row, column and block mean-pooling over flattened (r, c) cells."""
    side = order * order
    cells = side * side
    row = np.zeros((cells, cells))
    col = np.zeros((cells, cells))
    blk = np.zeros((cells, cells))
    for a in range(cells):
        ra, ca = divmod(a, side)
        for b in range(cells):
            rb, cb = divmod(b, side)
            if ra == rb:
                row[a, b] = 1.0
            if ca == cb:
                col[a, b] = 1.0
            if (ra // order == rb // order) and (ca // order == cb // order):
                blk[a, b] = 1.0
    return [m / side for m in (row, col, blk)]


# ---------------------------------------------------------------------------
# edge_relational: edge features composed through intermediate nodes

class EdgeRelationalEnergy(EnergyModel):
    """Edge (i, j) features updated from max over intermediate nodes u of
    composed (i, u) and (u, j) features; size-agnostic in the node count.

    Head: max-pool over all edges then linear to a scalar, or with
    extras["l2_head"] = 1 a per-edge linear output o_e with E = 0.5*sum||o_e||^2.
    The L2 head gives every edge a gradient every step; the max-pool head
    routes each feature channel's gradient through one argmax edge only,
    which starves per-entry corrections on dense binary outputs."""

    HEAD_DIM = 4  # per-edge output width under the L2 head

    @classmethod
    def build(cls, spec: ModelSpec, rng: np.random.Generator):
        w = spec.width
        p: dict[str, np.ndarray] = {
            "w_in": _uniform(rng, 2, (2, w)),
            "b_in": _uniform(rng, 2, (w,)),
            "level_emb": _uniform(rng, w, (spec.levels + 1, w)),
        }
        for i in range(spec.depth):
            p[f"w_r{i}"] = _uniform(rng, 2 * w, (2 * w, w))
            p[f"b_r{i}"] = _uniform(rng, 2 * w, (w,))
        hd = cls.HEAD_DIM if spec.extras.get("l2_head") else 1
        p["w_out"] = _uniform(rng, w, (w, hd))
        p["b_out"] = _uniform(rng, w, (hd,))
        return cls(spec, {k: ad.tensor(v) for k, v in p.items()})

    def energy_batch(self, X, Y, ks):
        spec = self.spec
        B = X.shape[0]
        ks = self.check_levels(ks, B)
        X = np.asarray(X, dtype=np.float64)
        n = _isqrt_exact(X.shape[1])
        if n is None or Y.shape != (B, n * n):
            raise ValueError(f"edge model expects square x and matching y, "
                             f"got {X.shape} {Y.shape}")
        w = spec.width
        feats = ad.concat([ad.reshape(Tensor(X), (B * n * n, 1)),
                           ad.reshape(Y, (B * n * n, 1))], axis=1)
        h = ad.silu(ad.add(self._linear(feats, "w_in", "b_in"),
                           self._level_rows(ks, B, n * n)))
        for i in range(spec.depth):
            hb = ad.reshape(h, (B, n, n, w))
            left = ad.expand(hb, 2, n)                      # [B,i,j,u,w] = h[b,i,u]
            right = ad.transpose(ad.expand(hb, 1, n), (0, 1, 3, 2, 4))
            comp = ad.max_axis(ad.add(left, right), 3)      # max over u
            u = ad.concat([h, ad.reshape(comp, (B * n * n, w))], axis=1)
            h = ad.silu(self._linear(u, f"w_r{i}", f"b_r{i}"))
        if spec.extras.get("l2_head"):
            o = self._linear(h, "w_out", "b_out")
            per_edge = ad.reshape(ad.mul(o, o), (B, n * n * self.HEAD_DIM))
            return ad.scale(ad.sum_axis(per_edge, 1), 0.5)
        pooled = ad.max_axis(ad.reshape(h, (B, n * n, w)), 1)
        e = self._linear(pooled, "w_out", "b_out")
        return ad.reshape(e, (B,))


# ---------------------------------------------------------------------------
# plan_relational: per-step node features, adjacency messages, time stacking

class PlanRelationalEnergy(EnergyModel):
    """Node-per-step features with adjacency message passing in both edge
    directions and temporal stacking of (t-1, t, t+1); max-pool + linear,
    or a per-(step, node) L2 head via extras["l2_head"] = 1 (same dense
    gradient rationale as the edge model)."""

    HEAD_DIM = 4

    @classmethod
    def build(cls, spec: ModelSpec, rng: np.random.Generator):
        w = spec.width
        p: dict[str, np.ndarray] = {
            "w_in": _uniform(rng, 3, (3, w)),
            "b_in": _uniform(rng, 3, (w,)),
            "level_emb": _uniform(rng, w, (spec.levels + 1, w)),
        }
        for i in range(spec.depth):
            p[f"w_r{i}"] = _uniform(rng, 5 * w, (5 * w, w))
            p[f"b_r{i}"] = _uniform(rng, 5 * w, (w,))
        hd = cls.HEAD_DIM if spec.extras.get("l2_head") else 1
        p["w_out"] = _uniform(rng, w, (w, hd))
        p["b_out"] = _uniform(rng, w, (hd,))
        return cls(spec, {k: ad.tensor(v) for k, v in p.items()})

    def energy_batch(self, X, Y, ks):
        spec = self.spec
        B = X.shape[0]
        ks = self.check_levels(ks, B)
        X = np.asarray(X, dtype=np.float64)
        # n inferred from the data so one trained model covers all graph
        # sizes: x packs [adjacency n*n, start n, goal n].
        n = _isqrt_exact(X.shape[1] + 1)
        n = None if n is None else n - 1
        if (n is None or n < 2 or Y.ndim != 2 or Y.shape[0] != B
                or Y.shape[1] % n):
            raise ValueError(f"plan model expects x[n*n+2n] and y[T*n], "
                             f"got {X.shape} {Y.shape}")
        T = Y.shape[1] // n
        w = spec.width
        adj = X[:, :n * n].reshape(B, n, n)
        start = X[:, n * n:n * n + n]
        goal = X[:, n * n + n:]

        yb = ad.reshape(Y, (B, T, n, 1))
        sb = Tensor(np.repeat(start[:, None, :, None], T, axis=1))
        gb = Tensor(np.repeat(goal[:, None, :, None], T, axis=1))
        rows = ad.reshape(ad.concat([yb, sb, gb], axis=3), (B * T * n, 3))
        h = ad.silu(ad.add(self._linear(rows, "w_in", "b_in"),
                           self._level_rows(ks, B, T * n)))

        # One block-diagonal constant per direction gives every instance its
        # own adjacency in a single rank-2 matmul.
        blk = np.zeros((B * n, B * n))
        for b in range(B):
            blk[b * n:(b + 1) * n, b * n:(b + 1) * n] = adj[b]
        fwd, rev = Tensor(blk), Tensor(blk.T.copy())

        for i in range(spec.depth):
            hb = ad.reshape(h, (B, T, n, w))
            packed = ad.reshape(ad.transpose(hb, (0, 2, 1, 3)), (B * n, T * w))
            m_out = _unpack(ad.matmul(fwd, packed), B, T, n, w)
            m_in = _unpack(ad.matmul(rev, packed), B, T, n, w)
            prev = _shift_time(hb, B, T, n, w, +1)
            nxt = _shift_time(hb, B, T, n, w, -1)
            u = ad.concat([h, ad.reshape(m_out, (B * T * n, w)),
                           ad.reshape(m_in, (B * T * n, w)),
                           prev, nxt], axis=1)
            h = ad.silu(self._linear(u, f"w_r{i}", f"b_r{i}"))
        if spec.extras.get("l2_head"):
            o = self._linear(h, "w_out", "b_out")
            per_row = ad.reshape(ad.mul(o, o), (B, T * n * self.HEAD_DIM))
            return ad.scale(ad.sum_axis(per_row, 1), 0.5)
        pooled = ad.max_axis(ad.reshape(h, (B, T * n, w)), 1)
        e = self._linear(pooled, "w_out", "b_out")
        return ad.reshape(e, (B,))


def _unpack(packed: Tensor, B: int, T: int, n: int, w: int) -> Tensor:
    return ad.transpose(ad.reshape(packed, (B, n, T, w)), (0, 2, 1, 3))


def _shift_time(hb: Tensor, B: int, T: int, n: int, w: int, direction: int) -> Tensor:
    """Neighboring-step features; zero-padded at the sequence ends."""
    if T == 1:
        return ad.reshape(ad.scale(hb, 0.0), (B * T * n, w))
    if direction > 0:  # feature at t-1
        part = ad.slice_axis(hb, 1, 0, T - 1)
        shifted = ad.pad_slice(part, 1, 1, T)
    else:  # feature at t+1
        part = ad.slice_axis(hb, 1, 1, T)
        shifted = ad.pad_slice(part, 1, 0, T)
    return ad.reshape(shifted, (B * T * n, w))


# ---------------------------------------------------------------------------

_BUILDERS = {
    "mlp": MlpEnergy,
    "board": BoardEnergy,
    "edge_relational": EdgeRelationalEnergy,
    "plan_relational": PlanRelationalEnergy,
}


def build_model(spec: ModelSpec, seed: int) -> EnergyModel:
    """Deterministically initialize a model from its spec and a seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D6F64]))
    model = _BUILDERS[spec.arch].build(spec, rng)
    return model


def mlp_param_count(x_dim: int, y_dim: int, width: int, depth: int,
                    levels: int) -> int:
    """Closed-form parameter count for the mlp head (documented contract)."""
    fan0 = x_dim + y_dim
    total = fan0 * width + width            # first layer
    total += (levels + 1) * width           # level embedding
    total += (depth - 1) * (width * width + width)
    total += width + 1                      # scalar head
    return total
