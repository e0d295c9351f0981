"""Checkpoint persistence: one JSON manifest line plus a raw float64 blob.

A checkpoint carries everything needed to replay evaluation exactly: the
model spec, every parameter array, the schedule values, the training
iteration, and a digest identifying the training RNG position. Values are
stored as raw little-endian 64-bit floats so a round trip is bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ebsolve.models import EnergyModel, ModelSpec, build_model
from ebsolve.schedule import NoiseSchedule
from ebsolve.training import AdamState
from ebsolve.util import atomic_write_bytes, canonical_json, config_hash

CHECKPOINT_FORMAT = "ebsolve-checkpoint-v1"

_ADAM_M = "adam_m/"
_ADAM_V = "adam_v/"


@dataclass(frozen=True)
class Checkpoint:
    """In-memory image of one checkpoint file."""

    spec: ModelSpec
    alpha_bar: np.ndarray
    arrays: dict[str, np.ndarray] = field(repr=False)
    iteration: int = 0
    adam_t: int | None = None
    rng_digest: str = ""

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items()
                if not k.startswith((_ADAM_M, _ADAM_V))}

    def has_adam(self) -> bool:
        return self.adam_t is not None


def training_rng_digest(seed: int, iteration: int) -> str:
    """Identifies the position of the counter-based training stream."""
    return config_hash(["train-rng", seed, iteration])


def from_training(model: EnergyModel, sched: NoiseSchedule, iteration: int,
                  seed: int, adam: AdamState | None = None) -> Checkpoint:
    arrays = dict(model.param_arrays())
    adam_t = None
    if adam is not None:
        arrays.update(adam.arrays())
        adam_t = adam.t
    return Checkpoint(spec=model.spec, alpha_bar=sched.alpha_bar.copy(),
                      arrays=arrays, iteration=int(iteration), adam_t=adam_t,
                      rng_digest=training_rng_digest(seed, iteration))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = sorted(ckpt.arrays)
    table = []
    chunks = []
    offset = 0
    for name in names + ["schedule/alpha_bar"]:
        arr = (ckpt.alpha_bar if name == "schedule/alpha_bar"
               else ckpt.arrays[name])
        arr = np.asarray(arr, dtype=np.float64)
        table.append([name, list(arr.shape), offset])
        chunks.append(arr.astype("<f8", copy=False).tobytes())
        offset += arr.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": ckpt.spec.to_dict(),
        "iteration": ckpt.iteration,
        "adam_t": ckpt.adam_t,
        "rng_digest": ckpt.rng_digest,
        "arrays": table,
        "total_values": offset,
    }
    blob = canonical_json(manifest).encode() + b"\n" + b"".join(chunks)
    atomic_write_bytes(str(path), blob)


def load_checkpoint(path) -> Checkpoint:
    import json

    with open(path, "rb") as fh:
        raw = fh.read()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise ValueError(f"{path}: not a checkpoint file (no manifest line)")
    manifest = json.loads(head.decode())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: format {manifest.get('format')!r} != "
                         f"{CHECKPOINT_FORMAT!r}")
    total = int(manifest["total_values"])
    if len(body) != 8 * total:
        raise ValueError(f"{path}: blob holds {len(body)} bytes, "
                         f"manifest expects {8 * total}")
    arrays: dict[str, np.ndarray] = {}
    alpha_bar = None
    for name, shape, offset in manifest["arrays"]:
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        vals = np.frombuffer(body, dtype="<f8", count=size,
                             offset=8 * int(offset))
        vals = vals.astype(np.float64).reshape([int(s) for s in shape])
        if name == "schedule/alpha_bar":
            alpha_bar = vals
        else:
            arrays[name] = vals
    if alpha_bar is None:
        raise ValueError(f"{path}: missing schedule values")
    return Checkpoint(spec=ModelSpec.from_dict(manifest["spec"]),
                      alpha_bar=alpha_bar, arrays=arrays,
                      iteration=int(manifest["iteration"]),
                      adam_t=(None if manifest["adam_t"] is None
                              else int(manifest["adam_t"])),
                      rng_digest=str(manifest["rng_digest"]))


def restore_model(ckpt: Checkpoint) -> tuple[EnergyModel, NoiseSchedule]:
    """Rebuild the model and schedule a checkpoint was saved from."""
    model = build_model(ckpt.spec, seed=0)
    model.load_arrays(ckpt.param_arrays())
    return model, NoiseSchedule(ckpt.alpha_bar)


def restore_adam(ckpt: Checkpoint, model: EnergyModel) -> AdamState:
    if not ckpt.has_adam():
        raise ValueError("checkpoint holds no optimizer state")
    m = {}
    v = {}
    for name in model.params:
        m[name] = ckpt.arrays[_ADAM_M + name].copy()
        v[name] = ckpt.arrays[_ADAM_V + name].copy()
    return AdamState(m=m, v=v, t=int(ckpt.adam_t))
