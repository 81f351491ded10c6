"""Parameter registry: named groups with freeze flags, hashing, checkpoint IO.

A ModelState is the single owner of all trainable tensors. The four group
names are fixed; modules register their parameters into groups so the
optimizer, the freeze logic and checkpointing never need to know about
module structure.

Checkpoint format (version 1): a UTF-8 text manifest terminated by a line
"END", followed by the raw payload of all tensors concatenated in manifest
order as little-endian float32.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

GROUP_NAMES = ("backbone", "connector", "depth_head", "action_expert")

CKPT_MAGIC = "GENSUPCKPT"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass
class ParamGroup:
    name: str
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)
    frozen: bool = False

    def add(self, tensor_name: str, tensor: torch.Tensor) -> None:
        if tensor_name in self.tensors:
            raise ValueError(f"duplicate tensor name {tensor_name!r} in group {self.name!r}")
        self.tensors[tensor_name] = tensor

    def named(self) -> list[tuple[str, torch.Tensor]]:
        """Tensors in manifest order (sorted by name)."""
        return sorted(self.tensors.items())

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


@dataclass
class ModelState:
    groups: dict[str, ParamGroup] = field(default_factory=dict)
    step: int = 0
    # AdamW moment buffers, keyed "group/tensor" -> (m, v); reset at stage starts.
    moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def add_group(self, group: ParamGroup) -> None:
        if group.name not in GROUP_NAMES:
            raise ValueError(f"unknown group name {group.name!r}; expected one of {GROUP_NAMES}")
        if group.name in self.groups:
            raise ValueError(f"duplicate group {group.name!r}")
        self.groups[group.name] = group

    def unfrozen(self) -> list[ParamGroup]:
        return [g for g in self.groups.values() if not g.frozen]

    def set_trainable(self, trainable: set[str] | tuple[str, ...] | list[str]) -> None:
        """Freeze everything not listed; sync requires_grad with the flags."""
        trainable = set(trainable)
        unknown = trainable - set(self.groups)
        if unknown:
            raise ValueError(f"unknown trainable groups: {sorted(unknown)}")
        for g in self.groups.values():
            g.frozen = g.name not in trainable
            for t in g.tensors.values():
                t.requires_grad_(not g.frozen)

    def reset_moments(self) -> None:
        self.moments.clear()

    def all_finite(self) -> bool:
        return all(torch.isfinite(t).all() for g in self.groups.values() for t in g.tensors.values())


def group_bytes(group: ParamGroup) -> bytes:
    """Serialized little-endian float32 bytes of the group, in manifest order."""
    parts = []
    for _, t in group.named():
        arr = t.detach().cpu().to(torch.float32).numpy()
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def group_hash(group: ParamGroup) -> str:
    return hashlib.sha256(group_bytes(group)).hexdigest()


def state_hashes(state: ModelState) -> dict[str, str]:
    return {name: group_hash(g) for name, g in sorted(state.groups.items())}


def save_checkpoint(state: ModelState, path: str | Path, meta: dict[str, str] | None = None) -> None:
    """Write manifest + payload. `meta` values must be single-line strings."""
    path = Path(path)
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}", f"step {state.step}"]
    for key, value in sorted((meta or {}).items()):
        value = str(value)
        if "\n" in value:
            raise ValueError(f"meta value for {key!r} must be single-line")
        lines.append(f"meta {key} {value}")
    payload = []
    offset = 0
    for gname in sorted(state.groups):
        g = state.groups[gname]
        lines.append(f"group {gname} frozen={int(g.frozen)}")
        for tname, t in g.named():
            arr = np.ascontiguousarray(t.detach().cpu().to(torch.float32).numpy(), dtype="<f4")
            shape = " ".join(str(s) for s in arr.shape) if arr.ndim else ""
            lines.append(f"tensor {gname} {tname} float32 {offset} {arr.ndim} {shape}".rstrip())
            payload.append(arr.tobytes())
            offset += arr.size
    lines.append("END")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in payload:
            f.write(blob)


@dataclass
class Checkpoint:
    step: int
    meta: dict[str, str]
    frozen: dict[str, bool]
    tensors: dict[str, dict[str, np.ndarray]]  # group -> name -> float32 array

    def require_meta(self, key: str) -> str:
        if key not in self.meta:
            raise CheckpointError(f"checkpoint missing meta key {key!r}")
        return self.meta[key]


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    end_marker = b"\nEND\n"
    idx = raw.find(end_marker)
    if idx < 0:
        raise CheckpointError(f"{path}: no END marker; not a checkpoint file")
    header = raw[:idx].decode("utf-8").splitlines()
    payload = raw[idx + len(end_marker):]
    first = header[0].split()
    if len(first) != 2 or first[0] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {header[0]!r}")
    if int(first[1]) != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {first[1]}")
    flat = np.frombuffer(payload, dtype="<f4")
    step = 0
    meta: dict[str, str] = {}
    frozen: dict[str, bool] = {}
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for line in header[1:]:
        parts = line.split()
        if parts[0] == "step":
            step = int(parts[1])
        elif parts[0] == "meta":
            meta[parts[1]] = line.split(" ", 2)[2]
        elif parts[0] == "group":
            frozen[parts[1]] = bool(int(parts[2].split("=")[1]))
            tensors[parts[1]] = {}
        elif parts[0] == "tensor":
            gname, tname, dtype, offset, ndim = parts[1], parts[2], parts[3], int(parts[4]), int(parts[5])
            if dtype != "float32":
                raise CheckpointError(f"{path}: unsupported dtype {dtype}")
            shape = tuple(int(s) for s in parts[6:6 + ndim])
            size = int(np.prod(shape)) if shape else 1
            tensors[gname][tname] = flat[offset:offset + size].reshape(shape).copy()
        else:
            raise CheckpointError(f"{path}: unrecognized manifest line {line!r}")
    return Checkpoint(step=step, meta=meta, frozen=frozen, tensors=tensors)


def load_into_state(ckpt: Checkpoint, state: ModelState, groups: list[str] | None = None) -> None:
    """Copy checkpoint tensors into matching state tensors (shape-checked)."""
    names = groups if groups is not None else sorted(state.groups)
    for gname in names:
        if gname not in ckpt.tensors:
            raise CheckpointError(f"checkpoint has no group {gname!r}")
        g = state.groups[gname]
        saved = ckpt.tensors[gname]
        if set(saved) != set(g.tensors):
            missing = set(g.tensors) ^ set(saved)
            raise CheckpointError(f"group {gname!r}: tensor name mismatch {sorted(missing)}")
        for tname, arr in saved.items():
            t = g.tensors[tname]
            if tuple(arr.shape) != tuple(t.shape):
                raise ShapeMismatchError(
                    f"{gname}/{tname}: checkpoint shape {tuple(arr.shape)} vs model {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(arr))


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
