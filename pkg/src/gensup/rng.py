"""Deterministic, named random streams.

Every source of randomness in the project (parameter init, scene layout,
flow-matching noise and timesteps, batch order, evaluation noise) draws from
an RngStream keyed by (seed, stream_id). Streams are counter-based (Philox),
so the same key reproduces the same draw sequence regardless of how other
streams were consumed.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _stream_key(seed: int, stream_id: str) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{stream_id}".encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class RngStream:
    """A named Philox stream. Same (seed, stream_id) -> same draws, anywhere."""

    def __init__(self, seed: int, stream_id: str = "root"):
        self.seed = int(seed)
        self.stream_id = str(stream_id)
        self._gen = np.random.Generator(np.random.Philox(key=_stream_key(self.seed, self.stream_id)))

    def child(self, name: str) -> "RngStream":
        """Derive an independent stream; children never collide with the parent."""
        return RngStream(self.seed, f"{self.stream_id}/{name}")

    # numpy draws ---------------------------------------------------------

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high), numpy convention."""
        return self._gen.integers(low, high, size=shape)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def shuffled(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # torch draws ---------------------------------------------------------

    def torch_normal(self, shape, dtype=torch.float32) -> torch.Tensor:
        np_dtype = np.float64 if dtype == torch.float64 else np.float32
        return torch.from_numpy(np.ascontiguousarray(self.normal(shape, dtype=np_dtype))).to(dtype)

    def torch_uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(np.ascontiguousarray(self.uniform(low, high, shape))).to(dtype)
