"""Named weight tensors with a JSON round-trip.

The JSON document maps each tensor name to ``{"shape": [...], "values": [...]}``
with values flattened row-major, plus an optional ``"__seed__"`` entry.
"""

from __future__ import annotations

import json
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch


class ParamBlock(Mapping):
    """Read-only mapping from names to float64 arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray], seed: int | None = None):
        self._tensors = {}
        for name, value in tensors.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self._tensors[name] = arr
        self.seed = seed

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self._tensors.items())
        return f"ParamBlock(seed={self.seed}, {shapes})"

    def replace(self, **updates: np.ndarray) -> "ParamBlock":
        merged = dict(self._tensors)
        for name, value in updates.items():
            if name in merged and np.shape(value) != merged[name].shape:
                raise ShapeMismatch(f"{name}: {np.shape(value)} != {merged[name].shape}")
            merged[name] = value
        return ParamBlock(merged, seed=self.seed)

    def equals(self, other: "ParamBlock") -> bool:
        return set(self) == set(other) and all(
            np.array_equal(self[k], other[k]) for k in self
        )

    def to_dict(self) -> dict:
        doc = {
            name: {"shape": list(arr.shape), "values": arr.ravel().tolist()}
            for name, arr in self._tensors.items()
        }
        if self.seed is not None:
            doc["__seed__"] = self.seed
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ParamBlock":
        seed = doc.get("__seed__")
        tensors = {}
        for name, entry in doc.items():
            if name == "__seed__":
                continue
            values = np.asarray(entry["values"], dtype=np.float64)
            shape = tuple(entry["shape"])
            if values.size != int(np.prod(shape, dtype=np.int64)):
                raise ShapeMismatch(f"{name}: {values.size} values for shape {shape}")
            tensors[name] = values.reshape(shape)
        return cls(tensors, seed=seed)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ParamBlock":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ParamBlock":
        return cls.from_json(Path(path).read_text())


def layer_norm(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def check_shape(name: str, arr: np.ndarray, shape: tuple) -> None:
    if arr.shape != shape:
        raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
