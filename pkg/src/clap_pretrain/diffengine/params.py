"""Named trainable tensors."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .core import DiffValue, EngineError, Tape


class ParamSet:
    """Ordered mapping of unique names to float64 arrays with fixed shapes."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> None:
        if name in self._arrays:
            raise EngineError(f"duplicate parameter name '{name}'")
        self._arrays[name] = np.array(array, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array) -> None:
        array = np.asarray(array, dtype=np.float64)
        if name not in self._arrays:
            raise EngineError(f"unknown parameter '{name}'")
        if array.shape != self._arrays[name].shape:
            raise EngineError(f"parameter '{name}' has fixed shape {self._arrays[name].shape}, got {array.shape}")
        self._arrays[name] = array.copy()

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._arrays.items()}

    def group(self, prefix: str) -> list[str]:
        return [n for n in self._arrays if n.startswith(prefix + ".")]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def bind(self, tape: Tape, names=None) -> dict[str, DiffValue]:
        """Register parameters as named leaves; others are returned as constants."""
        chosen = set(self._arrays if names is None else names)
        return {
            k: (tape.leaf(k, v) if k in chosen else DiffValue(v))
            for k, v in self._arrays.items()
        }

    def constants(self) -> dict[str, DiffValue]:
        return {k: DiffValue(v) for k, v in self._arrays.items()}
