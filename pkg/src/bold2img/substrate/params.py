"""Named parameter store with trainable flags."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Maps unique names to parameter tensors.

    Frozen (non-trainable) entries are guaranteed bit-identical across
    optimizer steps; ``hash_of`` exposes that as a checkable digest.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(data), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if self._trainable[n]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool):
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def freeze_all(self):
        for n in self.names():
            self.set_trainable(n, False)

    def set_trainable_by(self, predicate):
        """Set flags from a name predicate; everything else is frozen."""
        for n in self.names():
            self.set_trainable(n, bool(predicate(n)))

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def n_params(self, only_trainable: bool = False) -> int:
        names = self.trainable_names() if only_trainable else self.names()
        return int(sum(self._params[n].data.size for n in names))

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another dtype (float64 for gradient checks)."""
        out = ParamStore()
        for n in self.names():
            out.add(n, self._params[n].data.astype(dtype), self._trainable[n])
        return out

    def hash_of(self, names=None) -> str:
        h = hashlib.sha256()
        for n in sorted(names) if names is not None else self.names():
            h.update(n.encode())
            h.update(self._params[n].data.tobytes())
        return h.hexdigest()

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for n in self.names():
            out.add(n, self._params[n].data.copy(), self._trainable[n])
        return out
