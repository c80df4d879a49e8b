"""Named parameter collection with trainability groups."""

from collections import OrderedDict

import numpy as np

from .errors import NameCollisionError, StructuralError
from .numerics import Tensor, seeded_normal, stream_id

INIT_STD = 0.02


class ParamStore:
    """Ordered ``name -> Tensor`` map; every tensor belongs to one group.

    Weights are drawn from ``seeded_normal`` on a sub-stream keyed by the
    parameter name, so initial values do not depend on creation order.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._tensors = OrderedDict()
        self._groups = {}

    def _add(self, name, data, group):
        if name in self._tensors:
            raise NameCollisionError(f"parameter {name!r} already exists")
        t = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = t
        self._groups[name] = group
        return t

    def normal(self, name, shape, group, std=INIT_STD):
        return self._add(name, seeded_normal(shape, self.seed, std, stream_id(name)).data, group)

    def zeros(self, name, shape, group):
        return self._add(name, np.zeros(shape), group)

    def ones(self, name, shape, group):
        return self._add(name, np.ones(shape), group)

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def group_of(self, name):
        return self._groups[name]

    def groups(self):
        return sorted(set(self._groups.values()))

    def in_groups(self, groups):
        return [t for n, t in self._tensors.items() if self._groups[n] in groups]

    def set_trainable(self, groups):
        """Only parameters whose group is in ``groups`` will receive gradients."""
        groups = set(groups)
        for name, t in self._tensors.items():
            t.requires_grad = self._groups[name] in groups

    def trainable(self):
        return [t for t in self._tensors.values() if t.requires_grad]

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._tensors.items())

    def load_state(self, state):
        """Copy arrays in place; every name and shape must match."""
        missing = [n for n in self._tensors if n not in state]
        extra = [n for n in state if n not in self._tensors]
        bad = [f"{n}: expected {t.shape}, got {np.shape(state[n])}"
               for n, t in self._tensors.items() if n in state and np.shape(state[n]) != t.shape]
        if missing or extra or bad:
            parts = []
            if missing:
                parts.append(f"missing {missing}")
            if extra:
                parts.append(f"unexpected {extra}")
            if bad:
                parts.append("shape mismatch: " + "; ".join(bad))
            raise StructuralError("parameter state does not fit model: " + ", ".join(parts))
        for n, t in self._tensors.items():
            t.data[...] = state[n]

    def count(self):
        return int(sum(t.data.size for t in self._tensors.values()))
