"""Central-difference gradient checking against the tape."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class GradCheckResult:
    max_rel_err: float
    worst_param: str | None = None
    worst_index: tuple | None = None
    per_param: dict = field(default_factory=dict)
    coords: int = 0

    def __float__(self):
        return self.max_rel_err


def _scalar(t):
    if t.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {t.shape}")
    return float(t.data.reshape(()))


def _label(p, i):
    return p.name if p.name else f"param[{i}]"


def grad_check(f, params, eps=1e-6, guard=1e-12):
    """Compare tape gradients of scalar ``f()`` with central differences.

    Returns the maximum over every coordinate of every parameter of
    ``|analytic - numeric| / (|analytic| + |numeric| + guard)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError("loss is non-finite at the base point")
    tape.backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    result = GradCheckResult(max_rel_err=0.0)
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        an = analytic[i].reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = _scalar(f())
            flat[j] = orig - eps
            fm = _scalar(f())
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteLossError(
                    f"non-finite loss while perturbing {_label(p, i)} at flat index {j}")
            num = (fp - fm) / (2.0 * eps)
            err = abs(an[j] - num) / (abs(an[j]) + abs(num) + guard)
            if err > worst:
                worst = err
            if err > result.max_rel_err:
                result.max_rel_err = err
                result.worst_param = _label(p, i)
                result.worst_index = np.unravel_index(j, p.shape)
        result.per_param[_label(p, i)] = worst
        result.coords += flat.size
    return result
