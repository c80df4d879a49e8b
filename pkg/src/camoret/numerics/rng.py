"""Counter-based random streams.

All randomness in the package flows through :class:`Stream`, which is defined
entirely in terms of the Philox4x32-10 counter generator so that other
implementations can reproduce every draw:

* key: 128 bits, low 64 bits = ``seed``, high 64 bits = ``stream`` id;
  counter starts at zero.
* raw words: 64-bit outputs in numpy's ``Philox.random_raw`` order.
* uniform double: ``(raw >> 11) * 2**-53``, in [0, 1).
* normal: Box-Muller over consecutive uniform pairs ``(u1, u2)``:
  ``r = sqrt(-2 ln(1 - u1))``, yielding ``r cos(2 pi u2)`` then
  ``r sin(2 pi u2)``.
* integers in [lo, hi): ``lo + floor(u * (hi - lo))``.
* permutation of n: stable argsort of n uniforms.

Named sub-streams are keyed by the CRC32 of their UTF-8 name.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id(name):
    """Stable 32-bit id for a named sub-stream."""
    return zlib.crc32(name.encode("utf-8"))


class Stream:
    """A deterministic draw sequence for a ``(seed, stream)`` key."""

    def __init__(self, seed, stream=0):
        if isinstance(stream, str):
            stream = stream_id(stream)
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed | (self.stream << 64))

    def raw(self, n):
        return self._bitgen.random_raw(int(n))

    def uniform(self, size=None, low=0.0, high=1.0):
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u = low + (high - low) * u
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size, std=1.0, mean=0.0):
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform((m, 2))
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((m, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return mean + std * z.reshape(-1)[:n].reshape(size)

    def integers(self, low, high, size=None):
        u = self.uniform(size)
        return (low + np.floor(np.asarray(u) * (high - low))).astype(np.int64) if size is not None \
            else int(low + np.floor(u * (high - low)))

    def choice(self, n):
        """Index in ``range(n)``."""
        return self.integers(0, n)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def child(self, name):
        """Independent stream keyed by this seed and a derived name."""
        return Stream(self.seed, stream_id(f"{self.stream}/{name}"))


def seeded_normal(shape, seed, std, stream=0):
    """Deterministic normal tensor data for ``(shape, seed, std)``."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    return Stream(seed, stream).normal(tuple(shape), std=std)
