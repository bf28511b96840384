"""Elementary numerics shared by every other module.

Everything is plain float64 numpy plus a hand-rolled SplitMix64 generator.
The generator exists so that a run is reproducible down to the last bit:
given the same seed, the stream of draws is identical on every platform,
which numpy's own generators do not promise across versions.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1

_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def sigmoid(x):
    """Elementwise logistic function, safe for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    # exp of a non-positive argument never overflows
    pos = 1.0 / (1.0 + np.exp(-np.abs(x)))
    return np.where(x >= 0.0, pos, 1.0 - pos)


def apply_activation(kind, v):
    """Apply a named activation ("sigmoid" or "tanh") elementwise."""
    if kind == "sigmoid":
        return sigmoid(v)
    if kind == "tanh":
        return np.tanh(np.asarray(v, dtype=np.float64))
    raise ValueError(f"unknown activation kind: {kind!r}")


def matvec(m, v):
    """Matrix-vector product with an explicit dimension check.

    Elements of the output are dot products accumulated in ascending
    column order, so repeated calls are bit-identical.
    """
    m = np.asarray(m, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(
            f"matvec dimension mismatch: matrix {m.shape} times vector {v.shape}"
        )
    return m @ v


def softmax(logits):
    """Stable softmax of a 1-D logit vector (max subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def softmax_xent(logits, label):
    """Cross-entropy of a softmax over `logits` against the index `label`.

    Returns (loss, grad) where grad = softmax(logits) - onehot(label).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"logits must be 1-D, got shape {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    e = np.exp(z)
    total = e.sum()
    loss = math.log(total) - z[label]
    grad = e / total
    grad[label] -= 1.0
    return loss, grad


def softmax_xent_rows(logits, labels):
    """Row-wise softmax cross-entropy for a (T, K) logit matrix.

    `labels` holds one class index per row. Returns (losses, grads) with
    losses shaped (T,) and grads shaped like `logits`.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(
            f"expected (T, K) logits and (T,) labels, got {logits.shape} and {labels.shape}"
        )
    if logits.shape[0] and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels out of range for {logits.shape[1]} classes")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1)
    rows = np.arange(logits.shape[0])
    losses = np.log(total) - z[rows, labels]
    grads = e / total[:, None]
    grads[rows, labels] -= 1.0
    return losses, grads


class SplitMix64:
    """SplitMix64 generator: one u64 of state, a fixed affine step, a fixed mix.

    The update is state += 0x9E3779B97F4A7C15 (mod 2^64); the output mix is
    the standard two-round xor-multiply. Uniform doubles take the top 53 bits.
    """

    __slots__ = ("state",)

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next_u64(self):
        """Next raw 64-bit output."""
        self.state = (self.state + _GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & MASK64
        return (z ^ (z >> 31)) & MASK64

    def uniform(self, lo=0.0, hi=1.0):
        """One double in [lo, hi)."""
        if not lo < hi:
            raise ValueError(f"empty interval [{lo}, {hi})")
        u = (self.next_u64() >> 11) * 2.0**-53
        return lo + (hi - lo) * u

    def uniform_array(self, n, lo=0.0, hi=1.0):
        """n sequential uniform draws as a float64 array."""
        return np.array([self.uniform(lo, hi) for _ in range(n)], dtype=np.float64)

    def randint(self, n):
        """One integer uniform on {0, ..., n-1}."""
        if n <= 0:
            raise ValueError(f"randint needs a positive bound, got {n}")
        return int((self.next_u64() >> 11) * 2.0**-53 * n)

    def gauss(self, sigma=1.0):
        """One N(0, sigma^2) draw via Box-Muller (cosine branch only).

        Two uniforms are consumed per draw; u1 is shifted into (0, 1] so the
        log never sees zero. Single-branch keeps the stream stateless beyond
        the u64 counter.
        """
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = (self.next_u64() >> 11) * 2.0**-53
        return sigma * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def shuffle(self, items):
        """In-place Fisher-Yates shuffle of a mutable sequence."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed, stream):
    """Child seed for an independent purpose-specific stream.

    (seed, stream) is hashed through one SplitMix64 output so sibling
    streams neither collide nor overlap shifted copies of each other.
    """
    mixed = (int(seed) * _GAMMA + int(stream) * _MIX1 + _MIX2) & MASK64
    return SplitMix64(mixed).next_u64()
