"""Shared numerics: parameter vectors, seeded random streams, median and a Jacobi eigensolver.

Matrices are plain 2-D ``float64`` numpy arrays; nothing here wraps them.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Layout = tuple[tuple[str, tuple[int, ...]], ...]


class LayoutMismatch(ValueError):
    pass


def _layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape, dtype=np.int64)) for _, shape in layout))


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flattened model parameters plus the (name, shape) layout needed to unflatten them."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in self.layout)
        if values.size != _layout_size(layout):
            raise ValueError(
                f"values length {values.size} does not match layout size {_layout_size(layout)}"
            )
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def tensors(self) -> dict[str, np.ndarray]:
        out, start = {}, 0
        for name, shape in self.layout:
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = self.values[start:start + size].reshape(shape)
            start += size
        return out

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    @classmethod
    def from_tensors(cls, tensors: Sequence[tuple[str, np.ndarray]]) -> "ParamVector":
        layout = tuple((name, np.shape(t)) for name, t in tensors)
        if not tensors:
            return cls(np.zeros(0), ())
        values = np.concatenate([np.asarray(t, dtype=np.float64).reshape(-1) for _, t in tensors])
        return cls(values, layout)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def to_dict(self) -> dict:
        return {
            "layout": [[name, list(shape)] for name, shape in self.layout],
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamVector":
        layout = tuple((name, tuple(shape)) for name, shape in d["layout"])
        return cls(np.asarray(d["values"], dtype=np.float64), layout)


def check_layouts(vectors: Iterable[ParamVector]) -> Layout:
    """Return the common layout or raise naming the first differing tensor."""
    vectors = list(vectors)
    if not vectors:
        raise ValueError("no parameter vectors given")
    ref = vectors[0].layout
    for k, v in enumerate(vectors[1:], start=1):
        if v.layout == ref:
            continue
        for i in range(max(len(ref), len(v.layout))):
            a = ref[i] if i < len(ref) else None
            b = v.layout[i] if i < len(v.layout) else None
            if a != b:
                name = (a or b)[0]
                raise LayoutMismatch(
                    f"layout mismatch in vector {k} at tensor {name!r}: expected {a}, got {b}"
                )
    return ref


def stack(vectors: Sequence[ParamVector]) -> np.ndarray:
    check_layouts(vectors)
    return np.stack([v.values for v in vectors])


def linear_combine(terms: Sequence[tuple[float, ParamVector]]) -> ParamVector:
    """Elementwise sum of coefficient * vector over all terms."""
    if not terms:
        raise ValueError("linear_combine needs at least one term")
    layout = check_layouts([p for _, p in terms])
    out = np.zeros(terms[0][1].values.size)
    for c, p in terms:
        out += float(c) * p.values
    return ParamVector(out, layout)


def coordinate_median(vectors: Sequence[ParamVector]) -> ParamVector:
    """Per-coordinate median; an even count averages the two central order statistics."""
    if not vectors:
        raise ValueError("coordinate_median needs at least one vector")
    layout = check_layouts(vectors)
    return ParamVector(np.median(stack(vectors), axis=0), layout)


def symmetric_eigen(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100):
    """Eigen-decompose a symmetric matrix with cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted descending and
    eigenvectors as columns, so ``a ~= Q @ diag(w) @ Q.T``.
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > 256:
        raise ValueError(f"dimension {n} exceeds the supported maximum of 256")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    scale = max(np.max(np.abs(a)), 1.0) if n else 1.0
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > 1e-10 * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    a = 0.5 * (a + a.T)
    q = np.eye(n)
    if n < 2:
        return np.diag(a).copy(), q

    total = np.sqrt(np.sum(a * a))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[offmask] ** 2))
        if off <= tol * total or off == 0.0:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300 or abs(apr) < 1e-18 * (abs(a[p, p]) + abs(a[r, r])):
                    a[p, r] = a[r, p] = 0.0
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate columns p, r then rows p, r
                ap, ar = a[:, p].copy(), a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap, ar = a[p, :].copy(), a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                a[p, r] = a[r, p] = 0.0
                qp, qr = q[:, p].copy(), q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], q[:, order]


@dataclass
class RngStream:
    """Seeded PCG64 stream keyed by ``(seed, stream_id)``.

    Not thread-safe: each task derives its own stream with :meth:`derive`.
    """

    seed: int
    stream_id: int = 0
    gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(self.stream_id) & 0xFFFFFFFFFFFFFFFF
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys: int) -> "RngStream":
        """A new independent stream determined only by this stream's identity and ``keys``."""
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *map(int, keys)))
        return RngStream(self.seed, int(ss.generate_state(2, np.uint64)[0]))

    def random(self, size=None):
        return self.gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def dirichlet(self, alpha, size=None):
        return self.gen.dirichlet(alpha, size)

    def multinomial(self, n, pvals, size=None):
        return self.gen.multinomial(n, pvals, size)

    def bits64(self, n: int) -> np.ndarray:
        return self.gen.integers(0, 2**64 - 1, size=n, dtype=np.uint64, endpoint=True)
