"""Flat parameter vectors and lower-triangular factor packing.

Weighting matrices are learned through Cholesky-style factors ``M = L L^T``
whose packed lower triangle lives in a slice of a :class:`ThetaVector`.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

DIAG_FLOOR = 1e-4


def tril_size(n: int) -> int:
    return n * (n + 1) // 2


@lru_cache(maxsize=None)
def _tril(n: int):
    rows, cols = np.tril_indices(n)
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def pack_tril(L) -> np.ndarray:
    L = np.atleast_2d(L)
    return L[_tril(L.shape[0])].copy()


def unpack_tril(v, n: int) -> np.ndarray:
    L = np.zeros((n, n))
    L[_tril(n)] = v
    return L


def factor_product(v, n: int) -> np.ndarray:
    L = unpack_tril(v, n)
    return L @ L.T


def factor_product_derivatives(v, n: int) -> np.ndarray:
    """``dM/dv_k`` for ``M = L L^T``, stacked along axis 0."""
    L = unpack_tril(v, n)
    rows, cols = _tril(n)
    out = np.zeros((rows.size, n, n))
    for k, (a, b) in enumerate(zip(rows, cols)):
        # E_ab L^T + L E_ba
        out[k, a, :] += L[:, b]
        out[k, :, a] += L[:, b]
    return out


def diag_positions(n: int) -> np.ndarray:
    rows, cols = _tril(n)
    return np.flatnonzero(rows == cols)


def floor_factor(v, n: int, floor: float = DIAG_FLOOR) -> np.ndarray:
    v = np.array(v, dtype=float)
    idx = diag_positions(n)
    v[idx] = np.maximum(v[idx], floor)
    return v


def chol_factor(M) -> np.ndarray:
    """Packed lower Cholesky factor of a symmetric positive definite matrix."""
    return pack_tril(np.linalg.cholesky(np.atleast_2d(M)))


@dataclass
class ThetaVector:
    """Flat real vector with named, non-overlapping slices.

    ``kinds`` records how each slice is projected after an update:
    ``"factor"`` slices (packed ``n x n`` factors) have their diagonal
    floored, ``"box"`` slices are clipped to ``[-bound, bound]`` (scalar or per entry).
    """

    values: np.ndarray
    layout: dict[str, slice]
    kinds: dict[str, tuple]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        covered = np.zeros(self.values.size, dtype=int)
        for s in self.layout.values():
            covered[s] += 1
        if np.any(covered != 1):
            raise ValueError("theta slices must be non-overlapping and exhaustive")

    @classmethod
    def from_slices(cls, slices: list[tuple[str, np.ndarray, tuple]]) -> "ThetaVector":
        layout, kinds, parts, start = {}, {}, [], 0
        for name, value, kind in slices:
            value = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
            layout[name] = slice(start, start + value.size)
            kinds[name] = kind
            parts.append(value)
            start += value.size
        values = np.concatenate(parts) if parts else np.zeros(0)
        return cls(values, layout, kinds)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def names(self) -> list[str]:
        return list(self.layout)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.layout[name]]

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def copy(self) -> "ThetaVector":
        return ThetaVector(self.values.copy(), dict(self.layout), dict(self.kinds))

    def replace(self, **slices) -> "ThetaVector":
        out = self.copy()
        for name, value in slices.items():
            out.values[out.layout[name]] = value
        return out

    def indices(self, names) -> np.ndarray:
        """Flat indices covered by ``names`` in layout order."""
        names = set(names)
        unknown = names - set(self.layout)
        if unknown:
            raise KeyError(f"unknown theta slices: {sorted(unknown)}")
        idx = [np.arange(s.start, s.stop) for n, s in self.layout.items() if n in names]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)

    def project(self) -> "ThetaVector":
        out = self.copy()
        for name, kind in self.kinds.items():
            s = out.layout[name]
            if kind[0] == "factor":
                out.values[s] = floor_factor(out.values[s], kind[1])
            elif kind[0] == "box":
                bound = np.asarray(kind[1], dtype=float)
                out.values[s] = np.clip(out.values[s], -bound, bound)
        return out

    def slice_norms(self) -> dict[str, float]:
        return {name: float(np.linalg.norm(self[name])) for name in self.layout}

    def to_json(self) -> dict:
        return {
            "values": self.values.tolist(),
            "layout": {n: [s.start, s.stop] for n, s in self.layout.items()},
            "kinds": {n: list(k) for n, k in self.kinds.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ThetaVector":
        try:
            layout = {n: slice(int(a), int(b)) for n, (a, b) in data["layout"].items()}
            kinds = {n: tuple(k) for n, k in data.get("kinds", {}).items()}
            values = np.asarray(data["values"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed theta snapshot: {exc}") from exc
        for n in layout:
            kinds.setdefault(n, ("free",))
        if not np.all(np.isfinite(values)):
            raise ValueError("malformed theta snapshot: non-finite values")
        return cls(values, layout, kinds)
