"""Monomial observable dictionaries.

Basis ordering is fixed: the coordinate monomials ``x_1, ..., x_d`` come first
(those not excluded), then the constant, then every remaining monomial of
degree 2..n in graded lexicographic order (within a degree, larger exponent of
``x_1`` first).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

__all__ = ["MonomialDictionary", "UnsupportedDictionaryError", "graded_lex_indices"]


class UnsupportedDictionaryError(ValueError):
    """The dictionary cannot recover some state coordinate from a lifted point."""


def graded_lex_indices(dim: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree exactly ``degree``, graded-lex order."""
    out = []
    for combo in combinations_with_replacement(range(dim), degree):
        alpha = [0] * dim
        for j in combo:
            alpha[j] += 1
        out.append(tuple(alpha))
    return sorted(set(out), reverse=True)


def _ordered_basis(dim: int, max_degree: int, excluded: frozenset) -> tuple[tuple[int, ...], ...]:
    coords = [tuple(int(i == j) for i in range(dim)) for j in range(dim)]
    basis = [a for a in coords if a not in excluded]
    const = (0,) * dim
    if const not in excluded:
        basis.append(const)
    for deg in range(2, max_degree + 1):
        basis.extend(a for a in graded_lex_indices(dim, deg) if a not in excluded)
    return tuple(basis)


@dataclass(frozen=True)
class MonomialDictionary:
    """Monomials of total degree at most ``max_degree`` in ``dim`` variables.

    Parameters
    ----------
    dim : int
        State dimension d.
    max_degree : int
        Largest total degree n (must be >= 1).
    excluded : iterable of tuple
        Multi-indices removed from the basis, e.g. ``{(1, 0, 0)}`` drops ``x_1``.
    """

    dim: int
    max_degree: int
    excluded: frozenset = field(default_factory=frozenset)
    basis: tuple = field(init=False)

    def __post_init__(self):
        if self.dim < 1 or self.max_degree < 1:
            raise ValueError("dim and max_degree must be positive")
        excl = frozenset(tuple(int(v) for v in a) for a in self.excluded)
        for a in excl:
            if len(a) != self.dim or min(a) < 0 or sum(a) > self.max_degree:
                raise ValueError(f"excluded multi-index {a} is not a basis element")
        object.__setattr__(self, "excluded", excl)
        object.__setattr__(self, "basis", _ordered_basis(self.dim, self.max_degree, excl))
        object.__setattr__(self, "_exponents", np.array(self.basis, dtype=int).reshape(-1, self.dim))

    @classmethod
    def from_basis(cls, dim: int, max_degree: int, excluded, basis) -> "MonomialDictionary":
        """Rebuild a dictionary and check that ``basis`` matches the ordering contract."""
        out = cls(dim, max_degree, frozenset(map(tuple, excluded)))
        given = tuple(tuple(int(v) for v in a) for a in basis)
        if given != out.basis:
            raise ValueError("stored basis order does not match the dictionary ordering contract")
        return out

    @property
    def size(self) -> int:
        return len(self.basis)

    @property
    def exponents(self) -> np.ndarray:
        """Integer array of shape ``(M, d)``; row k is the multi-index of entry k."""
        return self._exponents

    def full_size(self) -> int:
        return comb(self.dim + self.max_degree, self.max_degree)

    def index(self, alpha) -> int:
        """Position of multi-index ``alpha`` in the basis."""
        return self.basis.index(tuple(int(v) for v in alpha))

    def label(self, k: int) -> str:
        alpha = self.basis[k]
        parts = [f"x{j + 1}" + (f"^{a}" if a > 1 else "") for j, a in enumerate(alpha) if a]
        return "*".join(parts) if parts else "1"

    def lift(self, x) -> np.ndarray:
        """Evaluate all monomials; ``(..., d) -> (..., M)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has length {x.shape[-1]}, dictionary expects {self.dim}")
        E = self._exponents
        out = np.ones(x.shape[:-1] + (self.size,))
        for j in range(self.dim):
            out = out * _powers(x[..., j], E[:, j])
        return out

    def jacobian(self, x) -> np.ndarray:
        """Analytic Jacobian ``dPsi_k/dx_j``; ``(..., d) -> (..., M, d)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"state has length {x.shape[-1]}, dictionary expects {self.dim}")
        E = self._exponents
        pw = [_powers(x[..., j], E[:, j]) for j in range(self.dim)]
        J = np.empty(x.shape[:-1] + (self.size, self.dim))
        for j in range(self.dim):
            col = E[:, j] * _powers(x[..., j], np.maximum(E[:, j] - 1, 0))
            for i in range(self.dim):
                if i != j:
                    col = col * pw[i]
            J[..., j] = col
        return J

    def witnesses(self) -> list[tuple[int, int]]:
        """For each coordinate j, ``(basis position, odd power)`` used to recover x_j.

        The coordinate itself is preferred; otherwise the lowest odd pure power.
        """
        out = []
        for j in range(self.dim):
            found = None
            for power in range(1, self.max_degree + 1, 2):
                alpha = tuple(power if i == j else 0 for i in range(self.dim))
                if alpha not in self.excluded:
                    found = (self.index(alpha), power)
                    break
            if found is None:
                raise UnsupportedDictionaryError(f"no odd pure power of x{j + 1} in the dictionary")
            out.append(found)
        return out

    def invert_on_manifold(self, z) -> np.ndarray:
        """Recover x from the witness entries of a lifted point ``z``."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.size:
            raise ValueError(f"lifted point has length {z.shape[-1]}, dictionary has M={self.size}")
        cols = []
        for k, power in self.witnesses():
            cols.append(z[..., k] if power == 1 else _odd_root(z[..., k], power))
        return np.stack(cols, axis=-1)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "max_degree": self.max_degree,
            "excluded": sorted(list(a) for a in self.excluded),
            "basis": [list(a) for a in self.basis],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MonomialDictionary":
        return cls.from_basis(obj["dim"], obj["max_degree"], obj["excluded"], obj["basis"])


def _powers(x: np.ndarray, exps: np.ndarray) -> np.ndarray:
    # integer powers by repeated multiplication so that x**0 == 1 even for x == 0
    x = np.asarray(x)[..., None]
    out = np.ones(x.shape[:-1] + (exps.shape[0],))
    top = int(exps.max(initial=0))
    acc = np.ones_like(x)
    for k in range(1, top + 1):
        acc = acc * x
        out = np.where(exps == k, acc, out)
    return out


def _odd_root(v, power: int):
    if power == 3:
        return np.cbrt(v)
    return np.sign(v) * np.abs(v) ** (1.0 / power)
