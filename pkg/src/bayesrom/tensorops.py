"""Index arithmetic and compressed quadratic products for quadratic models.

A quadratic model term acts on the Kronecker square ``q (x) q`` of the reduced
state, which has only ``r(r+1)/2`` independent entries by symmetry. This
module fixes a compressed representation of that square and the bookkeeping
needed to size and slice the regression data matrix.

Conventions (frozen; file formats depend on them):

* Pair ordering: unordered pairs ``(a, b)`` with ``a <= b`` are enumerated
  with ``a`` ascending and, within each ``a``, ``b`` ascending, so each run
  starts on the diagonal: ``(0,0), (0,1), ..., (0,r-1), (1,1), (1,2), ...``
* Off-diagonal scaling: the compressed square carries a factor 2 on
  off-diagonal products, ``ckron(q)[(a,b)] = 2 q_a q_b`` for ``a < b`` and
  ``q_a^2`` on the diagonal. A learned compressed row ``h`` then satisfies
  ``h @ ckron(q) == F @ (q (x) q)`` where ``F`` is the symmetric full
  operator row with ``F[a,b] = h[(min(a,b), max(a,b))]``.
"""

__all__ = [
    "StructureFlags",
    "CompressedQuadIndex",
    "d_dim",
    "compressed_kron",
    "khatri_rao_compressed",
    "expand_compressed",
    "compressed_to_full",
    "full_to_compressed",
]

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class StructureFlags:
    """Which blocks the model (and hence the data matrix) contains.

    Parameters
    ----------
    has_linear : bool
        Include the linear block (width r).
    has_quadratic : bool
        Include the compressed quadratic block (width r(r+1)/2).
    input_dim : int
        Width m >= 0 of the input block; m = 0 means no inputs.
    has_constant : bool
        Include the constant block (width 1).
    """

    has_linear: bool = False
    has_quadratic: bool = False
    input_dim: int = 0
    has_constant: bool = False

    def __post_init__(self):
        if self.input_dim < 0:
            raise ValueError("input_dim must be nonnegative")
        if not (
            self.has_linear
            or self.has_quadratic
            or self.has_constant
            or self.input_dim > 0
        ):
            raise ValueError("at least one model block must be enabled")

    @property
    def has_input(self) -> bool:
        return self.input_dim > 0

    @classmethod
    def quadratic_only(cls):
        return cls(has_quadratic=True)

    @classmethod
    def full(cls, input_dim=0):
        return cls(
            has_linear=True,
            has_quadratic=True,
            input_dim=input_dim,
            has_constant=True,
        )

    def block_widths(self, r: int) -> dict:
        """Widths of the enabled blocks, keyed by block name, in the fixed
        column order linear, quadratic, input, constant."""
        widths = {}
        if self.has_linear:
            widths["linear"] = r
        if self.has_quadratic:
            widths["quadratic"] = r * (r + 1) // 2
        if self.has_input:
            widths["input"] = self.input_dim
        if self.has_constant:
            widths["constant"] = 1
        return widths

    def block_slices(self, r: int) -> dict:
        """Column slices of the enabled blocks in the data matrix."""
        slices, offset = {}, 0
        for name, width in self.block_widths(r).items():
            slices[name] = slice(offset, offset + width)
            offset += width
        return slices


def d_dim(r: int, flags: StructureFlags) -> int:
    """Number of columns of the data matrix (length of one operator row)."""
    if r < 1:
        raise ValueError(f"r must be positive, got {r}")
    return sum(flags.block_widths(r).values())


@dataclass(frozen=True)
class CompressedQuadIndex:
    """Bijection between flat compressed indices and pairs (a, b), a <= b."""

    r: int
    pairs: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.r < 1:
            raise ValueError(f"r must be positive, got {self.r}")
        if self.pairs is None:
            pairs = np.array(
                [(a, b) for a in range(self.r) for b in range(a, self.r)],
                dtype=int,
            )
            object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return self.r * (self.r + 1) // 2

    def forward(self, a: int, b: int) -> int:
        """Flat index of the pair (a, b) with a <= b."""
        if not 0 <= a <= b < self.r:
            raise IndexError(f"pair ({a}, {b}) out of range for r={self.r}")
        # Offset of row a's run plus position of b within it.
        return a * self.r - a * (a - 1) // 2 + (b - a)

    def inverse(self, j: int) -> tuple:
        """Pair (a, b) of the flat index j."""
        if not 0 <= j < len(self):
            raise IndexError(f"index {j} out of range for r={self.r}")
        a, b = self.pairs[j]
        return int(a), int(b)


def compressed_kron(q: np.ndarray) -> np.ndarray:
    """Compressed Kronecker square of a vector.

    Entry (a, b) with a <= b holds ``q_a * q_b``, doubled off the diagonal so
    that a compressed operator row reproduces the full symmetric quadratic
    form (see module docstring).

    Parameters
    ----------
    q : (r,) ndarray

    Returns
    -------
    (r(r+1)/2,) ndarray
    """
    q = np.asarray(q)
    if q.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {q.shape}")
    return khatri_rao_compressed(q[:, None])[:, 0]


def khatri_rao_compressed(Q: np.ndarray) -> np.ndarray:
    """Column-wise compressed Kronecker square of an (r, k) matrix."""
    Q = np.asarray(Q)
    if Q.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {Q.shape}")
    r, k = Q.shape
    out = np.empty((r * (r + 1) // 2, k), dtype=np.result_type(Q, float))
    offset = 0
    for a in range(r):
        run = r - a
        block = Q[a] * Q[a:]
        block[1:] *= 2.0
        out[offset : offset + run] = block
        offset += run
    return out


def expand_compressed(c: np.ndarray, r: int) -> np.ndarray:
    """Reconstruct the full Kronecker square ``q (x) q`` (length r^2) from a
    compressed square produced by :func:`compressed_kron`."""
    c = np.asarray(c, dtype=float)
    if c.shape != (r * (r + 1) // 2,):
        raise DimensionError(
            f"expected length {r * (r + 1) // 2} for r={r}, got {c.shape}"
        )
    index = CompressedQuadIndex(r)
    full = np.empty((r, r))
    for j, (a, b) in enumerate(index.pairs):
        value = c[j] if a == b else 0.5 * c[j]
        full[a, b] = value
        full[b, a] = value
    return full.reshape(-1)


def compressed_to_full(H: np.ndarray, r: int) -> np.ndarray:
    """Symmetric full quadratic operator (r', r^2) equivalent to a compressed
    operator (r', r(r+1)/2): ``full @ (q (x) q) == H @ compressed_kron(q)``."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[1] != r * (r + 1) // 2:
        raise DimensionError(
            f"expected {r * (r + 1) // 2} columns for r={r}, got {H.shape[1]}"
        )
    index = CompressedQuadIndex(r)
    full = np.empty((H.shape[0], r, r))
    for j, (a, b) in enumerate(index.pairs):
        full[:, a, b] = H[:, j]
        full[:, b, a] = H[:, j]
    return full.reshape(H.shape[0], r * r)


def full_to_compressed(H_full: np.ndarray, r: int) -> np.ndarray:
    """Compressed operator equivalent to a full (r', r^2) quadratic operator.

    Off-diagonal entries are symmetrized: only the symmetric part of the full
    operator is observable through the quadratic form.
    """
    H_full = np.atleast_2d(np.asarray(H_full, dtype=float))
    if H_full.shape[1] != r * r:
        raise DimensionError(
            f"expected {r * r} columns for r={r}, got {H_full.shape[1]}"
        )
    cube = H_full.reshape(H_full.shape[0], r, r)
    index = CompressedQuadIndex(r)
    out = np.empty((H_full.shape[0], len(index)))
    for j, (a, b) in enumerate(index.pairs):
        if a == b:
            out[:, j] = cube[:, a, a]
        else:
            out[:, j] = 0.5 * (cube[:, a, b] + cube[:, b, a])
    return out
