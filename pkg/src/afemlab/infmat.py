"""Finite sections of block-structured matrices.

A block structure is a strictly increasing sequence of 1-based column
starts n_1 = 1 < n_2 < ... cutting a matrix into consecutive index
blocks.  This module holds the structure bookkeeping used by the basis
machinery (hierbasis) and, on top of it, the banded linear algebra:
block LU, approximate inverses, and decay fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import AfemError

__all__ = [
    "BlockStructure",
    "BlockMatrix",
]


class BlockStructure:
    """Consecutive index blocks given by 1-based starts ``n_1=1 < n_2 < ...``.

    ``boundaries`` lists the starts only; the total dimension closes the
    last block.  Block k (0-based) covers the 0-based slice
    ``[starts[k]-1, starts[k+1]-1)``.
    """

    def __init__(self, boundaries, size: int):
        b = np.asarray(boundaries, dtype=np.int64)
        if b.ndim != 1 or b.size == 0:
            raise AfemError("block boundaries must be a non-empty 1-d sequence")
        if b[0] != 1:
            raise AfemError(f"first block boundary must be 1, got {b[0]}")
        if np.any(np.diff(b) <= 0):
            raise AfemError("block boundaries must be strictly increasing")
        if int(b[-1]) > size:
            raise AfemError(
                f"last boundary {b[-1]} exceeds matrix dimension {size}"
            )
        self.boundaries = b
        self.size = int(size)

    @property
    def n_blocks(self) -> int:
        return self.boundaries.size

    def block_slice(self, k: int) -> slice:
        """0-based index slice of block ``k`` (0-based block count)."""
        if not 0 <= k < self.n_blocks:
            raise AfemError(f"block index {k} out of range")
        lo = int(self.boundaries[k]) - 1
        hi = self.size if k + 1 == self.n_blocks else int(self.boundaries[k + 1]) - 1
        return slice(lo, hi)

    def section_end(self, k: int) -> int:
        """0-based exclusive end of the leading section made of blocks 0..k."""
        if not 0 <= k < self.n_blocks:
            raise AfemError(f"block index {k} out of range")
        return self.size if k + 1 == self.n_blocks else int(self.boundaries[k + 1]) - 1

    def __repr__(self):
        return f"BlockStructure({self.boundaries.tolist()}, size={self.size})"


@dataclass
class BlockMatrix:
    """A finite matrix with a block structure and optional annotations.

    ``levels``/``kinds`` tag each row/column index (the matrix is square
    in every use here); ``meta`` carries whatever the producer wants to
    attach (basis function handles, orderings, ...).
    """

    matrix: sp.spmatrix
    structure: BlockStructure
    levels: np.ndarray | None = None
    kinds: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise AfemError(f"block matrix must be square, got {m.shape}")
        if m.shape[0] != self.structure.size:
            raise AfemError(
                f"matrix dimension {m.shape[0]} does not match block "
                f"structure size {self.structure.size}"
            )
        if self.levels is not None and len(self.levels) != m.shape[0]:
            raise AfemError("level annotation length mismatch")
        if self.kinds is not None and len(self.kinds) != m.shape[0]:
            raise AfemError("kind annotation length mismatch")

    @property
    def n(self) -> int:
        return self.structure.size
