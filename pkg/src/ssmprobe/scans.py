"""Fixed traversal orders over a patch grid, plus seeded random permutations.

Every order is an explicit bijection on [0, N) over the row-major cell
indices of a grid_h x grid_w grid.  Families with four directions bundle a
forward sweep, its elementwise reversal, the transposed-axis sweep, and its
reversal.  All constructors accept rectangular grids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .seeding import derive_rng


class Family(str, Enum):
    RASTER = "raster"
    VMAMBA = "vmamba"
    DIAGONAL = "diagonal"
    SNAKE = "snake"
    RANDOM_FIXED = "random-fixed"
    RANDOM_DYNAMIC = "random-dynamic"


@dataclass(frozen=True)
class ScanOrder:
    """A bijective visiting order of grid cells."""

    indices: tuple[int, ...]
    family: Family
    direction_id: int = 0

    def __post_init__(self) -> None:
        n = len(self.indices)
        if sorted(self.indices) != list(range(n)):
            raise ValueError("indices must be a permutation of 0..N-1")

    def __len__(self) -> int:
        return len(self.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)

    def inverse(self) -> "ScanOrder":
        inv = np.argsort(self.as_array())
        return ScanOrder(tuple(int(i) for i in inv), self.family, self.direction_id)

    def to_json(self) -> str:
        return json.dumps(
            {"family": self.family.value, "direction_id": self.direction_id,
             "indices": list(self.indices)}
        )

    @staticmethod
    def from_json(text: str) -> "ScanOrder":
        obj = json.loads(text)
        return ScanOrder(tuple(obj["indices"]), Family(obj["family"]),
                         obj["direction_id"])


@dataclass(frozen=True)
class ScanFamily:
    """One or four ScanOrders sharing a family tag."""

    orders: tuple[ScanOrder, ...]

    def __post_init__(self) -> None:
        tags = {o.family for o in self.orders}
        if len(tags) != 1:
            raise ValueError("orders must share one family tag")
        if len(self.orders) not in (1, 4):
            raise ValueError("a family holds 1 or 4 orders")

    @property
    def family(self) -> Family:
        return self.orders[0].family

    def __len__(self) -> int:
        return len(self.orders)


def _check_grid(grid_h: int, grid_w: int) -> None:
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dims must be >= 1")


def _order(seq: list[int], family: Family, direction_id: int) -> ScanOrder:
    return ScanOrder(tuple(seq), family, direction_id)


def raster(grid_h: int, grid_w: int) -> ScanOrder:
    """Row-major left-to-right, top-to-bottom traversal (the identity order)."""
    _check_grid(grid_h, grid_w)
    return _order(list(range(grid_h * grid_w)), Family.RASTER, 0)


def raster_family(grid_h: int, grid_w: int) -> ScanFamily:
    return ScanFamily((raster(grid_h, grid_w),))


def vmamba_family(grid_h: int, grid_w: int) -> ScanFamily:
    """Row-major forward/reverse and column-major forward/reverse."""
    _check_grid(grid_h, grid_w)
    row_major = list(range(grid_h * grid_w))
    col_major = [r * grid_w + c for c in range(grid_w) for r in range(grid_h)]
    fam = Family.VMAMBA
    return ScanFamily((
        _order(row_major, fam, 0),
        _order(row_major[::-1], fam, 1),
        _order(col_major, fam, 2),
        _order(col_major[::-1], fam, 3),
    ))


def snake_family(grid_h: int, grid_w: int) -> ScanFamily:
    """Boundary-alternating sweeps: even rows left-to-right, odd rows
    right-to-left (0-based), plus the column-wise analog, each with its
    reversal."""
    _check_grid(grid_h, grid_w)
    rows = []
    for r in range(grid_h):
        cols = range(grid_w) if r % 2 == 0 else range(grid_w - 1, -1, -1)
        rows.extend(r * grid_w + c for c in cols)
    cols_snake = []
    for c in range(grid_w):
        rr = range(grid_h) if c % 2 == 0 else range(grid_h - 1, -1, -1)
        cols_snake.extend(r * grid_w + c for r in rr)
    fam = Family.SNAKE
    return ScanFamily((
        _order(rows, fam, 0),
        _order(rows[::-1], fam, 1),
        _order(cols_snake, fam, 2),
        _order(cols_snake[::-1], fam, 3),
    ))


def diagonal_family(grid_h: int, grid_w: int) -> ScanFamily:
    """Diagonal sweeps: cells grouped by constant r+c (and by constant
    r+(grid_w-1-c) for the mirrored orientation), groups ascending, rows
    ascending within a group; each sweep paired with its full reversal."""
    _check_grid(grid_h, grid_w)
    anti = sorted(range(grid_h * grid_w),
                  key=lambda i: (i // grid_w + i % grid_w, i // grid_w))
    mirror = sorted(range(grid_h * grid_w),
                    key=lambda i: (i // grid_w + (grid_w - 1 - i % grid_w), i // grid_w))
    fam = Family.DIAGONAL
    return ScanFamily((
        _order(anti, fam, 0),
        _order(anti[::-1], fam, 1),
        _order(mirror, fam, 2),
        _order(mirror[::-1], fam, 3),
    ))


FAMILY_BUILDERS = {
    Family.RASTER: raster_family,
    Family.VMAMBA: vmamba_family,
    Family.SNAKE: snake_family,
    Family.DIAGONAL: diagonal_family,
}


def build_family(family: Family | str, grid_h: int, grid_w: int) -> ScanFamily:
    fam = Family(family)
    if fam not in FAMILY_BUILDERS:
        raise ValueError(f"{fam.value} is not a fixed scan family")
    return FAMILY_BUILDERS[fam](grid_h, grid_w)


def random_permutation(n: int, seed: int, mode: str = "fixed",
                       sample_id: int = 0, epoch: int = 0) -> ScanOrder:
    """A uniform permutation of [0, N) from a seeded stream.

    ``fixed`` mode keys the stream on the seed alone, so every call returns
    the same order for a run; ``dynamic`` mode also keys on (sample_id,
    epoch), giving a fresh draw per sample per forward pass while staying
    reproducible.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode == "fixed":
        rng = derive_rng(seed, "perm-fixed")
        family = Family.RANDOM_FIXED
    elif mode == "dynamic":
        rng = derive_rng(seed, "perm-dynamic", sample_id, epoch)
        family = Family.RANDOM_DYNAMIC
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ScanOrder(tuple(int(i) for i in rng.permutation(n)), family, 0)


def apply_order(order: ScanOrder, tokens: np.ndarray) -> np.ndarray:
    """Reorder token rows: output row k is ``tokens[order.indices[k]]``."""
    if tokens.shape[-2] != len(order):
        raise ValueError(
            f"order length {len(order)} != token count {tokens.shape[-2]}"
        )
    return tokens[..., order.as_array(), :]
