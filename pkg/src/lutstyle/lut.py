"""Dense 3D LUTs: trilinear application, CLUT materialization, composition, .cube I/O."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, TextIO

import numba
import numpy as np

from ._kernels import apply_hwc

DEFAULT_SIZE = 33


class CubeParseError(ValueError):
    """Malformed .cube text. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@lru_cache(maxsize=16)
def _identity_grid(size: int) -> np.ndarray:
    # Single source of the identity lattice. Residual-based application relies on
    # every identity table being bit-equal to this one.
    axis = (np.arange(size, dtype=np.float32) / np.float32(size - 1)).astype(np.float32)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    grid = np.stack([r, g, b], axis=-1)
    grid.setflags(write=False)
    return grid


@dataclass(frozen=True, eq=False)
class Lut3d:
    """D x D x D RGB lattice indexed ``table[r, g, b]`` -> (R, G, B).

    The table is clamped to [0, 1] on construction and made read-only, so
    instances can be shared across threads.
    """

    table: np.ndarray
    domain_min: tuple[float, float, float] = (0.0, 0.0, 0.0)
    domain_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    title: str | None = None
    _residual: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float32)
        if t.ndim != 4 or t.shape[-1] != 3 or not (t.shape[0] == t.shape[1] == t.shape[2]):
            raise ValueError(f"LUT table must have shape (D, D, D, 3), got {t.shape}")
        if t.shape[0] < 2:
            raise ValueError(f"LUT size must be >= 2, got {t.shape[0]}")
        if not np.isfinite(t).all():
            raise ValueError("LUT contains non-finite values")
        t = np.clip(t, 0.0, 1.0)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        dmin = tuple(float(v) for v in self.domain_min)
        dmax = tuple(float(v) for v in self.domain_max)
        if len(dmin) != 3 or len(dmax) != 3:
            raise ValueError("domain bounds must be RGB triples")
        if any(lo >= hi for lo, hi in zip(dmin, dmax)):
            raise ValueError(f"domain_min {dmin} must be < domain_max {dmax} per channel")
        object.__setattr__(self, "domain_min", dmin)
        object.__setattr__(self, "domain_max", dmax)

    @property
    def size(self) -> int:
        return self.table.shape[0]

    @property
    def residual(self) -> np.ndarray:
        """Table minus the identity lattice, float64. Zero everywhere for identity LUTs."""
        if self._residual is None:
            res = self.table.astype(np.float64) - _identity_grid(self.size).astype(np.float64)
            res.setflags(write=False)
            object.__setattr__(self, "_residual", res)
        return self._residual

    def lattice(self) -> np.ndarray:
        """Flat (D**3, 3) view in file order (red fastest)."""
        return self.table.transpose(2, 1, 0, 3).reshape(-1, 3)

    def __eq__(self, other):
        if not isinstance(other, Lut3d):
            return NotImplemented
        return (
            self.domain_min == other.domain_min
            and self.domain_max == other.domain_max
            and np.array_equal(self.table, other.table)
        )

    __hash__ = None


@dataclass(frozen=True)
class ClutBank:
    """K residual basis tables; materialized LUT = clamp(identity + sum_k w_k basis_k)."""

    basis: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.basis, dtype=np.float32)
        if b.ndim != 5 or b.shape[-1] != 3 or not (b.shape[1] == b.shape[2] == b.shape[3]):
            raise ValueError(f"basis must have shape (K, D, D, D, 3), got {b.shape}")
        if b.shape[0] < 1:
            raise ValueError("basis_count must be >= 1")
        if not np.isfinite(b).all():
            raise ValueError("basis contains non-finite values")
        b.setflags(write=False)
        object.__setattr__(self, "basis", b)

    @property
    def basis_count(self) -> int:
        return self.basis.shape[0]

    @property
    def size(self) -> int:
        return self.basis.shape[1]


def identity_lut(size: int = DEFAULT_SIZE) -> Lut3d:
    if size < 2:
        raise ValueError(f"LUT size must be >= 2, got {size}")
    return Lut3d(_identity_grid(size))


def materialize_clut(bank: ClutBank, weights) -> Lut3d:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != bank.basis_count:
        raise ValueError(f"expected {bank.basis_count} weights, got {w.shape[0]}")
    if not np.isfinite(w).all():
        raise ValueError("weights must be finite")
    delta = np.tensordot(w, bank.basis.astype(np.float64), axes=1)
    table = _identity_grid(bank.size).astype(np.float64) + delta
    return Lut3d(np.clip(table, 0.0, 1.0).astype(np.float32))


# ---------------------------------------------------------------------------
# application


def _default_threads() -> int:
    env = os.environ.get("MRSTYLE_THREADS")
    if env:
        return max(1, int(env))
    return numba.config.NUMBA_NUM_THREADS


def apply_lut(lut: Lut3d, image: np.ndarray, out: np.ndarray | None = None,
              threads: int | None = None) -> np.ndarray:
    """Trilinearly map every pixel of an (..., 3) float image through ``lut``.

    Interpolation is carried out on the residual against the identity lattice,
    which is the same trilinear value but makes identity LUTs exact no-ops.
    Rows are split across ``threads`` workers; each pixel is computed
    independently so the result does not depend on the thread count.
    """
    img = np.asarray(image)
    if img.shape[-1] != 3:
        raise ValueError(f"image must have 3 channels in the last axis, got shape {img.shape}")
    if img.dtype not in (np.float32, np.float64):
        img = img.astype(np.float32)
    shape = img.shape
    if img.ndim == 1:
        view = img.reshape(1, 1, 3)
    elif img.ndim == 2:
        view = img.reshape(-1, 1, 3)
    else:
        view = img.reshape(-1, shape[-2], 3)
    view = np.ascontiguousarray(view)
    if out is None:
        out = np.empty(shape, dtype=img.dtype)
    out_view = out.reshape(view.shape)
    bad = np.zeros(view.shape[0], dtype=np.uint8)
    dmin = np.asarray(lut.domain_min, dtype=np.float64)
    dmax = np.asarray(lut.domain_max, dtype=np.float64)

    prev = numba.get_num_threads()
    n = threads if threads is not None else _default_threads()
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    try:
        apply_hwc(view, lut.residual, dmin, dmax, out_view, bad)
    finally:
        numba.set_num_threads(prev)
    if bad.any():
        row = int(np.argmax(bad))
        raise ValueError(f"image contains NaN pixels (first in row {row})")
    return out


def compose_luts(first: Lut3d, second: Lut3d) -> Lut3d:
    """One table equivalent to applying ``first`` then ``second``."""
    if first.size != second.size:
        raise ValueError(f"cannot compose LUTs of size {first.size} and {second.size}")
    table = apply_lut(second, first.table)
    return Lut3d(table, first.domain_min, first.domain_max)


# ---------------------------------------------------------------------------
# .cube I/O

_KEYWORDS = {"TITLE", "LUT_3D_SIZE", "DOMAIN_MIN", "DOMAIN_MAX", "LUT_3D_INPUT_RANGE"}


def _floats(parts: list[str], count: int, lineno: int) -> list[float]:
    if len(parts) != count:
        raise CubeParseError(f"expected {count} values, got {len(parts)}", lineno)
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        bad = next(p for p in parts if not _is_float(p))
        raise CubeParseError(f"non-numeric token {bad!r}", lineno) from None
    return vals


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def parse_cube(source: str | TextIO | Iterable[str]) -> Lut3d:
    """Parse .cube text (a string, a text stream or an iterable of lines)."""
    if isinstance(source, str):
        source = io.StringIO(source)
    size = None
    title = None
    dmin = [0.0, 0.0, 0.0]
    dmax = [1.0, 1.0, 1.0]
    rows: list[list[float]] = []
    lineno = 0
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        head = parts[0].upper()
        if head[0].isalpha() and head in _KEYWORDS:
            if rows:
                raise CubeParseError(f"keyword {parts[0]} after table data", lineno)
            if head == "TITLE":
                title = line[len(parts[0]):].strip().strip('"')
            elif head == "LUT_3D_SIZE":
                (n,) = _floats(parts[1:], 1, lineno)
                if n != int(n) or n < 2:
                    raise CubeParseError(f"invalid LUT_3D_SIZE {parts[1]}", lineno)
                size = int(n)
            elif head == "DOMAIN_MIN":
                dmin = _floats(parts[1:], 3, lineno)
            elif head == "DOMAIN_MAX":
                dmax = _floats(parts[1:], 3, lineno)
            else:
                lo, hi = _floats(parts[1:], 2, lineno)
                dmin, dmax = [lo] * 3, [hi] * 3
            continue
        if head[0].isalpha() and not _is_float(parts[0]):
            raise CubeParseError(f"unknown keyword {parts[0]!r}", lineno)
        if size is None:
            raise CubeParseError("table data before LUT_3D_SIZE", lineno)
        if len(rows) == size ** 3:
            raise CubeParseError(f"more than {size ** 3} table entries", lineno)
        rows.append(_floats(parts, 3, lineno))
    eof = lineno + 1
    if size is None:
        raise CubeParseError("missing LUT_3D_SIZE", eof)
    if len(rows) != size ** 3:
        raise CubeParseError(f"expected {size ** 3} table entries, got {len(rows)}", eof)
    flat = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(flat).all():
        bad = int(np.argmax(~np.isfinite(flat).all(axis=1)))
        raise CubeParseError(f"non-finite value in table entry {bad}", eof)
    table = flat.reshape(size, size, size, 3).transpose(2, 1, 0, 3)
    try:
        return Lut3d(table, tuple(dmin), tuple(dmax), title)
    except ValueError as exc:
        raise CubeParseError(str(exc), eof) from None


def _fmt(v: float) -> str:
    return format(float(np.float32(v)), ".9g")


def write_cube(lut: Lut3d) -> str:
    """Serialize to .cube text; float32 values round-trip exactly."""
    lines = []
    if lut.title:
        lines.append(f'TITLE "{lut.title}"')
    lines.append(f"LUT_3D_SIZE {lut.size}")
    lines.append("DOMAIN_MIN " + " ".join(_fmt(v) for v in lut.domain_min))
    lines.append("DOMAIN_MAX " + " ".join(_fmt(v) for v in lut.domain_max))
    lines.extend(" ".join(format(float(v), ".9g") for v in row) for row in lut.lattice())
    return "\n".join(lines) + "\n"


def read_cube_file(path) -> Lut3d:
    with open(path, encoding="utf-8", newline=None) as fh:
        return parse_cube(fh)


def write_cube_file(path, lut: Lut3d) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_cube(lut))
