"""Random coefficient fields on the unit lattice.

A field assigns a symmetric matrix with spectrum in ``[1, lam]`` to every
point of space.  The random laws are piecewise constant on unit cells
``z + [-1/2, 1/2)^d`` (``z`` an integer point), and the value on a cell is a
pure function of ``(seed, z)`` obtained from a counter-based hash.  Distinct
cells therefore use independent streams and any cell can be queried in O(1)
without generating its neighbours.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

LAWS = ("checkerboard", "laminate", "constant", "custom", "tabulated")

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class FieldError(ValueError):
    pass


def _mix64(x):
    """SplitMix64 finalizer, vectorized over uint64 arrays (wrapping)."""
    x = np.asarray(x, dtype=np.uint64) + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def hash_counter(seed, *counters):
    """Hash a seed with integer counters (broadcast arrays) to uint64."""
    h = _mix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    for c in counters:
        c = np.asarray(c, dtype=np.int64).astype(np.uint64)
        h = _mix64(h ^ c)
    return h


def derive_seed(seed, index):
    """Child seed for sample ``index`` of a campaign seeded by ``seed``."""
    return int(hash_counter(seed, np.int64(index), np.int64(0x5EED))[0])


def cell_uniforms(seed, cells, stream=0):
    """Uniform [0,1) draws for integer cells (shape (..., d))."""
    cells = np.asarray(cells, dtype=np.int64)
    h = hash_counter(seed, *[cells[..., k] for k in range(cells.shape[-1])], np.int64(stream))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


@dataclass(frozen=True)
class EllipticityBand:
    lambda_max: float

    def __post_init__(self):
        if not self.lambda_max >= 1.0:
            raise FieldError(f"ellipticity constant must be >= 1, got {self.lambda_max}")

    def contains(self, mats, atol=1e-12):
        """True for every symmetric matrix whose eigenvalues lie in [1, lam]."""
        mats = np.asarray(mats, dtype=float)
        if not np.array_equal(mats, np.swapaxes(mats, -1, -2)):
            return False
        ev = np.linalg.eigvalsh(mats)
        return bool(np.all(ev >= 1.0 - atol) and np.all(ev <= self.lambda_max + atol))


def _check_box(box, dim):
    if box is None:
        return None
    lo, hi = box
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.shape != (dim,) or hi.shape != (dim,):
        raise FieldError("box corners must have one entry per dimension")
    if np.any(lo != np.round(lo)) or np.any(hi != np.round(hi)):
        raise FieldError("box corners must be integers")
    if np.any(hi <= lo):
        raise FieldError("box must have positive extent")
    return tuple(int(v) for v in lo), tuple(int(v) for v in hi)


@dataclass(frozen=True)
class CoefficientField:
    """Stationary random coefficient field.

    ``box`` is the half-open range of integer cell indices ``[lo, hi)`` on
    which the field is defined (``None`` means all of Z^d).  ``offset`` is the
    accumulated translation: the translated field evaluated at ``x`` equals the
    original field at ``x + offset``.
    """

    dim: int
    band: EllipticityBand
    law: str
    seed: int = 0
    params: dict = dc_field(default_factory=dict, compare=False)
    box: tuple | None = None
    offset: tuple = ()

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise FieldError("dimension must be 2 or 3")
        if self.law not in LAWS:
            raise FieldError(f"unknown law {self.law!r}")
        if not self.offset:
            object.__setattr__(self, "offset", (0,) * self.dim)

    @property
    def lam(self):
        return self.band.lambda_max

    # -- evaluation -------------------------------------------------------
    def cell_matrices(self, cells):
        """Matrices on integer cells ``cells`` (shape (..., d)) of the field."""
        cells = np.asarray(cells, dtype=np.int64)
        src = cells + np.asarray(self.offset, dtype=np.int64)
        self._check_support(src)
        shape = cells.shape[:-1]
        d = self.dim
        eye = np.eye(d)
        if self.law == "checkerboard":
            u = cell_uniforms(self.seed, src)
            scale = np.where(u < self.params["volume_fraction"], self.lam, 1.0)
            return scale[..., None, None] * eye
        if self.law == "constant":
            return np.broadcast_to(self.params["matrix"], shape + (d, d)).copy()
        if self.law == "custom":
            u = np.stack(
                [cell_uniforms(self.seed, src, stream=j) for j in range(self.params["n_streams"])],
                axis=-1,
            )
            mats = np.asarray(self.params["sampler"](u), dtype=float)
            if not self.band.contains(mats):
                raise FieldError("custom sampler produced matrices outside the ellipticity band")
            return mats
        if self.law == "tabulated":
            lo = np.asarray(self.params["origin"], dtype=np.int64)
            idx = tuple((src - lo)[..., k] for k in range(d))
            return self.params["table"][idx].copy()
        # laminate is not cellwise; sample at the cell centres
        return self.matrices_at(cells.astype(float))

    def matrices_at(self, points):
        """Matrices at arbitrary points (shape (..., d))."""
        points = np.asarray(points, dtype=float)
        if self.law != "laminate":
            cells = np.floor(points + 0.5).astype(np.int64)
            return self.cell_matrices(cells)
        x = points + np.asarray(self.offset, dtype=float)
        width = 0.5 * self.params["period"]
        layer = np.floor(x[..., self.params["axis"]] / width).astype(np.int64) % 2
        a1, a2 = self.params["values"]
        return np.where(layer[..., None, None] == 0, a1, a2)

    def breakpoints(self):
        """Per axis ``(origin, spacing)`` of coefficient discontinuities, or None."""
        if self.law == "constant":
            return [None] * self.dim
        if self.law == "laminate":
            bp = [None] * self.dim
            ax = self.params["axis"]
            bp[ax] = (-float(self.offset[ax]), 0.5 * self.params["period"])
            return bp
        return [(0.5, 1.0)] * self.dim

    def _check_support(self, src):
        if self.box is None:
            return
        lo, hi = self.box
        if src.size and (np.any(src < np.asarray(lo)) or np.any(src >= np.asarray(hi))):
            raise FieldError("field support smaller than requested region")

    def support_contains(self, lower, upper):
        """Whether the cube [lower, upper] lies inside the support box."""
        if self.box is None:
            return True
        lo = np.asarray(self.box[0], float) - 0.5 - np.asarray(self.offset, float)
        hi = np.asarray(self.box[1], float) - 0.5 - np.asarray(self.offset, float)
        return bool(np.all(np.asarray(lower) >= lo - 1e-12) and np.all(np.asarray(upper) <= hi + 1e-12))

    def to_bytes(self, lo, hi):
        """Serialize the cells ``[lo, hi)`` to the field file format."""
        return dumps_field(self, lo, hi)


def translate(field, z):
    """Translated field ``x -> a(x + z)`` for a lattice vector ``z``."""
    z = np.asarray(z)
    if z.shape != (field.dim,) or np.any(z != np.round(z)):
        raise FieldError("translation must be a lattice vector")
    z = z.astype(np.int64)
    offset = tuple(int(o) for o in np.asarray(field.offset, dtype=np.int64) + z)
    return replace(field, offset=offset)


def make_checkerboard(dim, lam, volume_fraction, seed, box=None):
    """Two-phase iid checkerboard: each cell is ``lam*I`` with probability
    ``volume_fraction`` and ``I`` otherwise."""
    band = EllipticityBand(float(lam))
    if not 0.0 <= volume_fraction <= 1.0:
        raise FieldError("volume fraction must lie in [0, 1]")
    return CoefficientField(
        dim=dim,
        band=band,
        law="checkerboard",
        seed=int(seed),
        params={"volume_fraction": float(volume_fraction)},
        box=_check_box(box, dim),
    )


def make_constant(matrix, lam=None):
    matrix = np.asarray(matrix, dtype=float)
    dim = matrix.shape[0]
    if lam is None:
        lam = max(1.0, float(np.linalg.eigvalsh(matrix).max()))
    band = EllipticityBand(float(lam))
    if not band.contains(matrix):
        raise FieldError("matrix violates the ellipticity band")
    return CoefficientField(dim=dim, band=band, law="constant", params={"matrix": matrix})


def make_laminate(dim, axis, values, period, lam=None):
    """Layered field ``a(x) = A1`` or ``A2`` depending only on ``x[axis]``.

    Layers have width ``period / 2`` and interfaces sit at integer multiples
    of that width, so a cube of odd side centred at a lattice point holds the
    two phases in equal volume.
    """
    a1, a2 = (np.asarray(v, dtype=float) for v in values)
    if a1.shape != (dim, dim) or a2.shape != (dim, dim):
        raise FieldError("layer values must be d x d matrices")
    if lam is None:
        lam = max(1.0, float(np.linalg.eigvalsh(a1).max()), float(np.linalg.eigvalsh(a2).max()))
    band = EllipticityBand(float(lam))
    if not (band.contains(a1) and band.contains(a2)):
        raise FieldError("layer matrices violate the ellipticity band")
    if not 0 <= axis < dim:
        raise FieldError("axis out of range")
    if period <= 0:
        raise FieldError("period must be positive")
    return CoefficientField(
        dim=dim,
        band=band,
        law="laminate",
        params={"axis": int(axis), "values": (a1, a2), "period": float(period)},
    )


def make_custom(dim, lam, sampler, seed, n_streams=1, box=None):
    """Cellwise iid field from ``sampler(u) -> matrices`` with ``u`` uniform
    of shape (..., n_streams)."""
    return CoefficientField(
        dim=dim,
        band=EllipticityBand(float(lam)),
        law="custom",
        seed=int(seed),
        params={"sampler": sampler, "n_streams": int(n_streams)},
        box=_check_box(box, dim),
    )


def make_law(law, dim=2, lam=4.0, volume_fraction=0.5, seed=0, **kw):
    """Construct one of the named laws from plain parameters."""
    if law == "checkerboard":
        return make_checkerboard(dim, lam, volume_fraction, seed, box=kw.get("box"))
    if law == "constant":
        return make_constant(kw.get("matrix", np.eye(dim)), lam=kw.get("lam_band"))
    if law == "laminate":
        values = kw.get("values", (np.eye(dim), lam * np.eye(dim)))
        return make_laminate(dim, kw.get("axis", 0), values, kw.get("period", 2.0))
    raise FieldError(f"law {law!r} cannot be built from plain parameters")


# -- file format --------------------------------------------------------------

MAGIC = b"HOMLABF\x00"
VERSION = 1
KIND_COEFF = 0
KIND_SCALAR = 1
KIND_VECTOR = 2
_HEAD = struct.Struct("<8sIIIdQ16s")


def _pack_header(kind, dim, lam, law, seed, extents):
    head = _HEAD.pack(MAGIC, VERSION, kind, dim, float(lam), int(seed) & 0xFFFFFFFFFFFFFFFF,
                      law.encode("ascii")[:16].ljust(16, b"\x00"))
    return head + struct.pack(f"<{len(extents)}q", *extents)


def _unpack_header(buf):
    magic, version, kind, dim, lam, seed, law = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FieldError("not a field file (bad magic)")
    if version != VERSION:
        raise FieldError(f"unsupported field file version {version}")
    return kind, dim, lam, seed, law.rstrip(b"\x00").decode("ascii"), _HEAD.size


def dumps_field(field, lo, hi):
    """Cells ``[lo, hi)`` as bytes: header, then row-major float64 LE matrices."""
    lo = tuple(int(v) for v in lo)
    hi = tuple(int(v) for v in hi)
    axes = [np.arange(a, b) for a, b in zip(lo, hi)]
    cells = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    mats = field.cell_matrices(cells)
    head = _pack_header(KIND_COEFF, field.dim, field.lam, field.law, field.seed, lo + hi)
    return head + np.ascontiguousarray(mats, dtype="<f8").tobytes()


def loads_field(buf):
    kind, dim, lam, seed, law, pos = _unpack_header(buf)
    if kind != KIND_COEFF:
        raise FieldError("file holds a grid field snapshot, not a coefficient field")
    ext = struct.unpack_from(f"<{2 * dim}q", buf, pos)
    pos += 16 * dim
    lo, hi = ext[:dim], ext[dim:]
    shape = tuple(b - a for a, b in zip(lo, hi)) + (dim, dim)
    table = np.frombuffer(buf, dtype="<f8", offset=pos, count=int(np.prod(shape))).reshape(shape)
    band = EllipticityBand(lam)
    if not band.contains(table):
        raise FieldError("stored matrices violate the ellipticity band")
    return CoefficientField(
        dim=dim,
        band=band,
        law="tabulated",
        seed=seed,
        params={"table": table.astype(float), "origin": lo, "source_law": law},
        box=(tuple(lo), tuple(hi)),
    )


def save_field(path, field, lo, hi):
    Path(path).write_bytes(dumps_field(field, lo, hi))


def load_field(path):
    return loads_field(Path(path).read_bytes())
