"""CT volume data model, Hounsfield-unit handling, patch geometry and I/O.

Axis convention
---------------
A volume is indexed ``data[x, y, z]`` with dims ``(nx, ny, nz)``.  On disk
and for linear indexing, x is the fastest-varying axis:
``linear = x + nx * (y + ny * z)``.

CTV file format (binary, little-endian)
---------------------------------------
============  ====  =====================================
bytes 0-3     4s    magic ``CTV1``
bytes 4-15    3*u4  dims nx, ny, nz
bytes 16-23   f8    isotropic voxel spacing in mm
bytes 24-     i2*   nx*ny*nz HU values, x fastest
============  ====  =====================================

HU values are clamped to [-1024, 3071] on load so every volume fits a
signed 12-bit CT range.
"""

from dataclasses import dataclass, field
import struct

import numpy as np

HU_MIN = -1024
HU_MAX = 3071
HU_RANGE = 4095  # HU_MAX - HU_MIN
NORM_ZERO_HU = 1024.0 / 4095.0  # 0 HU (water) in normalized units

_MAGIC = b"CTV1"
_HEADER = struct.Struct("<4sIIId")
_MAX_VOXELS = 1 << 32  # dimension-overflow guard


class CtvError(ValueError):
    """Base class for CTV file format violations."""


class BadMagicError(CtvError):
    pass


class DimensionError(CtvError):
    pass


class TruncatedError(CtvError):
    pass


@dataclass
class Volume:
    """3D scalar grid of Hounsfield units with isotropic voxel spacing."""

    data: np.ndarray  # (nx, ny, nz) int16 HU
    spacing_mm: float = 0.47

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume needs 3 positive dims, got {self.data.shape}")
        if self.data.dtype != np.int16:
            raise ValueError(f"volume data must be int16 HU, got {self.data.dtype}")
        if self.spacing_mm <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing_mm}")
        lo, hi = int(self.data.min()), int(self.data.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise ValueError(f"HU outside [{HU_MIN}, {HU_MAX}]: min {lo}, max {hi}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing_mm)


def volume_from_hu(hu: np.ndarray, spacing_mm: float = 0.47) -> Volume:
    """Round float HU to the int16 grid, clamping to the CT range."""
    data = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    return Volume(data, spacing_mm)


@dataclass(frozen=True)
class PatchSpec:
    """A cubic patch at ``origin`` with a centered cubic inpainting mask."""

    origin: tuple[int, int, int]
    size: int = 32
    mask_size: int = 16

    def __post_init__(self):
        if self.mask_size > self.size:
            raise ValueError("mask larger than patch")
        if (self.size - self.mask_size) % 2 != 0:
            raise ValueError("mask cannot be centered: size - mask_size is odd")

    @property
    def mask_offset(self) -> int:
        return (self.size - self.mask_size) // 2

    def patch_slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + self.size) for o in self.origin)

    def mask_slices_global(self) -> tuple[slice, slice, slice]:
        """Mask box in volume coordinates."""
        off = self.mask_offset
        return tuple(slice(o + off, o + off + self.mask_size) for o in self.origin)

    def check_bounds(self, dims: tuple[int, int, int]) -> None:
        for o, d in zip(self.origin, dims):
            if o < 0 or o + self.size > d:
                raise ValueError(f"patch {self.origin} size {self.size} "
                                 f"outside dims {dims}")


def mask_slices(size: int, mask_size: int) -> tuple[slice, slice, slice]:
    """Centered cubic mask box in patch-local coordinates."""
    if (size - mask_size) % 2 != 0 or mask_size > size:
        raise ValueError("mask cannot be centered")
    off = (size - mask_size) // 2
    sl = slice(off, off + mask_size)
    return (sl, sl, sl)


def mask_bool(size: int, mask_size: int) -> np.ndarray:
    """Boolean (size, size, size) array, True inside the centered mask."""
    m = np.zeros((size, size, size), dtype=bool)
    m[mask_slices(size, mask_size)] = True
    return m


@dataclass(frozen=True)
class RegionOfInterest:
    """Center-aligned box inside a volume where patches are sampled."""

    dims: tuple[int, int, int] = (160, 160, 64)

    def origin_in(self, vol_dims: tuple[int, int, int]) -> tuple[int, int, int]:
        for r, v in zip(self.dims, vol_dims):
            if r > v:
                raise ValueError(f"ROI {self.dims} does not fit volume {vol_dims}")
        return tuple((v - r) // 2 for r, v in zip(self.dims, vol_dims))


# ---------------------------------------------------------------- file I/O

def save_volume(vol: Volume, path) -> None:
    nx, ny, nz = vol.dims
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, nx, ny, nz, vol.spacing_mm))
        f.write(np.ascontiguousarray(vol.data.ravel(order="F")).tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, nx, ny, nz, spacing = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if min(nx, ny, nz) < 1 or nx * ny * nz > _MAX_VOXELS:
        raise DimensionError(f"{path}: bad dims ({nx}, {ny}, {nz})")
    payload = raw[_HEADER.size:]
    expected = nx * ny * nz * 2
    if len(payload) < expected:
        raise TruncatedError(f"{path}: payload {len(payload)} bytes, "
                             f"expected {expected}")
    hu = np.frombuffer(payload[:expected], dtype="<i2")
    hu = np.clip(hu, HU_MIN, HU_MAX).astype(np.int16)
    data = hu.reshape((nx, ny, nz), order="F")
    return Volume(np.ascontiguousarray(data), spacing)


def write_pgm(slice2d_hu: np.ndarray, path) -> None:
    """Export one axial HU slice (nx, ny) as a 16-bit P5 PGM.

    Intensity is shifted HU (hu + 1024), so the full CT range maps to
    0..4095 of the 16-bit scale.  Rows run along y, columns along x.
    """
    shifted = (slice2d_hu.astype(np.int32) - HU_MIN).astype(">u2")
    h, w = shifted.T.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(np.ascontiguousarray(shifted.T).tobytes())


# ----------------------------------------------------- normalization

def normalize_hu(hu) -> np.ndarray:
    """Affine map HU -> [0, 1]: (hu + 1024) / 4095.  Accepts a Volume or
    any HU array; returns float32."""
    if isinstance(hu, Volume):
        hu = hu.data
    return ((np.asarray(hu, dtype=np.float32) - HU_MIN) / HU_RANGE).astype(np.float32)


def denormalize_hu(x: np.ndarray) -> np.ndarray:
    """Inverse of normalize_hu; returns float HU (not yet rounded/clamped)."""
    return np.asarray(x, dtype=np.float32) * HU_RANGE + HU_MIN


# ----------------------------------------------------- patch machinery

def patch_grid(roi_dims, patch_size: int, stride: int) -> list[tuple[int, int, int]]:
    """Overlapping patch origins covering a box of ``roi_dims``.

    Per axis the origins are 0, stride, 2*stride, ...; when the last
    regular origin does not land on dim - patch_size, one extra clamped
    origin is appended so the grid covers the whole box.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    per_axis = []
    for dim in roi_dims:
        if patch_size > dim:
            raise ValueError(f"patch {patch_size} larger than ROI dim {dim}")
        last = dim - patch_size
        origins = list(range(0, last + 1, stride))
        if last % stride != 0:
            origins.append(last)
        per_axis.append(origins)
    return [(x, y, z) for z in per_axis[2] for y in per_axis[1] for x in per_axis[0]]


def extract_patch(vol: Volume, spec: PatchSpec) -> np.ndarray:
    """Copy the patch voxels out of the volume (int16 HU)."""
    spec.check_bounds(vol.dims)
    return vol.data[spec.patch_slices()].copy()


def write_patch(vol: Volume, spec: PatchSpec, patch: np.ndarray,
                mask_only: bool = False) -> None:
    """Write a patch back in place; with ``mask_only`` only the centered
    mask box is overwritten (the sliding-window removal path)."""
    spec.check_bounds(vol.dims)
    if patch.shape != (spec.size,) * 3:
        raise ValueError(f"patch shape {patch.shape} != size {spec.size}")
    patch = np.asarray(patch, dtype=np.int16)
    if mask_only:
        msl = mask_slices(spec.size, spec.mask_size)
        vol.data[spec.mask_slices_global()] = patch[msl]
    else:
        vol.data[spec.patch_slices()] = patch


def apply_inpainting_mask(patch: np.ndarray, mask_size: int,
                          fill_value: float = NORM_ZERO_HU) -> np.ndarray:
    """Return a copy of a cubic patch with its centered mask box filled."""
    if patch.shape[0] != patch.shape[1] or patch.shape[0] != patch.shape[2]:
        raise ValueError(f"patch must be cubic, got {patch.shape}")
    out = patch.copy()
    out[mask_slices(patch.shape[0], mask_size)] = fill_value
    return out


_AXES = {"x": 0, "y": 1, "z": 2}


def flip_augment(patch: np.ndarray, axes) -> np.ndarray:
    """Mirror the patch along the named axes (any subset of "xyz")."""
    idx = tuple(_AXES[a] for a in axes)
    return np.flip(patch, axis=idx).copy() if idx else patch.copy()
