"""Equirectangular (ERP) geometry and kernel sampling grids.

An ERP frame of extents H x W covers latitude (-pi/2, pi/2) and longitude
(-pi, pi) with pixel centres at

    lat(i) = pi * (0.5 - (i + 0.5) / H)        (row 0 is the north edge)
    lon(j) = 2 * pi * ((j + 0.5) / W - 0.5)

A "spherical" convolution reads its k x k taps not from the pixel lattice
but from a gnomonic (tangent-plane) patch centred on each output pixel:
the patch spans one source pixel per tap at the equator and widens toward
the poles exactly as the ERP projection stretches, so the kernel covers a
fixed solid angle everywhere.  A "plane" grid reproduces the ordinary
integer-offset stencil with symmetric (reflect) padding, which is the
drop-in ablation baseline.

Grids are expensive to build and immutable afterwards, so they are cached
per (H, W, kernel, stride, geometry) under a lock; construction happens
once per key even under concurrent first use.
"""

from __future__ import annotations

import threading

import numpy as np
import scipy.sparse as sp

from .errors import DataBoundsError, ShapeError

_TWO_PI = 2.0 * np.pi


def erp_to_sphere(i, j, height: int, width: int):
    """Pixel centre (row i, col j) to (lat, lon) in radians.

    Accepts scalars or arrays; fractional coordinates are allowed but must
    stay inside [0, H) x [0, W).
    """
    i = np.asarray(i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    _check_extents(height, width)
    if np.any(i < 0) or np.any(i >= height) or np.any(j < 0) or np.any(j >= width):
        raise DataBoundsError(
            f"pixel index outside [0,{height}) x [0,{width})"
        )
    lat = np.pi * (0.5 - (i + 0.5) / height)
    lon = _TWO_PI * ((j + 0.5) / width - 0.5)
    return lat, lon


def sphere_to_erp(lat, lon, height: int, width: int):
    """Inverse of erp_to_sphere: (lat, lon) to fractional (row, col).

    lon is wrapped into [-pi, pi); lat must lie in [-pi/2, pi/2].
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    _check_extents(height, width)
    if np.any(np.abs(lat) > np.pi / 2):
        raise DataBoundsError("latitude outside [-pi/2, pi/2]")
    lon = np.mod(lon + np.pi, _TWO_PI) - np.pi
    row = height * (0.5 - lat / np.pi) - 0.5
    col = width * (lon / _TWO_PI + 0.5) - 0.5
    return row, col


def _check_extents(height, width):
    if height < 2 or width < 2:
        raise ShapeError(f"frame extents must be at least 2x2, got {height}x{width}")


def _inverse_gnomonic(x, y, lat0, lon0):
    """Tangent-plane offsets (x right, y up) at (lat0, lon0) to (lat, lon).

    Standard inverse gnomonic projection of the unit sphere; the tangent
    point itself (x = y = 0) maps to (lat0, lon0).
    """
    x, y, lat0, lon0 = np.broadcast_arrays(
        np.asarray(x, dtype=np.float64),
        np.asarray(y, dtype=np.float64),
        np.asarray(lat0, dtype=np.float64),
        np.asarray(lon0, dtype=np.float64),
    )
    rho = np.hypot(x, y)
    nu = np.arctan(rho)
    cos_nu = np.cos(nu)
    sin_nu = np.sin(nu)
    with np.errstate(invalid="ignore", divide="ignore"):
        y_unit = np.where(rho > 0, y / np.where(rho > 0, rho, 1.0), 0.0)
    sin_lat = cos_nu * np.sin(lat0) + y_unit * sin_nu * np.cos(lat0)
    lat = np.arcsin(np.clip(sin_lat, -1.0, 1.0))
    num = x * sin_nu
    den = rho * np.cos(lat0) * cos_nu - y * np.sin(lat0) * sin_nu
    dlon = np.arctan2(num, den)
    lat = np.where(rho > 0, lat, lat0)
    dlon = np.where(rho > 0, dlon, 0.0)
    return lat, lon0 + dlon


def gnomonic_kernel_locations(lat0: float, lon0: float, kernel_size: int, dx: float, dy: float):
    """Sphere locations of a k x k tangent-plane stencil centred at (lat0, lon0).

    Tap (u, v) sits at tangent offsets x = (v - k//2) * dx (eastward) and
    y = (k//2 - u) * dy (northward), so index order matches image layout:
    u runs top to bottom, v left to right.  Returns (lat, lon) arrays of
    shape [k, k].
    """
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"kernel size must be odd and positive, got {kernel_size}")
    half = k // 2
    v = np.arange(k, dtype=np.float64) - half
    u = half - np.arange(k, dtype=np.float64)
    x = np.broadcast_to(v[None, :] * dx, (k, k))
    y = np.broadcast_to(u[:, None] * dy, (k, k))
    return _inverse_gnomonic(x, y, lat0, lon0)


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Symmetric reflection of integer indices into [0, n-1] (numpy 'symmetric')."""
    m = np.mod(idx, 2 * n)
    return np.where(m < n, m, 2 * n - 1 - m)


class KernelSamplingGrid:
    """Fractional source coordinates for every output pixel and kernel tap.

    rows/cols have shape [H', W', k, k]; rows lie in [0, H-1] (poles are
    reflected, then clamped to keep bilinear corners in range) and cols in
    [0, W) with horizontal wraparound.  The bilinear gather is materialised
    once per dtype as a sparse matrix together with its transpose, so the
    convolution's forward and backward passes are single sparse products.
    """

    def __init__(self, *, geometry, kernel_size, stride, in_height, in_width,
                 out_height, out_width, rows, cols):
        self.geometry = geometry
        self.kernel_size = kernel_size
        self.stride = stride
        self.in_height = in_height
        self.in_width = in_width
        self.out_height = out_height
        self.out_width = out_width
        rows = np.ascontiguousarray(rows, dtype=np.float64)
        cols = np.ascontiguousarray(cols, dtype=np.float64)
        rows.setflags(write=False)
        cols.setflags(write=False)
        self.rows = rows
        self.cols = cols
        self._mats: dict = {}
        self._lock = threading.Lock()

    def matrices(self, dtype):
        """(gather, scatter) sparse matrices for one dtype.

        gather: [P*T, H*W] with P output pixels and T = k*k taps; scatter
        is its transpose. Both CSR.
        """
        key = np.dtype(dtype).str
        with self._lock:
            pair = self._mats.get(key)
            if pair is None:
                pair = self._build_matrices(np.dtype(dtype))
                self._mats[key] = pair
            return pair

    def _build_matrices(self, dtype):
        h, w = self.in_height, self.in_width
        rows = self.rows.reshape(-1)
        cols = self.cols.reshape(-1)
        n = rows.shape[0]

        r0 = np.floor(rows).astype(np.int64)
        fr = rows - r0
        r0 = np.clip(r0, 0, h - 1)
        r1 = np.clip(r0 + 1, 0, h - 1)
        c0 = np.floor(cols).astype(np.int64)
        fc = cols - c0
        c0 = np.mod(c0, w)
        c1 = np.mod(c0 + 1, w)

        src = np.empty((n, 4), dtype=np.int64)
        src[:, 0] = r0 * w + c0
        src[:, 1] = r0 * w + c1
        src[:, 2] = r1 * w + c0
        src[:, 3] = r1 * w + c1
        wgt = np.empty((n, 4), dtype=np.float64)
        wgt[:, 0] = (1.0 - fr) * (1.0 - fc)
        wgt[:, 1] = (1.0 - fr) * fc
        wgt[:, 2] = fr * (1.0 - fc)
        wgt[:, 3] = fr * fc

        out_idx = np.repeat(np.arange(n, dtype=np.int64), 4)
        gather = sp.coo_matrix(
            (wgt.reshape(-1).astype(dtype), (out_idx, src.reshape(-1))),
            shape=(n, h * w),
        ).tocsr()
        scatter = gather.T.tocsr()
        return gather, scatter


def _build_sphere_grid(height, width, kernel_size, stride):
    k = kernel_size
    half = k // 2
    hp = -(-height // stride)
    wp = -(-width // stride)
    centre_rows = np.arange(hp, dtype=np.float64) * stride
    centre_cols = np.arange(wp, dtype=np.float64) * stride

    lat0 = np.pi * (0.5 - (centre_rows + 0.5) / height)          # [H']
    dx = np.tan(_TWO_PI / width)
    dy = np.tan(np.pi / height)
    v = np.arange(k, dtype=np.float64) - half
    u = half - np.arange(k, dtype=np.float64)
    x = v[None, None, :] * dx                                     # [1,1,k]
    y = u[None, :, None] * dy                                     # [1,k,1]
    lat, lon_off = _inverse_gnomonic(x, y, lat0[:, None, None], 0.0)  # [H',k,k]

    rows = height * (0.5 - lat / np.pi) - 0.5                     # [H',k,k]
    # pole safety: reflect anything beyond a pole-edge centre, shifting
    # longitude half a turn; the inverse gnomonic never actually produces
    # such rows, this guards alternative projections
    low = rows < -0.5
    high = rows > height - 0.5
    rows = np.where(low, -1.0 - rows, rows)
    rows = np.where(high, 2.0 * height - 1.0 - rows, rows)
    lon_off = np.where(low | high, lon_off + np.pi, lon_off)
    # bilinear corners must stay in range: the half-open half-pixel bands
    # at each pole clamp onto the edge row
    rows = np.clip(rows, 0.0, height - 1.0)

    dcol = width * lon_off / _TWO_PI                              # [H',k,k]
    cols = np.mod(centre_cols[None, :, None, None] + dcol[:, None, :, :], width)
    rows = np.broadcast_to(rows[:, None, :, :], (hp, wp, k, k))
    return rows, cols, hp, wp


def _build_plane_grid(height, width, kernel_size, stride):
    k = kernel_size
    half = k // 2
    hp = -(-height // stride)
    wp = -(-width // stride)
    centre_rows = np.arange(hp, dtype=np.int64) * stride
    centre_cols = np.arange(wp, dtype=np.int64) * stride
    off = np.arange(k, dtype=np.int64) - half
    rows = _reflect_index(centre_rows[:, None] + off[None, :], height)   # [H',k]
    cols = _reflect_index(centre_cols[:, None] + off[None, :], width)    # [W',k]
    rows_full = np.broadcast_to(
        rows[:, None, :, None].astype(np.float64), (hp, wp, k, k)
    )
    cols_full = np.broadcast_to(
        cols[None, :, None, :].astype(np.float64), (hp, wp, k, k)
    )
    return rows_full, cols_full, hp, wp


_GRIDS: dict = {}
_GRIDS_LOCK = threading.Lock()


def build_sampling_grid(height: int, width: int, kernel_size: int, stride: int = 1,
                        geometry: str = "sphere") -> KernelSamplingGrid:
    """Fetch (or build once) the sampling grid for one configuration.

    geometry 'sphere' places taps by gnomonic projection; 'plane' is the
    ordinary integer stencil with symmetric padding.  Output extents are
    ceil(H / stride) x ceil(W / stride) with centres at (stride*i, stride*j).
    """
    height, width = int(height), int(width)
    kernel_size, stride = int(kernel_size), int(stride)
    _check_extents(height, width)
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ShapeError(f"kernel size must be odd and positive, got {kernel_size}")
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if geometry not in ("sphere", "plane"):
        raise ShapeError(f"geometry must be 'sphere' or 'plane', got {geometry!r}")

    key = (height, width, kernel_size, stride, geometry)
    with _GRIDS_LOCK:
        grid = _GRIDS.get(key)
        if grid is None:
            builder = _build_sphere_grid if geometry == "sphere" else _build_plane_grid
            rows, cols, hp, wp = builder(height, width, kernel_size, stride)
            grid = KernelSamplingGrid(
                geometry=geometry,
                kernel_size=kernel_size,
                stride=stride,
                in_height=height,
                in_width=width,
                out_height=hp,
                out_width=wp,
                rows=rows,
                cols=cols,
            )
            _GRIDS[key] = grid
        return grid
