"""Thin-plate-spline and homography warps, dense flows, bilinear sampling.

Coordinate conventions used throughout the package:

* pixel coordinates are ``(x, y)`` with pixel centers on the integer lattice,
  ``x`` in ``[0, w - 1]`` and ``y`` in ``[0, h - 1]``;
* normalized image coordinates map the pixel range linearly onto ``[-1, 1]``
  (corner-aligned), see :func:`pixel_to_normalized`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError

FLOW_MAGIC = b"DALFFLOW"
FLOW_VERSION = 1


def tps_kernel(squared_distance):
    """Radial basis ``r^2 ln r`` evaluated from the squared distance ``s = r^2``.

    Accepts a python float, a numpy array or a torch tensor. Returns exactly 0
    at ``s = 0``. Negative input raises ``ValueError``.
    """
    if isinstance(squared_distance, torch.Tensor):
        s = squared_distance
        if bool((s < 0).any()):
            raise ValueError("tps_kernel: squared distance must be nonnegative")
        pos = s > 0
        safe = torch.where(pos, s, torch.ones_like(s))
        return torch.where(pos, 0.5 * safe * torch.log(safe), torch.zeros_like(s))
    s = np.asarray(squared_distance, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("tps_kernel: squared distance must be nonnegative")
    safe = np.where(s > 0, s, 1.0)
    out = np.where(s > 0, 0.5 * safe * np.log(safe), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class TpsParams:
    """Affine part (2x3), control-point weights (n_c x 2), control points (n_c x 2)."""

    affine: torch.Tensor
    weights: torch.Tensor
    control_points: torch.Tensor

    def __post_init__(self):
        self.affine = torch.as_tensor(self.affine)
        self.weights = torch.as_tensor(self.weights)
        self.control_points = torch.as_tensor(self.control_points)
        if self.affine.shape[-2:] != (2, 3):
            raise ValueError(f"affine must be 2x3, got {tuple(self.affine.shape)}")
        if self.weights.shape[-1] != 2 or self.control_points.shape[-1] != 2:
            raise ValueError("weights and control points must have 2 columns")
        if self.weights.shape[-2] != self.control_points.shape[-2]:
            raise ValueError("weights and control_points must have the same row count")

    @property
    def n_c(self) -> int:
        return self.control_points.shape[-2]

    @classmethod
    def identity(cls, control_points, dtype=torch.float64) -> "TpsParams":
        ctrl = torch.as_tensor(control_points, dtype=dtype)
        affine = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=dtype)
        return cls(affine, torch.zeros_like(ctrl), ctrl)

    @classmethod
    def fit(cls, control_points, targets, regularization: float = 0.0) -> "TpsParams":
        """Interpolating TPS sending each control point to its target."""
        c = np.asarray(control_points, dtype=np.float64)
        y = np.asarray(targets, dtype=np.float64)
        n = c.shape[0]
        d2 = ((c[:, None, :] - c[None, :, :]) ** 2).sum(-1)
        k = tps_kernel(d2) + regularization * np.eye(n)
        p = np.hstack([c, np.ones((n, 1))])
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = k
        system[:n, n:] = p
        system[n:, :n] = p.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = y
        sol = np.linalg.solve(system, rhs)
        weights = sol[:n]
        affine = sol[n:].T  # rows: x', y'; columns: x, y, 1
        return cls(torch.from_numpy(affine.copy()), torch.from_numpy(weights.copy()),
                   torch.from_numpy(c.copy()))


def control_point_grid(n_side: int, dtype=torch.float64) -> torch.Tensor:
    """Regular ``n_side x n_side`` lattice over ``[-1, 1]^2`` (row-major, x fastest)."""
    lin = torch.linspace(-1.0, 1.0, n_side, dtype=dtype)
    gy, gx = torch.meshgrid(lin, lin, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)


def tps_warp_points(affine, weights, control_points, q):
    """Batched TPS: ``affine (..., 2, 3)``, ``weights (..., n, 2)``, ``q (..., P, 2)``."""
    diff = q.unsqueeze(-2) - control_points.unsqueeze(-3)  # (..., P, n, 2)
    basis = tps_kernel((diff * diff).sum(-1))  # (..., P, n)
    lin = q @ affine[..., :, :2].transpose(-1, -2) + affine[..., :, 2].unsqueeze(-2)
    return lin + basis @ weights


def tps_transform(params: TpsParams, q):
    """Apply ``p = A [q; 1] + sum_k rho(|q - c_k|^2) w_k`` to one or more points."""
    q = torch.as_tensor(q, dtype=params.affine.dtype)
    single = q.dim() == 1
    pts = q.reshape(1, 2) if single else q
    out = tps_warp_points(params.affine, params.weights, params.control_points, pts)
    return out.reshape(2) if single else out


@dataclass
class Homography:
    """Nonsingular 3x3 projective map, stored with ``matrix[2, 2] == 1``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        det = np.linalg.det(m)
        if abs(det) < 1e-12 or abs(m[2, 2]) < 1e-12:
            raise ValueError(f"degenerate homography (det={det:.3g})")
        self.matrix = m / m[2, 2]

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def from_pixel(cls, h_px, size) -> "Homography":
        """Convert a pixel-frame homography to the normalized frame of ``size=(h, w)``."""
        n = _normalizer(size)
        return cls(n @ np.asarray(h_px, dtype=np.float64) @ np.linalg.inv(n))

    def apply(self, pts: np.ndarray):
        """Map (N, 2) points; returns ``(mapped, ok)`` where ok flags positive depth."""
        pts = np.asarray(pts, dtype=np.float64)
        hom = pts @ self.matrix[:, :2].T + self.matrix[:, 2]
        w = hom[..., 2]
        ok = w > 1e-9
        safe = np.where(ok, w, 1.0)
        return hom[..., :2] / safe[..., None], ok


def _normalizer(size) -> np.ndarray:
    h, w = size
    sx = 2.0 / max(w - 1, 1)
    sy = 2.0 / max(h - 1, 1)
    return np.array([[sx, 0.0, -1.0], [0.0, sy, -1.0], [0.0, 0.0, 1.0]])


def pixel_to_normalized(pts, size):
    h, w = size
    pts = np.asarray(pts, dtype=np.float64)
    scale = np.array([2.0 / max(w - 1, 1), 2.0 / max(h - 1, 1)])
    return pts * scale - 1.0


def normalized_to_pixel(pts, size):
    h, w = size
    pts = np.asarray(pts, dtype=np.float64)
    scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return (pts + 1.0) * scale


@dataclass
class PolarGrid:
    n_radial: int
    n_angular: int
    max_radius: float
    coords: torch.Tensor  # (n_radial, n_angular, 2)

    @property
    def radii(self) -> torch.Tensor:
        return self.coords.norm(dim=-1)[:, 0]


def make_polar_grid(n_radial: int, n_angular: int, max_radius: float,
                    dtype=torch.float64) -> PolarGrid:
    """Rings at ``max_radius * (i + 1) / n_radial``, spokes at ``2 pi j / n_angular``."""
    if n_radial < 2 or n_angular < 2:
        raise ValueError("polar grid needs at least 2 rings and 2 spokes")
    radii = max_radius * torch.arange(1, n_radial + 1, dtype=dtype) / n_radial
    theta = 2.0 * math.pi * torch.arange(n_angular, dtype=dtype) / n_angular
    xs = radii[:, None] * torch.cos(theta)[None, :]
    ys = radii[:, None] * torch.sin(theta)[None, :]
    return PolarGrid(n_radial, n_angular, float(max_radius), torch.stack([xs, ys], dim=-1))


def bilinear_sample(image, coords):
    """Bilinearly sample ``image (h, w, c)`` at pixel ``coords (..., 2)``.

    Returns ``(values (..., c), inside (...))``. Points outside
    ``[0, w-1] x [0, h-1]`` give zeros and ``inside = False``. Differentiable
    with respect to both image and coordinates.
    """
    image = torch.as_tensor(image)
    coords = torch.as_tensor(coords, dtype=image.dtype if image.is_floating_point() else None)
    if image.dim() == 2:
        image = image.unsqueeze(-1)
    h, w, c = image.shape
    x = coords[..., 0]
    y = coords[..., 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0 = torch.floor(x).clamp(0, max(w - 2, 0))
    y0 = torch.floor(y).clamp(0, max(h - 2, 0))
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    ix0 = x0.long()
    iy0 = y0.long()
    ix1 = (ix0 + 1).clamp(max=w - 1)
    iy1 = (iy0 + 1).clamp(max=h - 1)
    flat = image.reshape(h * w, c)

    def tap(iy, ix):
        return flat[(iy * w + ix).reshape(-1)].reshape(*iy.shape, c)

    val = (tap(iy0, ix0) * (1 - fx) * (1 - fy) + tap(iy0, ix1) * fx * (1 - fy)
           + tap(iy1, ix0) * (1 - fx) * fy + tap(iy1, ix1) * fx * fy)
    val = torch.where(inside.unsqueeze(-1), val, torch.zeros_like(val))
    return val, inside


@dataclass
class FlowField:
    """Dense A->B correspondence: ``map[y, x] = (x_B, y_B)``; ``valid[y, x]``."""

    map: np.ndarray  # (h, w, 2) float64
    valid: np.ndarray  # (h, w) bool

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.map.ndim != 3 or self.map.shape[2] != 2:
            raise ValueError("flow map must be (h, w, 2)")
        if self.valid.shape != self.map.shape[:2]:
            raise ValueError("validity mask shape must match the flow map")
        self.valid &= np.all(np.isfinite(self.map), axis=-1)

    @property
    def height(self) -> int:
        return self.map.shape[0]

    @property
    def width(self) -> int:
        return self.map.shape[1]

    @classmethod
    def identity(cls, height: int, width: int) -> "FlowField":
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        return cls(np.stack([xs, ys], axis=-1), np.ones((height, width), dtype=bool))

    def save(self, path) -> None:
        Path(path).write_bytes(encode_flow(self))

    @classmethod
    def load(cls, path) -> "FlowField":
        return decode_flow(Path(path).read_bytes())


def encode_flow(flow: FlowField) -> bytes:
    header = FLOW_MAGIC + struct.pack("<BII", FLOW_VERSION, flow.height, flow.width)
    body = np.ascontiguousarray(flow.map, dtype="<f4").tobytes()
    mask = np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes()
    return header + body + mask


def decode_flow(data: bytes) -> FlowField:
    if data[:8] != FLOW_MAGIC:
        raise FormatError("bad DALFFLOW magic", offset=0)
    if len(data) < 17:
        raise FormatError("truncated DALFFLOW header", offset=len(data))
    version, h, w = struct.unpack_from("<BII", data, 8)
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported DALFFLOW version {version}", offset=8)
    n_map = h * w * 2 * 4
    expected = 17 + n_map + h * w
    if len(data) != expected:
        raise FormatError(f"DALFFLOW size mismatch: expected {expected} bytes, got {len(data)}",
                          offset=min(len(data), expected))
    fmap = np.frombuffer(data, dtype="<f4", count=h * w * 2, offset=17).reshape(h, w, 2)
    valid = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=17 + n_map).reshape(h, w)
    if np.any(valid > 1):
        raise FormatError("DALFFLOW mask bytes must be 0 or 1", offset=17 + n_map)
    return FlowField(fmap.astype(np.float64), valid.astype(bool))


def warp_points(homography: Homography, tps: TpsParams | None, pts, size, size_b=None):
    """Composite warp of pixel points of image A into image B's pixel frame.

    The homography is applied first, then the TPS, both in normalized
    coordinates. Returns ``(points_b, ok)``; ``ok`` is False on projective
    failure (points at or behind the horizon).
    """
    size_b = size if size_b is None else size_b
    q = pixel_to_normalized(pts, size)
    h_pts, ok = homography.apply(q)
    if tps is not None:
        with torch.no_grad():
            mapped = tps_warp_points(tps.affine.double(), tps.weights.double(),
                                     tps.control_points.double(),
                                     torch.from_numpy(h_pts.reshape(-1, 2)))
        h_pts = mapped.numpy().reshape(h_pts.shape)
    return normalized_to_pixel(h_pts, size_b), ok


def compose_synthetic_flow(homography: Homography, tps: TpsParams | None, size,
                           size_b=None) -> FlowField:
    """Ground-truth flow of image A (``size = (h, w)``) under the composite warp."""
    h, w = size
    hb, wb = size if size_b is None else size_b
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs, ys], axis=-1).reshape(-1, 2)
    mapped, ok = warp_points(homography, tps, pts, size, size_b)
    inb = ((mapped[:, 0] >= 0) & (mapped[:, 0] <= wb - 1)
           & (mapped[:, 1] >= 0) & (mapped[:, 1] <= hb - 1))
    valid = ok & inb & np.all(np.isfinite(mapped), axis=-1)
    return FlowField(mapped.reshape(h, w, 2), valid.reshape(h, w))


def transfer_points(flow: FlowField, points):
    """Interpolate the flow at sub-pixel points of image A.

    Returns ``(mapped (N, 2), valid (N,))``. A point is valid only if it lies
    inside image A and every flow pixel with nonzero interpolation weight is
    valid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h, w = flow.height, flow.width
    x, y = pts[:, 0], pts[:, 1]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(int)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    out = np.zeros((pts.shape[0], 2))
    valid = inside.copy()
    for iy, ix, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                       (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        contributes = wt > 0
        valid &= ~contributes | flow.valid[iy, ix]
        val = np.nan_to_num(flow.map[iy, ix])
        out += np.where(contributes[:, None], val * wt[:, None], 0.0)
    out[~valid] = np.nan
    return out, valid
