"""Differentiable warp geometry: sampling grids, similarity transforms, bilinear
resampling, grid composition/inversion, convex upsampling and flow regularizers.

Conventions (fixed across the whole package):
  * A sampling grid stores, for every output pixel (i, j), the *source*
    coordinate that is bilinearly read to produce that pixel (reverse warping).
  * Coordinates are normalized: x grows rightward, y grows downward, and the
    range [-1, 1] maps onto the centers of the first and last pixels
    (corner-aligned). A degenerate 1-pixel axis uses coordinate -1.
  * Arrays are channel-last: images are (H, W, C), grids and flows (H, W, 2).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

PADDING_MODES = ("reflection", "border", "zeros")

# Lattice snap threshold, in pixel units. Coordinates closer than this to an
# exact pixel center are treated as hitting it, which makes sampling with an
# identity grid reproduce the image bit-for-bit.
_SNAP = 1e-6

FLOW_MAGIC = b"GGFL"


@dataclass(frozen=True)
class SamplingGrid:
    """H x W x 2 field of normalized reverse-sampling coordinates."""

    coords: torch.Tensor

    def __post_init__(self):
        if self.coords.ndim != 3 or self.coords.shape[-1] != 2:
            raise ValueError(f"grid coords must be (H, W, 2), got {tuple(self.coords.shape)}")

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]

    def displacement(self) -> "FlowField":
        """Residual of this grid relative to the identity grid."""
        ident = identity_grid(self.height, self.width, dtype=self.coords.dtype,
                              device=self.coords.device)
        return FlowField(self.coords - ident.coords)


@dataclass(frozen=True)
class FlowField:
    """H x W x 2 displacement added to the identity grid to form a SamplingGrid."""

    displacement: torch.Tensor

    def __post_init__(self):
        if self.displacement.ndim != 3 or self.displacement.shape[-1] != 2:
            raise ValueError(
                f"flow displacement must be (H, W, 2), got {tuple(self.displacement.shape)}")

    @property
    def height(self) -> int:
        return self.displacement.shape[0]

    @property
    def width(self) -> int:
        return self.displacement.shape[1]

    def to_grid(self) -> SamplingGrid:
        ident = identity_grid(self.height, self.width, dtype=self.displacement.dtype,
                              device=self.displacement.device)
        return SamplingGrid(ident.coords + self.displacement)


@dataclass(frozen=True)
class SimilarityParams:
    """Rotation / uniform scale / shift and the 3x3 matrix assembled from them."""

    rotation: float
    scale: float
    shift_x: float
    shift_y: float
    matrix: torch.Tensor


def _axis_coords(n: int, dtype, device) -> torch.Tensor:
    if n == 1:
        return torch.full((1,), -1.0, dtype=dtype, device=device)
    return torch.linspace(-1.0, 1.0, n, dtype=dtype, device=device)


def identity_grid(height: int, width: int, *, dtype=torch.float32,
                  device=None) -> SamplingGrid:
    """Corner-aligned identity grid: coords[i, j] = (-1 + 2j/(W-1), -1 + 2i/(H-1))."""
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    xs = _axis_coords(width, dtype, device)
    ys = _axis_coords(height, dtype, device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return SamplingGrid(torch.stack([gx, gy], dim=-1))


def raw_to_matrix(o: torch.Tensor) -> torch.Tensor:
    """Map raw head outputs (..., 4) to similarity matrices (..., 3, 3).

    r = pi * tanh(o1), s = exp(o2), tx = o3, ty = o4;
    rows [s cos r, -s sin r, tx], [s sin r, s cos r, ty], [0, 0, 1].
    """
    if o.shape[-1] != 4:
        raise ValueError(f"expected 4 raw similarity parameters, got {o.shape[-1]}")
    if not torch.isfinite(o).all():
        raise ValueError("raw similarity parameters must be finite")
    r = torch.pi * torch.tanh(o[..., 0])
    s = torch.exp(o[..., 1])
    tx = o[..., 2]
    ty = o[..., 3]
    cos, sin = torch.cos(r), torch.sin(r)
    zero = torch.zeros_like(r)
    one = torch.ones_like(r)
    rows = [s * cos, -s * sin, tx, s * sin, s * cos, ty, zero, zero, one]
    return torch.stack(rows, dim=-1).reshape(*o.shape[:-1], 3, 3)


def similarity_from_raw(o) -> SimilarityParams:
    """Build SimilarityParams from four raw scalars (o1..o4)."""
    t = torch.as_tensor(o, dtype=torch.float64).reshape(4)
    m = raw_to_matrix(t)
    r = float(torch.pi * torch.tanh(t[0]))
    return SimilarityParams(rotation=r, scale=float(torch.exp(t[1])),
                            shift_x=float(t[2]), shift_y=float(t[3]), matrix=m)


def transform_grid(matrix: torch.Tensor, grid: SamplingGrid) -> SamplingGrid:
    """Apply a 3x3 matrix to every grid coordinate (homogeneous, then drop)."""
    c = grid.coords
    m = matrix.to(dtype=c.dtype, device=c.device)
    x, y = c[..., 0], c[..., 1]
    xw = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    yw = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    return SamplingGrid(torch.stack([xw, yw], dim=-1))


def grid_from_matrix(matrix: torch.Tensor, height: int, width: int) -> SamplingGrid:
    """Sampling grid of the similarity/affine transform M applied to the identity grid."""
    matrix = torch.as_tensor(matrix)
    if not torch.isfinite(matrix).all():
        raise ValueError("matrix entries must be finite")
    ident = identity_grid(height, width, dtype=matrix.dtype if matrix.is_floating_point()
                          else torch.float32, device=matrix.device)
    return transform_grid(matrix, ident)


def _resolve_coords(x: torch.Tensor, n: int, padding: str):
    """Map raw pixel coordinates onto [0, n-1] per the padding mode.

    Returns the resolved coordinate and, for 'zeros', the raw coordinate that
    individual taps are bounds-checked against (None otherwise).
    """
    if padding == "border":
        return x.clamp(0.0, float(n - 1)), None
    if padding == "reflection":
        if n == 1:
            return torch.zeros_like(x), None
        period = 2.0 * (n - 1)
        r = torch.remainder(x, period)
        return torch.minimum(r, period - r), None
    if padding == "zeros":
        return x, x
    raise ValueError(f"unknown padding mode {padding!r}; expected one of {PADDING_MODES}")


def _bilinear(images: torch.Tensor, coords: torch.Tensor, padding: str) -> torch.Tensor:
    """Batched bilinear lookup. images (N,H',W',C), coords (N,H,W,2) -> (N,H,W,C)."""
    n_batch, h_in, w_in = images.shape[0], images.shape[1], images.shape[2]
    x = (coords[..., 0] + 1.0) * ((w_in - 1) / 2.0)
    y = (coords[..., 1] + 1.0) * ((h_in - 1) / 2.0)

    x, x_raw = _resolve_coords(x, w_in, padding)
    y, y_raw = _resolve_coords(y, h_in, padding)

    # Snap near-lattice coordinates so exact-identity grids gather exactly.
    xr = torch.round(x)
    yr = torch.round(y)
    x = torch.where((x - xr).abs() < _SNAP, xr, x)
    y = torch.where((y - yr).abs() < _SNAP, yr, y)

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0

    x0i = x0.long()
    y0i = y0.long()
    x1i = x0i + 1
    y1i = y0i + 1

    x0c = x0i.clamp(0, w_in - 1)
    x1c = x1i.clamp(0, w_in - 1)
    y0c = y0i.clamp(0, h_in - 1)
    y1c = y1i.clamp(0, h_in - 1)

    bidx = torch.arange(n_batch, device=images.device).view(-1, 1, 1)
    v00 = images[bidx, y0c, x0c]
    v01 = images[bidx, y0c, x1c]
    v10 = images[bidx, y1c, x0c]
    v11 = images[bidx, y1c, x1c]

    if padding == "zeros":
        inx0 = (x0i >= 0) & (x0i <= w_in - 1)
        inx1 = (x1i >= 0) & (x1i <= w_in - 1)
        iny0 = (y0i >= 0) & (y0i <= h_in - 1)
        iny1 = (y1i >= 0) & (y1i <= h_in - 1)
        v00 = v00 * (inx0 & iny0).unsqueeze(-1)
        v01 = v01 * (inx1 & iny0).unsqueeze(-1)
        v10 = v10 * (inx0 & iny1).unsqueeze(-1)
        v11 = v11 * (inx1 & iny1).unsqueeze(-1)

    fx = fx.unsqueeze(-1)
    fy = fy.unsqueeze(-1)
    top = v00 + (v01 - v00) * fx
    bot = v10 + (v11 - v10) * fx
    return top + (bot - top) * fy


def sample_batch(images: torch.Tensor, coords: torch.Tensor,
                 padding: str = "reflection") -> torch.Tensor:
    """Warp a batch: images (N,H',W',C) sampled at coords (N,H,W,2)."""
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode {padding!r}; expected one of {PADDING_MODES}")
    if images.shape[-1] < 1:
        raise ValueError("images must have at least one channel")
    return _bilinear(images, coords, padding)


def sample(image: torch.Tensor, grid: SamplingGrid,
           padding: str = "reflection") -> torch.Tensor:
    """Bilinearly resample image (H',W',C) at every grid coordinate.

    Differentiable with respect to both the image and the grid. Out-of-range
    coordinates are resolved by the padding mode.
    """
    if image.ndim != 3:
        raise ValueError(f"image must be (H, W, C), got {tuple(image.shape)}")
    if image.shape[-1] < 1:
        raise ValueError("image must have at least one channel")
    out = sample_batch(image.unsqueeze(0), grid.coords.unsqueeze(0), padding)
    return out.squeeze(0)


def compose(outer: SamplingGrid, inner: SamplingGrid,
            padding: str = "border") -> SamplingGrid:
    """Grid of the two-pass warp: result(i,j) = inner evaluated at outer(i,j).

    Sampling an image with the result equals sampling with inner and then with
    outer, up to interpolation error.
    """
    looked_up = sample_batch(inner.coords.unsqueeze(0), outer.coords.unsqueeze(0), padding)
    return SamplingGrid(looked_up.squeeze(0))


def invert_grid_nn(grid: SamplingGrid) -> SamplingGrid:
    """Nearest-neighbor grid inversion.

    For each output pixel, returns the lattice coordinate of the grid entry
    whose value is closest (Euclidean, normalized units) to that pixel's
    identity coordinate. Ties break to the lowest entry in row-major order.
    """
    h, w = grid.height, grid.width
    entries = grid.coords.detach().cpu().double().numpy().reshape(-1, 2)
    ident = identity_grid(h, w, dtype=torch.float64).coords.numpy().reshape(-1, 2)

    out = np.empty((h * w,), dtype=np.int64)
    chunk = max(1, int(4e6) // max(entries.shape[0], 1))
    for start in range(0, ident.shape[0], chunk):
        block = ident[start:start + chunk]
        d2 = ((block[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
        out[start:start + block.shape[0]] = d2.argmin(axis=1)

    inv = ident[out].reshape(h, w, 2)
    return SamplingGrid(torch.as_tensor(inv, dtype=grid.coords.dtype,
                                        device=grid.coords.device))


# 3x3 neighborhood offsets used by convex upsampling, row-major in (dy, dx).
UPSAMPLE_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1),
                    (1, -1), (1, 0), (1, 1)]
UPSAMPLE_FACTOR = 8


def convex_upsample_nchw(coarse: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Batched convex upsampling; coarse (N,2,h,w), logits (N,9,8,8,h,w) -> (N,2,8h,8w).

    Weights are a softmax over the 9-neighborhood, so every fine flow vector
    is a convex combination of its 3x3 coarse neighborhood. Border neighborhoods
    replicate edge cells, which keeps constant fields exactly constant.
    """
    n, c, h, w = coarse.shape
    f = UPSAMPLE_FACTOR
    if logits.shape != (n, 9, f, f, h, w):
        raise ValueError(
            f"upsampling weights must be (N, 9, {f}, {f}, h, w)={ (n, 9, f, f, h, w) }, "
            f"got {tuple(logits.shape)}")
    weights = torch.softmax(logits, dim=1)

    padded = torch.nn.functional.pad(coarse, (1, 1, 1, 1), mode="replicate")
    neighbors = torch.nn.functional.unfold(padded, kernel_size=3)  # (N, c*9, h*w)
    neighbors = neighbors.view(n, c, 9, 1, 1, h, w)

    up = (weights.unsqueeze(1) * neighbors).sum(dim=2)  # (N, c, f, f, h, w)
    up = up.permute(0, 1, 4, 2, 5, 3)  # (N, c, h, f, w, f)
    return up.reshape(n, c, h * f, w * f)


def convex_upsample(coarse_flow: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Upsample a coarse flow (h,w,2) by 8x using per-pixel 9-way convex weights.

    `weights` are raw scores of shape (8h, 8w, 9); they pass through a softmax
    so the combination is convex regardless of input scale.
    """
    if coarse_flow.ndim != 3 or coarse_flow.shape[-1] != 2:
        raise ValueError(f"coarse flow must be (h, w, 2), got {tuple(coarse_flow.shape)}")
    h, w = coarse_flow.shape[0], coarse_flow.shape[1]
    f = UPSAMPLE_FACTOR
    if weights.shape != (h * f, w * f, 9):
        raise ValueError(
            f"weights must be ({h * f}, {w * f}, 9), got {tuple(weights.shape)}")
    logits = weights.reshape(h, f, w, f, 9).permute(4, 1, 3, 0, 2).unsqueeze(0)
    coarse = coarse_flow.permute(2, 0, 1).unsqueeze(0)
    out = convex_upsample_nchw(coarse, logits)
    return out.squeeze(0).permute(1, 2, 0)


def huber(x: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Mean Huber penalty: 0.5 t^2 for |t| <= delta, delta(|t| - delta/2) beyond."""
    if delta <= 0:
        raise ValueError(f"huber delta must be positive, got {delta}")
    t = x.abs()
    quad = 0.5 * t * t
    lin = delta * (t - 0.5 * delta)
    return torch.where(t <= delta, quad, lin).mean()


def _as_displacement(flow) -> torch.Tensor:
    if isinstance(flow, FlowField):
        return flow.displacement
    if isinstance(flow, SamplingGrid):
        return flow.displacement().displacement
    return flow


def tv_loss(flow, delta: float = 1.0) -> torch.Tensor:
    """Smoothness penalty: Huber of forward finite differences along x and y."""
    d = _as_displacement(flow)
    if d.shape[0] < 2 or d.shape[1] < 2:
        raise ValueError("tv_loss needs at least 2 pixels along each axis")
    dx = d[:, 1:, :] - d[:, :-1, :]
    dy = d[1:, :, :] - d[:-1, :, :]
    return huber(dx, delta) + huber(dy, delta)


def tv_loss_batch(disp: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Per-sample tv_loss for a batch of displacements (N,H,W,2) -> (N,)."""
    if disp.shape[1] < 2 or disp.shape[2] < 2:
        raise ValueError("tv_loss needs at least 2 pixels along each axis")
    dx = disp[:, :, 1:, :] - disp[:, :, :-1, :]
    dy = disp[:, 1:, :, :] - disp[:, :-1, :, :]

    def _h(t):
        t = t.abs()
        return torch.where(t <= delta, 0.5 * t * t,
                           delta * (t - 0.5 * delta)).flatten(1).mean(dim=1)

    return _h(dx) + _h(dy)


def identity_reg(flow) -> torch.Tensor:
    """Mean squared magnitude of the displacement from the identity grid."""
    d = _as_displacement(flow)
    return d.square().mean()


def identity_reg_batch(disp: torch.Tensor) -> torch.Tensor:
    return disp.square().flatten(1).mean(dim=1)


def flip_image(image: torch.Tensor) -> torch.Tensor:
    """Exact horizontal mirror of a channel-last image (H, W, C)."""
    return image.flip(-2)


def write_flow_file(path, array) -> None:
    """Write a grid/flow field in the binary interchange format.

    Layout: magic "GGFL", uint32 LE H, W, C, then H*W*C float32 LE values,
    row-major and channel-last.
    """
    arr = np.asarray(array.detach().cpu().numpy() if isinstance(array, torch.Tensor)
                     else array, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"flow arrays are (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(arr.tobytes(order="C"))


def read_flow_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FLOW_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {FLOW_MAGIC!r}")
        h, w, c = struct.unpack("<III", fh.read(12))
        data = np.frombuffer(fh.read(h * w * c * 4), dtype="<f4")
        if data.size != h * w * c:
            raise ValueError("truncated flow file")
    return data.reshape(h, w, c).copy()
