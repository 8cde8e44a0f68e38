"""Image sampling and SSIM, each with the adjoint needed for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class BilinearSample:
    """Result of sampling a grid at continuous coordinates.

    ``values[i]`` is the interpolated value, ``du``/``dv`` its partial
    derivatives wrt the sample coordinates, ``valid`` marks in-bounds samples.
    Invalid samples carry zeros everywhere.
    """

    values: np.ndarray
    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray
    flat_index: np.ndarray  # (N, 4) raveled corner indices
    weights: np.ndarray  # (N, 4) corner weights

    def scatter(self, grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        """Adjoint of the sampling wrt the grid values."""
        out = np.zeros(shape[0] * shape[1])
        np.add.at(out, self.flat_index.ravel(), (self.weights * grad[:, None]).ravel())
        return out.reshape(shape)


def bilinear_sample(grid: np.ndarray, u, v) -> BilinearSample:
    """Sample ``grid`` (H, W) at pixel coordinates ``u`` (column), ``v`` (row).

    Samples are valid when ``0 <= u <= W-1`` and ``0 <= v <= H-1``.
    """
    H, W = grid.shape
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    tol = 1e-9  # reprojected border pixels land a rounding error outside
    valid = (u >= -tol) & (u <= W - 1 + tol) & (v >= -tol) & (v <= H - 1 + tol)
    uc = np.where(valid, np.clip(u, 0, W - 1), 0.0)
    vc = np.where(valid, np.clip(v, 0, H - 1), 0.0)
    u0 = np.minimum(np.floor(uc).astype(np.int64), W - 2)
    v0 = np.minimum(np.floor(vc).astype(np.int64), H - 2)
    fu = uc - u0
    fv = vc - v0
    g = grid.ravel()
    i00 = v0 * W + u0
    idx = np.stack([i00, i00 + 1, i00 + W, i00 + W + 1], axis=1)
    g00, g01, g10, g11 = g[idx[:, 0]], g[idx[:, 1]], g[idx[:, 2]], g[idx[:, 3]]
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    values = w[:, 0] * g00 + w[:, 1] * g01 + w[:, 2] * g10 + w[:, 3] * g11
    du = (1 - fv) * (g01 - g00) + fv * (g11 - g10)
    dv = (1 - fu) * (g10 - g00) + fu * (g11 - g01)
    inv = ~valid
    values[inv] = 0.0
    du[inv] = 0.0
    dv[inv] = 0.0
    w[inv] = 0.0
    return BilinearSample(values, du, dv, valid, idx, w)


def sample_depth(depth: np.ndarray, u, v) -> BilinearSample:
    """Sample a positive depth grid by bilinear interpolation of inverse depth.

    Inverse depth is affine in pixel coordinates on a plane, so this lookup is
    exact inside planar regions. Derivatives and scatter weights refer to the
    depth values themselves.
    """
    s = bilinear_sample(1.0 / depth, u, v)
    d = np.zeros_like(s.values)
    d[s.valid] = 1.0 / s.values[s.valid]
    d2 = d * d
    g = depth.ravel()[s.flat_index]
    weights = s.weights * d2[:, None] / (g * g)
    return BilinearSample(d, -d2 * s.du, -d2 * s.dv, s.valid, s.flat_index, weights)


def _reflect_index(H: int, W: int) -> np.ndarray:
    return np.pad(np.arange(H * W).reshape(H, W), 1, mode="reflect")


def box3(x: np.ndarray) -> np.ndarray:
    """3x3 mean filter with reflect padding."""
    p = np.pad(x, 1, mode="reflect")
    H, W = x.shape
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy : dy + H, dx : dx + W]
    return acc / 9.0


def box3_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of :func:`box3`."""
    H, W = g.shape
    gp = np.zeros((H + 2, W + 2))
    for dy in range(3):
        for dx in range(3):
            gp[dy : dy + H, dx : dx + W] += g
    out = np.zeros(H * W)
    np.add.at(out, _reflect_index(H, W).ravel(), gp.ravel() / 9.0)
    return out.reshape(H, W)


def ssim(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM over 3x3 windows."""
    return _ssim_parts(x, y)[0]


def _ssim_parts(x, y):
    mx, my = box3(x), box3(y)
    sxx = box3(x * x) - mx * mx
    syy = box3(y * y) - my * my
    sxy = box3(x * y) - mx * my
    n1 = 2 * mx * my + SSIM_C1
    n2 = 2 * sxy + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = sxx + syy + SSIM_C2
    s = n1 * n2 / (d1 * d2)
    return s, (mx, my, n1, n2, d1, d2)


def ssim_backward(x: np.ndarray, y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient wrt ``x`` of ``sum(upstream * ssim(x, y))``."""
    s, (mx, my, n1, n2, d1, d2) = _ssim_parts(x, y)
    den = d1 * d2
    ds_dmx = (2 * my * n2 - s * 2 * mx * d2) / den
    ds_dsxy = 2 * n1 / den
    ds_dsxx = -s * d1 / den
    g_sxx = upstream * ds_dsxx
    g_sxy = upstream * ds_dsxy
    g_mx = upstream * ds_dmx - 2 * mx * g_sxx - my * g_sxy
    return box3_adjoint(g_mx) + 2 * x * box3_adjoint(g_sxx) + y * box3_adjoint(g_sxy)
