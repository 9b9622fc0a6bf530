"""Coarse-to-fine variational optical flow and flow color coding.

The solver minimizes

    E(u, v) = sum_p psi(r_p^2) + alpha * sum_p psi(|grad u_p|^2 + |grad v_p|^2)

with the Charbonnier penalty ``psi(s^2) = sqrt(s^2 + eps^2)`` and the warped
brightness residual ``r_p = I_b(p + w_p) - I_a(p)``.  Each pyramid level runs
a few outer warping iterations; every outer iteration linearizes the data
term and solves for the flow increment by iteratively reweighted least
squares, each reweighting followed by one block SOR sweep.  An outer step
that would raise the energy is halved until it does not.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .core import to_gray

log = logging.getLogger(__name__)

EPS = 1e-3
SOR_OMEGA = 1.8
MAX_HALVINGS = 6
FLO_MAGIC = b"PIEH"


class FlowError(RuntimeError):
    pass


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    energy_log: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError("u and v must be 2-D arrays of equal shape")

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @property
    def width(self) -> int:
        return self.u.shape[1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass(frozen=True)
class FlowParams:
    alpha: float = 0.02
    pyramid_ratio: float = 0.5
    min_size: int = 16
    outer_iters: int = 5
    inner_iters: int = 30


# ---------------------------------------------------------------------------
# numerics


_DERIV = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0


def _gradients(img):
    ix = ndimage.correlate1d(img, _DERIV, axis=1, mode="nearest")
    iy = ndimage.correlate1d(img, _DERIV, axis=0, mode="nearest")
    return ix, iy


def _warp(img, u, v):
    h, w = img.shape
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    return ndimage.map_coordinates(img, [yy + v, xx + u], order=1, mode="nearest")


def _forward_diff(f):
    dx = np.zeros_like(f)
    dy = np.zeros_like(f)
    dx[:, :-1] = f[:, 1:] - f[:, :-1]
    dy[:-1, :] = f[1:, :] - f[:-1, :]
    return dx, dy


def energy(a: np.ndarray, b: np.ndarray, u: np.ndarray, v: np.ndarray, alpha: float) -> float:
    """Charbonnier energy of flow ``(u, v)`` from gray image ``a`` to ``b``."""
    r = _warp(b, u, v) - a
    ux, uy = _forward_diff(u)
    vx, vy = _forward_diff(v)
    data = np.sqrt(r * r + EPS * EPS).sum()
    smooth = np.sqrt(ux * ux + uy * uy + vx * vx + vy * vy + EPS * EPS).sum()
    return float(data + alpha * smooth)


@njit(cache=True, error_model="numpy")
def _irls_sor(ix, iy, it0, uu, vv, alpha, inner_iters, omega, eps2):
    # Solves for the full flow (uu, vv) in place; the linearized residual is
    # it0 + ix*uu + iy*vv with it0 already absorbing the warp point.
    h, w = ix.shape
    phi_d = np.empty((h, w))
    phi_s = np.empty((h, w))
    for _ in range(inner_iters):
        for y in range(h):
            for x in range(w):
                r = it0[y, x] + ix[y, x] * uu[y, x] + iy[y, x] * vv[y, x]
                phi_d[y, x] = 1.0 / math.sqrt(r * r + eps2)
                gxu = uu[y, x + 1] - uu[y, x] if x + 1 < w else 0.0
                gxv = vv[y, x + 1] - vv[y, x] if x + 1 < w else 0.0
                gyu = uu[y + 1, x] - uu[y, x] if y + 1 < h else 0.0
                gyv = vv[y + 1, x] - vv[y, x] if y + 1 < h else 0.0
                phi_s[y, x] = alpha / math.sqrt(gxu * gxu + gyu * gyu + gxv * gxv + gyv * gyv + eps2)
        for y in range(h):
            for x in range(w):
                wsum = 0.0
                su = 0.0
                sv = 0.0
                if x + 1 < w:
                    e = phi_s[y, x]
                    wsum += e
                    su += e * uu[y, x + 1]
                    sv += e * vv[y, x + 1]
                if x > 0:
                    e = phi_s[y, x - 1]
                    wsum += e
                    su += e * uu[y, x - 1]
                    sv += e * vv[y, x - 1]
                if y + 1 < h:
                    e = phi_s[y, x]
                    wsum += e
                    su += e * uu[y + 1, x]
                    sv += e * vv[y + 1, x]
                if y > 0:
                    e = phi_s[y - 1, x]
                    wsum += e
                    su += e * uu[y - 1, x]
                    sv += e * vv[y - 1, x]
                pd = phi_d[y, x]
                gx = ix[y, x]
                gy = iy[y, x]
                a11 = pd * gx * gx + wsum
                a12 = pd * gx * gy
                a22 = pd * gy * gy + wsum
                b1 = su - pd * gx * it0[y, x]
                b2 = sv - pd * gy * it0[y, x]
                det = a11 * a22 - a12 * a12
                if det <= 1e-300:
                    continue
                nu = (a22 * b1 - a12 * b2) / det
                nv = (a11 * b2 - a12 * b1) / det
                uu[y, x] += omega * (nu - uu[y, x])
                vv[y, x] += omega * (nv - vv[y, x])


def _pyramid(img, ratio, min_size):
    levels = [img]
    sigma = 1.0 / math.sqrt(2.0 * ratio)
    while True:
        cur = levels[-1]
        h, w = cur.shape
        nh, nw = int(round(h * ratio)), int(round(w * ratio))
        if min(nh, nw) < min_size:
            break
        levels.append(_resize(ndimage.gaussian_filter(cur, sigma, mode="nearest"), nh, nw))
    return levels


def _resize(img, nh, nw):
    h, w = img.shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _as_gray(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    return to_gray(arr) if arr.ndim == 3 else arr


def compute_flow(a, b, alpha: float = 0.02, pyramid_ratio: float = 0.5, min_size: int = 16,
                 outer_iters: int = 5, inner_iters: int = 30) -> FlowField:
    """Dense flow from image ``a`` to image ``b`` (``b(p + w(p)) ~ a(p)``).

    ``energy_log`` on the result holds the finest-level energy before the
    first and after every outer iteration.
    """
    ga = _as_gray(a)
    gb = _as_gray(b)
    if ga.shape != gb.shape:
        raise FlowError(f"dimension mismatch: {ga.shape} vs {gb.shape}")
    if min(ga.shape) < min_size:
        raise FlowError(f"images must be at least {min_size} px on each side")
    pa = _pyramid(ga, pyramid_ratio, min_size)
    pb = _pyramid(gb, pyramid_ratio, min_size)

    u = np.zeros(pa[-1].shape)
    v = np.zeros(pa[-1].shape)
    elog: list[float] = []
    for lvl in range(len(pa) - 1, -1, -1):
        ia, ib = pa[lvl], pb[lvl]
        if u.shape != ia.shape:
            sy = ia.shape[0] / u.shape[0]
            sx = ia.shape[1] / u.shape[1]
            u = _resize(u, *ia.shape) * sx
            v = _resize(v, *ia.shape) * sy
        finest = lvl == 0
        e_cur = energy(ia, ib, u, v, alpha)
        if finest:
            elog.append(e_cur)
        ax, ay = _gradients(ia)
        for _ in range(outer_iters):
            wb = _warp(ib, u, v)
            bx, by = _gradients(wb)
            ix = 0.5 * (ax + bx)
            iy = 0.5 * (ay + by)
            it = wb - ia
            uu = u.copy()
            vv = v.copy()
            _irls_sor(ix, iy, it - ix * u - iy * v, uu, vv, alpha, inner_iters, SOR_OMEGA, EPS * EPS)
            du = uu - u
            dv = vv - v
            if not (np.all(np.isfinite(du)) and np.all(np.isfinite(dv))):
                raise FlowError("solver divergence")
            # backtrack so the true (warped) energy never goes up
            step = 1.0
            for _ in range(MAX_HALVINGS):
                e_new = energy(ia, ib, u + step * du, v + step * dv, alpha)
                if e_new <= e_cur:
                    break
                step *= 0.5
            else:
                step = 0.0
                e_new = e_cur
            if step > 0:
                u = u + step * du
                v = v + step * dv
            e_cur = e_new
            if finest:
                elog.append(e_cur)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise FlowError("solver divergence")
    return FlowField(u, v, elog)


# ---------------------------------------------------------------------------
# color coding


def make_colorwheel() -> np.ndarray:
    """The 55-entry Middlebury color wheel, RGB in [0, 255]."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[0:ry, 0] = 255
    wheel[0:ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


_WHEEL = make_colorwheel() / 255.0


def flow_angle_index(u, v) -> np.ndarray:
    """Fractional position on the color wheel, in ``[0, ncols - 1]``."""
    ncols = _WHEEL.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    return (a + 1.0) / 2.0 * (ncols - 1)


def flow_to_rgb(f: FlowField, max_magnitude: float | str | None = "auto") -> np.ndarray:
    """Encode flow as an RGB image: hue is direction, saturation is magnitude.

    Magnitudes are divided by ``max_magnitude`` and clamped to 1; zero flow is
    white.  ``"auto"`` (or ``None``) uses the 95th-percentile magnitude.
    """
    u, v = f.u, f.v
    rad = np.hypot(u, v)
    if max_magnitude in (None, "auto"):
        max_magnitude = float(np.percentile(rad, 95))
    max_magnitude = float(max_magnitude)
    if max_magnitude > 0:
        nrad = np.minimum(rad / max_magnitude, 1.0)
    else:
        nrad = np.zeros_like(rad)
    fk = flow_angle_index(u, v)
    ncols = _WHEEL.shape[0]
    k0 = np.floor(fk).astype(np.intp)
    k1 = k0 + 1
    k1[k1 == ncols] = 0
    frac = (fk - k0)[..., None]
    col = (1 - frac) * _WHEEL[k0] + frac * _WHEEL[k1]
    out = 1.0 - nrad[..., None] * (1.0 - col)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# .flo IO


def write_flo(path, f: FlowField) -> None:
    data = np.stack([f.u, f.v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(struct.pack("<ii", f.width, f.height))
        fh.write(data.tobytes())


def read_flo(path) -> FlowField:
    raw = Path(path).read_bytes()
    if raw[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: bad .flo magic")
    w, h = struct.unpack_from("<ii", raw, 4)
    data = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    return FlowField(data[:, :, 0].astype(np.float64), data[:, :, 1].astype(np.float64))
