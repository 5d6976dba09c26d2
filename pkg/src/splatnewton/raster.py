"""Forward splatting: projection, tile binning, front-to-back compositing with
per-record capture, Gaussian-weight derivatives and a brute-force reference.

Compositing follows

    c(m, n) = sum_k G_k sigma_k c_k prod_{j<k} (1 - G_j sigma_j) + T_final * background

with a single global depth order per view.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .camera import (LOWPASS, W_EPS, homogeneous, project_center, project_covariance_2d,
                     view_direction)
from .errors import NumericalDegeneracyError
from .sh import eval_view_color, sh_polynomials

TILE = 16


@dataclass(frozen=True)
class RenderOptions:
    """Approximation knobs of the tiled rasterizer.

    With ``cutoffs=False`` every visible kernel is binned into every tile and
    no splat or pixel is skipped, which makes the output equal to the
    reference renderer up to round-off.
    """

    cutoffs: bool = True
    alpha_min: float = 1e-4
    t_min: float = 1e-4
    extent_sigma: float = 3.0
    lowpass: float = LOWPASS
    tile: int = TILE


EXACT = RenderOptions(cutoffs=False)
DEFAULT = RenderOptions()


@dataclass
class GaussianWeight:
    """G and its derivatives w.r.t. the projected center and covariance.

    Shapes for a leading batch ``B``: value (B,), d_pi (B, 2), d2_pi (B, 2, 2),
    d_cov (B, 2, 2), d2_cov (B, 2, 2, 2, 2), d_pi_cov (B, 2, 2, 2).
    """

    value: np.ndarray
    d_pi: np.ndarray
    d2_pi: np.ndarray
    d_cov: np.ndarray
    d2_cov: np.ndarray
    d_pi_cov: np.ndarray


def gaussian_weight_derivatives(conic, d, G=None, second=True):
    """Derivatives of ``G = exp(-d^T conic d / 2)`` with ``d = pi - x``.

    Covariance derivatives treat the four entries of Sigma as independent and
    are symmetrized over (i, j) and (p, l).
    """
    e = np.einsum("...ij,...j->...i", conic, d)
    if G is None:
        G = np.exp(-0.5 * np.einsum("...i,...i->...", d, e))
    Gb = G[..., None]
    ee = e[..., :, None] * e[..., None, :]
    d_pi = -Gb * e
    d_cov = 0.5 * G[..., None, None] * ee
    if not second:
        return GaussianWeight(G, d_pi, None, d_cov, None, None)
    d2_pi = G[..., None, None] * (ee - conic)
    eeee = ee[..., :, :, None, None] * ee[..., None, None, :, :]
    # d2E/dS_pl dS_gh = -1/2 e_h (C_pg e_l + C_lg e_p), then symmetrize (g, h)
    ce = conic[..., :, :, None] * e[..., None, None, :]   # C_pg e_h -> [p, g, h]
    t = -0.5 * (np.einsum("...pgh,...l->...plgh", ce, e)
                + np.einsum("...lgh,...p->...plgh", ce, e))
    t = 0.5 * (t + np.swapaxes(t, -1, -2))
    d2_cov = G[..., None, None, None, None] * (0.25 * eeee + t)
    # d2G/dpi_i dS_pl
    eee = e[..., :, None, None] * ee[..., None, :, :]
    ce2 = conic[..., :, :, None] * e[..., None, None, :]  # C_ip e_l -> [i, p, l]
    d_pi_cov = G[..., None, None, None] * (-0.5 * eee + 0.5 * (ce2 + np.swapaxes(ce2, -1, -2)))
    return GaussianWeight(G, d_pi, d2_pi, d_cov, d2_cov, d_pi_cov)


def gaussian_weight(cov, pi, x):
    """G at pixel coordinate ``x`` for a 2D Gaussian (cov, pi), with derivatives."""
    cov = np.asarray(cov, dtype=np.float64)
    det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
    if np.any(det <= 0.0):
        raise NumericalDegeneracyError("2D covariance is singular or indefinite")
    conic = np.linalg.inv(cov)
    d = np.asarray(pi, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    return gaussian_weight_derivatives(conic, d)


@dataclass
class Projection:
    """All kernels projected into one view (rows of culled kernels are unused)."""

    visible: np.ndarray
    means2d: np.ndarray
    depth: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    colors: np.ndarray
    view_dirs: np.ndarray
    opacities: np.ndarray


def project_scene(scene, camera, lowpass=LOWPASS):
    n = len(scene)
    means2d = np.zeros((n, 2))
    depth = np.zeros(n)
    cov2d = np.tile(np.eye(2), (n, 1, 1))
    colors = np.zeros((n, 3))
    view_dirs = np.zeros((n, 3))
    visible = np.zeros(n, dtype=bool)
    if n:
        h = homogeneous(camera, scene.positions)
        visible = h[:, 3] > W_EPS
    idx = np.flatnonzero(visible)
    if len(idx):
        p = scene.positions[idx]
        means2d[idx], _, depth[idx] = project_center(camera, p)
        cov2d[idx], _ = project_covariance_2d(camera, p, scene.covariances()[idx], lowpass)
        view_dirs[idx] = view_direction(camera, p)
        basis = sh_polynomials(view_dirs[idx], scene.sh_degree, order=0)
        colors[idx] = eval_view_color(basis, scene.sh[idx])
    conic = np.linalg.inv(cov2d)
    return Projection(visible, means2d, depth, cov2d, conic, colors, view_dirs,
                      scene.opacities.copy())


@dataclass
class SplatList:
    """Depth-sorted visible kernels and a tile -> kernel index.

    ``tile_kernels[tile_offsets[t]:tile_offsets[t] + tile_counts[t]]`` lists the
    kernels binned into tile ``t`` in global depth order.
    """

    projection: Projection
    order: np.ndarray
    tiles_x: int
    tiles_y: int
    tile_offsets: np.ndarray
    tile_counts: np.ndarray
    tile_kernels: np.ndarray
    background: np.ndarray
    options: RenderOptions = field(default_factory=RenderOptions)

    def tile(self, t):
        o = self.tile_offsets[t]
        return self.tile_kernels[o:o + self.tile_counts[t]]


def depth_order(projection):
    idx = np.flatnonzero(projection.visible)
    # stable: ties broken by kernel id
    return idx[np.lexsort((idx, projection.depth[idx]))]


def kernel_tile_ranges(projection, ids, width, height, options):
    """Inclusive tile ranges (tx0, tx1, ty0, ty1) of each kernel's bounding box.

    The box is the axis-aligned bound of the ``extent_sigma`` ellipse. Boxes
    that miss the image yield empty ranges (tx0 > tx1 or ty0 > ty1).
    """
    ts = options.tile
    tiles_x = -(-width // ts)
    tiles_y = -(-height // ts)
    if not options.cutoffs:
        n = len(ids)
        return (np.zeros(n, int), np.full(n, tiles_x - 1), np.zeros(n, int),
                np.full(n, tiles_y - 1))
    cov = projection.cov2d[ids]
    # beyond this Mahalanobis radius alpha < alpha_min, so binning adds no error
    ratio = np.maximum(projection.opacities[ids] / options.alpha_min, 1.0)
    radius = np.maximum(options.extent_sigma, np.sqrt(2.0 * np.log(ratio)))
    ext = radius[:, None] * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1))
    lo = projection.means2d[ids] - ext
    hi = projection.means2d[ids] + ext
    tx0 = np.clip(np.floor(lo[:, 0] / ts), 0, tiles_x).astype(int)
    ty0 = np.clip(np.floor(lo[:, 1] / ts), 0, tiles_y).astype(int)
    tx1 = np.clip(np.floor(hi[:, 0] / ts), -1, tiles_x - 1).astype(int)
    ty1 = np.clip(np.floor(hi[:, 1] / ts), -1, tiles_y - 1).astype(int)
    return tx0, tx1, ty0, ty1


def build_splat_list(scene, camera, options=DEFAULT, projection=None):
    if projection is None:
        projection = project_scene(scene, camera, options.lowpass)
    ts = options.tile
    tiles_x = -(-camera.width // ts)
    tiles_y = -(-camera.height // ts)
    order = depth_order(projection)
    tx0, tx1, ty0, ty1 = kernel_tile_ranges(projection, order, camera.width, camera.height, options)
    nx = np.maximum(tx1 - tx0 + 1, 0)
    ny = np.maximum(ty1 - ty0 + 1, 0)
    counts = nx * ny
    owner = np.repeat(np.arange(len(order)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    local = np.arange(counts.sum()) - start
    tx = tx0[owner] + local % np.maximum(nx[owner], 1)
    ty = ty0[owner] + local // np.maximum(nx[owner], 1)
    tile_id = ty * tiles_x + tx
    perm = np.argsort(tile_id, kind="stable")  # keeps depth order inside a tile
    tile_kernels = order[owner[perm]]
    n_tiles = tiles_x * tiles_y
    tile_counts = np.bincount(tile_id, minlength=n_tiles)
    tile_offsets = np.cumsum(tile_counts) - tile_counts
    return SplatList(projection, order, tiles_x, tiles_y, tile_offsets, tile_counts,
                     tile_kernels, np.asarray(scene.background, dtype=np.float64), options)


@dataclass
class Capture:
    """Per-(pixel, kernel) records of one forward pass (SplatRecords, column-wise).

    ``pix`` is the flat pixel index ``row * width + col``. ``dcda`` is the
    derivative of the pixel color w.r.t. the record's alpha, including the
    effect on every splat behind it and on the background term.
    """

    n_kernels: int
    width: int
    height: int
    pix: np.ndarray
    kid: np.ndarray
    G: np.ndarray
    alpha: np.ndarray
    T: np.ndarray
    d: np.ndarray
    dcda: np.ndarray
    projection: Projection
    _summer: object = None

    def __len__(self):
        return len(self.pix)

    def kernel_sum(self, values):
        """Sum per-record values (R, ...) into per-kernel totals (N, ...)."""
        values = np.asarray(values)
        if self._summer is None:
            self._summer = sp.csr_matrix(
                (np.ones(len(self.kid)), (self.kid, np.arange(len(self.kid)))),
                shape=(self.n_kernels, len(self.kid)))
        flat = values.reshape(len(values), -1)
        return np.asarray(self._summer @ flat).reshape((self.n_kernels,) + values.shape[1:])


@dataclass
class RenderTarget:
    width: int
    height: int
    color: np.ndarray
    final_T: np.ndarray
    capture: Capture | None = None


def _composite_tile(sl, ks, xy, options):
    proj = sl.projection
    d = proj.means2d[ks][None, :, :] - xy[:, None, :]
    conic = proj.conic[ks]
    power = -0.5 * np.einsum("pki,kij,pkj->pk", d, conic, d)
    G = np.exp(power)
    a = G * proj.opacities[ks][None, :]
    if options.cutoffs:
        a = np.where(a >= options.alpha_min, a, 0.0)
        T = np.cumprod(1.0 - a, axis=1)
        T_before = np.concatenate([np.ones((len(xy), 1)), T[:, :-1]], axis=1)
        keep = (a > 0.0) & (T_before >= options.t_min)
        a = np.where(keep, a, 0.0)
    else:
        keep = np.ones_like(a, dtype=bool)
    T = np.cumprod(1.0 - a, axis=1)
    T_final = T[:, -1]
    T_before = np.concatenate([np.ones((len(xy), 1)), T[:, :-1]], axis=1)
    contrib = (a * T_before)[:, :, None] * proj.colors[ks][None, :, :]
    color = contrib.sum(axis=1) + T_final[:, None] * sl.background
    return d, G, a, T_before, T_final, contrib, keep, color


def composite_forward(splat_list, camera, capture=False):
    """Rasterize a splat list. With ``capture`` the records for every composited
    splat are returned for the derivative passes."""
    sl = splat_list
    options = sl.options
    W, H, ts = camera.width, camera.height, options.tile
    color = np.tile(sl.background, (H, W, 1)).astype(np.float64)
    final_T = np.ones((H, W))
    recs = []
    for t in np.flatnonzero(sl.tile_counts):
        ty, tx = divmod(t, sl.tiles_x)
        ks = sl.tile(t)
        cols = np.arange(tx * ts, min((tx + 1) * ts, W))
        rows = np.arange(ty * ts, min((ty + 1) * ts, H))
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        xy = np.stack([cc + 0.5, rr + 0.5], axis=1)
        d, G, a, T_before, T_final, contrib, keep, tile_color = _composite_tile(sl, ks, xy, options)
        color[rr, cc] = tile_color
        final_T[rr, cc] = T_final
        if capture:
            # everything composited behind each record, background included
            behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
            behind = behind + T_final[:, None, None] * sl.background
            colors = sl.projection.colors[ks][None]
            dcda = T_before[:, :, None] * colors - behind / (1.0 - a)[:, :, None]
            pi_, ki_ = np.nonzero(keep)
            recs.append(((rr * W + cc)[pi_], ks[ki_], G[pi_, ki_], a[pi_, ki_],
                         T_before[pi_, ki_], d[pi_, ki_], dcda[pi_, ki_]))
    cap = None
    if capture:
        n = len(sl.projection.visible)
        if recs:
            parts = [np.concatenate(c) for c in zip(*recs)]
        else:
            parts = [np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0),
                     np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3))]
        cap = Capture(n, W, H, *parts, projection=sl.projection)
    return RenderTarget(W, H, color, final_T, cap)


def render(scene, camera, options=DEFAULT, capture=False, projection=None):
    sl = build_splat_list(scene, camera, options, projection)
    return composite_forward(sl, camera, capture)


def render_reference(scene, camera, lowpass=LOWPASS, projection=None):
    """Oracle renderer: no tiles, no cutoffs, one kernel at a time over all pixels."""
    if projection is None:
        projection = project_scene(scene, camera, lowpass)
    xy = camera.pixel_centers()
    color = np.zeros((camera.height, camera.width, 3))
    T = np.ones((camera.height, camera.width))
    for k in depth_order(projection):
        d = projection.means2d[k] - xy
        q = d @ projection.conic[k]
        G = np.exp(-0.5 * np.sum(q * d, axis=-1))
        a = G * projection.opacities[k]
        color += (a * T)[..., None] * projection.colors[k]
        T = T * (1.0 - a)
    color += T[..., None] * np.asarray(scene.background, dtype=np.float64)
    return RenderTarget(camera.width, camera.height, color, T)
