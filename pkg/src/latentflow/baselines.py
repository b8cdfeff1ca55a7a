"""Comparison methods: entropic optimal transport and image-space advection.

The OT route solves entropy-regularized transport between the two images
(treated as mass distributions on the pixel grid, squared Euclidean ground
cost in [0,1]^2) and renders intermediate frames by displacement
interpolation: every plan entry i -> k deposits its mass at
``(1-s) x_i + s x_k``, splatted bilinearly onto the grid.

The direct route fits advection fields to the images themselves, i.e. the
main model with identity encoder and decoder and no autoencoder term.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import eye, kron, vstack

from .data import ImagePair, scan_patches
from .inference import infer_image
from .networks import EncoderConfig, ModelBundle, decoder_config, field_config
from .training import LossWeights, OptimizerState, train

OT_MAX_PIXELS = 64 * 64
LOG_DOMAIN_BELOW = 1e-2


class OTSizeError(ValueError):
    pass


@dataclass
class TransportPlan:
    plan: np.ndarray
    mu1: np.ndarray
    mu2: np.ndarray
    cost: float
    n_iter: int
    converged: bool
    marginal_error: float
    epsilon: float
    dual_trace: list = field(default_factory=list)

    def row_sums(self):
        return self.plan.sum(axis=1)

    def col_sums(self):
        return self.plan.sum(axis=0)


def grid_points(H, W):
    """Pixel centers of an H x W grid in [0,1]^2 as (x, y) rows, row-major."""
    ys = np.linspace(0.0, 1.0, H) if H > 1 else np.zeros(1)
    xs = np.linspace(0.0, 1.0, W) if W > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def squared_cost(points):
    d = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def prepare_measure(mu, floor=1e-8):
    """Normalize to unit mass, floor every entry, renormalize."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    total = mu.sum()
    if not np.isfinite(total) or total <= 0 or np.any(mu < 0):
        raise ValueError("measure is not normalizable (needs nonnegative entries with positive sum)")
    mu = np.maximum(mu / total, floor)
    return mu / mu.sum()


def _lse_rows(M):
    m = M.max(axis=1)
    return m + np.log(np.exp(M - m[:, None]).sum(axis=1))


def sinkhorn(mu1, mu2, epsilon, max_iter=20000, tol=1e-7, floor=1e-8, cost=None, shape=None,
             log_domain=None, check_every=10):
    """Entropic OT between two grid measures by alternating marginal scaling.

    ``mu1``/``mu2`` are arrays on the same grid (any shape; ``shape`` gives
    the 2D extents when they are flat). Iterates until the row-marginal L1
    violation is at most ``tol`` (columns are exact after each sweep) or
    ``max_iter`` sweeps; a non-converged result is returned flagged. Works in
    the log domain automatically when ``epsilon < 1e-2``.
    """
    grid = shape or np.shape(mu1)
    if len(grid) == 1:
        grid = (1, grid[0])
    a = prepare_measure(mu1, floor)
    b = prepare_measure(mu2, floor)
    if a.size != b.size:
        raise ValueError("measures live on different grids")
    C = squared_cost(grid_points(*grid[:2])) if cost is None else np.asarray(cost, dtype=np.float64)
    if log_domain is None:
        log_domain = epsilon < LOG_DOMAIN_BELOW
    loga, logb = np.log(a), np.log(b)
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    trace = []
    err = np.inf
    it = 0
    if log_domain:
        negC = -C / epsilon
        for it in range(1, max_iter + 1):
            f = epsilon * (loga - _lse_rows(negC + g[None, :] / epsilon))
            g = epsilon * (logb - _lse_rows(negC.T + f[None, :] / epsilon))
            if it % check_every == 0 or it == max_iter:
                logP = negC + (f[:, None] + g[None, :]) / epsilon
                P = np.exp(logP)
                err = np.abs(P.sum(axis=1) - a).sum()
                trace.append(float(f @ a + g @ b - epsilon * P.sum()))
                if err <= tol:
                    break
        plan = np.exp(negC + (f[:, None] + g[None, :]) / epsilon)
    else:
        K = np.exp(-C / epsilon)
        u = np.ones(a.size)
        v = np.ones(b.size)
        for it in range(1, max_iter + 1):
            u = a / (K @ v)
            v = b / (K.T @ u)
            if it % check_every == 0 or it == max_iter:
                P = u[:, None] * K * v[None, :]
                err = np.abs(P.sum(axis=1) - a).sum()
                trace.append(float(epsilon * (np.log(u) @ a + np.log(v) @ b) - epsilon * P.sum()))
                if err <= tol:
                    break
        plan = u[:, None] * K * v[None, :]
    err = float(np.abs(plan.sum(axis=1) - a).sum() + np.abs(plan.sum(axis=0) - b).sum())
    return TransportPlan(plan, a, b, float(np.sum(C * plan)), it, err <= tol, err, epsilon, trace)


def exact_ot_cost(mu1, mu2, shape=None, floor=1e-8):
    """Unregularized optimum by linear programming (small grids only)."""
    grid = shape or np.shape(mu1)
    if len(grid) == 1:
        grid = (1, grid[0])
    a = prepare_measure(mu1, floor)
    b = prepare_measure(mu2, floor)
    n = a.size
    C = squared_cost(grid_points(*grid[:2]))
    ones = np.ones((1, n))
    A = kron(eye(n), ones).tocsr()
    Bm = kron(ones, eye(n)).tocsr()
    # the last column constraint follows from the others (both masses are 1); keeping it makes
    # HiGHS presolve declare floored instances infeasible over 1e-16 mass mismatches
    res = linprog(C.ravel(), A_eq=vstack([A, Bm[:-1]]), b_eq=np.concatenate([a, b[:-1]]), bounds=(0, None),
                  method="highs")
    if not res.success:
        raise RuntimeError(f"LP failed: {res.message}")
    return float(res.fun), res.x.reshape(n, n)


def splat(points, mass, H, W):
    """Bilinear deposit of point masses (x, y in [0,1]^2) onto an H x W grid."""
    px = np.clip(points[:, 0] * (W - 1), 0, W - 1)
    py = np.clip(points[:, 1] * (H - 1), 0, H - 1)
    x0 = np.minimum(np.floor(px).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(py).astype(np.intp), max(H - 2, 0))
    fx = px - x0
    fy = py - y0
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    out = np.zeros(H * W)
    for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                      (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        out += np.bincount(yy * W + xx, weights=mass * w, minlength=H * W)
    return out.reshape(H, W)


@dataclass
class OTInterpolation:
    frames: np.ndarray      # (N+1, H, W, 1) rescaled by the source total intensity
    densities: np.ndarray   # (N+1, H, W), unit mass each
    transport: TransportPlan
    method: str = "barycentric displacement interpolation"


def ot_interpolate(pair, N, epsilon=1e-2, max_iter=5000, tol=1e-7, floor=1e-8, keep_below=1e-15, transport=None):
    """Displacement interpolation between the two images of ``pair`` in N steps.

    ``transport`` reuses an already solved plan for the same pair.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if not isinstance(pair, ImagePair):
        pair = ImagePair(*pair)
    H, W, C = pair.x0.shape
    if C != 1:
        raise ValueError("OT interpolation needs single-channel images")
    if H * W > OT_MAX_PIXELS:
        raise OTSizeError(f"OT baseline is capped at 64x64 pixels (dense {H * W}^2 plan); got {H}x{W}")
    img0, img1 = pair.x0[..., 0], pair.x1[..., 0]
    shift = min(img0.min(), img1.min())
    if shift < 0:
        img0, img1 = img0 - shift, img1 - shift
    source_mass = float(img0.sum())
    tp = transport or sinkhorn(img0, img1, epsilon, max_iter=max_iter, tol=tol, floor=floor, shape=(H, W))
    pts = grid_points(H, W)
    ii, kk = np.nonzero(tp.plan > keep_below)
    mass = tp.plan[ii, kk]
    dens = []
    for j in range(N + 1):
        s = j / N
        dens.append(splat((1 - s) * pts[ii] + s * pts[kk], mass, H, W))
    dens = np.stack(dens)
    return OTInterpolation((dens * source_mass)[..., None], dens, tp)


# ---------------------------------------------------------------------------
# direct image-space advection


@dataclass
class DirectFit:
    bundle: ModelBundle
    rows: list
    result: object


def direct_bundle(field_cfg, n_evolution=10, dt=0.1, seed=0, patch=None):
    """Identity-codec bundle: only the field extractor is learned."""
    return ModelBundle(EncoderConfig(in_channels=1), decoder_config(1), field_cfg, n_evolution, dt, seed,
                       identity_codecs=True, patch=patch)


def direct_pde_fit(pair, patch, stride=(1, 1), n_evolution=10, dt=0.1, weights=None, opt=None,
                   iterations=1000, batch_size=16, seed=0, field_cfg=None, metrics_path=None, log_every=100):
    """Fit advection fields directly in image space with the shared training loop."""
    weights = weights or LossWeights()
    weights = LossWeights(0.0, weights.magnitude, weights.smooth)
    opt = opt or OptimizerState()
    field_cfg = field_cfg or field_config(1, n_evolution)
    bundle = direct_bundle(field_cfg, n_evolution, dt, seed, patch)
    patches = scan_patches(pair, patch[0], patch[1], stride[0], stride[1])
    bundle, rows = train(patches, bundle, opt, weights, iterations, batch_size, seed, log_every, metrics_path)
    result = infer_image(pair, bundle, patch)
    result.method = "direct image-space advection"
    return DirectFit(bundle, rows, result)
