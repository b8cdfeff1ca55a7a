"""Semi-Lagrangian advection of a latent field on the unit square.

A latent state is an NHWC tensor with one channel living on the uniform
H x W grid over [0,1]^2 (corner aligned, so grid node (i, j) sits at
``(j/(W-1), i/(H-1))``). Fields carry ``(wx, wy)`` in domain units per unit
time, ``wx`` along the width and ``wy`` along the height. One step
back-traces each node by ``w*dt`` and interpolates the previous state there:

    z(x, t + dt) = z(x - w(x, t) dt, t)

Back-traced points outside the domain clamp to the boundary, so boundary
features extend into the domain on inflow.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import ContractViolation, Tensor, affine, pixel_grid, sample_bilinear


@dataclass
class FieldSequence:
    """Per-step advection fields, each a (B,H,W,2) tensor, held constant over its step."""

    fields: list
    dt: float = 0.1

    def __post_init__(self):
        if len(self.fields) < 1:
            raise ContractViolation("a field sequence needs at least one step")

    def __len__(self):
        return len(self.fields)

    def __getitem__(self, s):
        return self.fields[s]

    @property
    def n_steps(self):
        return len(self.fields)

    def stacked(self):
        """Field values as one array of shape (N, B, H, W, 2)."""
        return np.stack([np.asarray(w.data if isinstance(w, Tensor) else w) for w in self.fields])

    @classmethod
    def from_array(cls, arr, dt=0.1):
        arr = np.asarray(arr)
        return cls([Tensor(a) for a in arr], dt=dt)

    @classmethod
    def zeros(cls, n, shape, dt=0.1, dtype=np.float64):
        return cls([Tensor(np.zeros(tuple(shape[:3]) + (2,), dtype=dtype)) for _ in range(n)], dt=dt)


def _check_state(z, w):
    if z.data.ndim != 4 or z.shape[-1] != 1:
        raise ContractViolation(f"latent state must be (B,H,W,1), got {z.shape}")
    if w.shape != z.shape[:3] + (2,):
        raise ContractViolation(f"field shape {w.shape} does not match state {z.shape}")


def advect_step(z, w, dt):
    """One semi-Lagrangian step of ``z`` under field ``w`` over time ``dt``."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    w = w if isinstance(w, Tensor) else Tensor(w, dtype=z.dtype)
    _check_state(z, w)
    B, H, W, _ = z.shape
    # integer grid plus displacement keeps the zero-field step exact
    base = pixel_grid(H, W, dtype=w.dtype)[None]
    scale = -dt * np.array([W - 1, H - 1], dtype=np.float64)
    pix = affine(w, scale, base)
    return sample_bilinear(z, pix)


def advect_rollout(z0, fields):
    """Compose steps in ascending order; returns ``[z0, z_dt, ..., z_T]``."""
    if not isinstance(fields, FieldSequence):
        raise ContractViolation("advect_rollout expects a FieldSequence")
    states = [z0 if isinstance(z0, Tensor) else Tensor(z0)]
    for w in fields.fields:
        states.append(advect_step(states[-1], w, fields.dt))
    return states


# ---------------------------------------------------------------------------
# streamlines


def _sample_field(field, pts):
    """Bilinear lookup of an (H,W,2) field at domain points (M,2), clamped."""
    H, W = field.shape[:2]
    px = np.clip(pts[:, 0] * (W - 1), 0, W - 1)
    py = np.clip(pts[:, 1] * (H - 1), 0, H - 1)
    x0 = np.minimum(np.floor(px).astype(int), max(W - 2, 0))
    y0 = np.minimum(np.floor(py).astype(int), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    top = field[y0, x0] * (1 - fx) + field[y0, x1] * fx
    bot = field[y1, x0] * (1 - fx) + field[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _field_at(fields, dt, pts, t):
    """Time-interpolated field value; W_s is attached to time s*dt."""
    n = fields.shape[0]
    u = t / dt
    s = int(np.clip(np.floor(u), 0, n - 1))
    frac = min(max(u - s, 0.0), 1.0)
    a = _sample_field(fields[s], pts)
    if s + 1 >= n or frac == 0.0:
        return a
    return (1 - frac) * a + frac * _sample_field(fields[s + 1], pts)


def streamlines(fields, seeds, dt=None, substeps=4, total_time=None):
    """Trace seeds through a time-dependent field with explicit midpoint steps.

    ``fields`` is a FieldSequence of single-batch fields or an array of shape
    (N,H,W,2). Each step is ``dt/substeps`` long; the integration spans
    ``N*dt`` unless ``total_time`` is given. A trajectory that leaves
    [0,1]^2 is clipped onto the boundary and stops there; a stagnant one
    stops at once. Returns one (M,2) array of (x, y) points per seed.
    """
    if isinstance(fields, FieldSequence):
        dt = fields.dt if dt is None else dt
        arr = fields.stacked()
        if arr.ndim == 5:
            arr = arr[:, 0]
    else:
        arr = np.asarray(fields, dtype=np.float64)
        if dt is None:
            raise ContractViolation("dt is required for raw field arrays")
    arr = arr.astype(np.float64)
    n = arr.shape[0]
    T = n * dt if total_time is None else total_time
    h = dt / substeps
    nsteps = int(round(T / h))
    lines = []
    for seed in np.atleast_2d(np.asarray(seeds, dtype=np.float64)):
        p = seed.copy()
        if np.any(p < 0) or np.any(p > 1):
            raise ContractViolation(f"seed {seed} outside the unit square")
        pts = [p.copy()]
        t = 0.0
        for _ in range(nsteps):
            k1 = _field_at(arr, dt, p[None], t)[0]
            mid = np.clip(p + 0.5 * h * k1, 0.0, 1.0)
            k2 = _field_at(arr, dt, mid[None], t + 0.5 * h)[0]
            step = h * k2
            if np.all(np.abs(step) < 1e-14):
                break
            q = p + step
            if np.any(q < 0) or np.any(q > 1):
                # stop where the segment meets the boundary
                lo = np.where(step < 0, (0 - p) / np.where(step == 0, 1, step), np.inf)
                hi = np.where(step > 0, (1 - p) / np.where(step == 0, 1, step), np.inf)
                frac = float(min(np.min(lo), np.min(hi), 1.0))
                q = np.clip(p + frac * step, 0.0, 1.0)
                if np.any(q != p):
                    pts.append(q)
                break
            p = q
            t += h
            pts.append(p.copy())
        lines.append(np.array(pts))
    return lines
