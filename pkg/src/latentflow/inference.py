"""Patch and full-image inference, plus frame/field/streamline export."""

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .advection import FieldSequence, advect_rollout, streamlines
from .data import ImageIOError, denormalize, normalize_pair, save_image
from .tensor import ContractViolation, Tensor

FIELD_MAGIC = b"LADV"
FIELD_VERSION = 1


@dataclass
class PatchInference:
    frames: list
    fields: FieldSequence
    latents: list


@dataclass
class ImageInference:
    frames: np.ndarray          # (N+1, H, W, C), de-normalized
    fields: np.ndarray          # (N, H, W, 2), patch-domain units per unit time; None if no fields
    latents: np.ndarray         # (N+1, H, W)
    dt: float
    patch: tuple
    tiles: list = field(default_factory=list)
    x0: np.ndarray = None
    x1: np.ndarray = None
    method: str = "latent-advection"

    @property
    def n_steps(self):
        return self.frames.shape[0] - 1

    def image_fields(self):
        """Fields rescaled to domain units of the whole image."""
        H, W = self.frames.shape[1:3]
        hp, wp = self.patch
        scale = np.array([(wp - 1) / max(W - 1, 1), (hp - 1) / max(H - 1, 1)])
        return self.fields * scale

    def endpoint_errors(self):
        out = {}
        for name, frame, ref in (("initial", self.frames[0], self.x0), ("terminal", self.frames[-1], self.x1)):
            if ref is None:
                continue
            out[f"{name}_rel_l2"] = relative_l2(frame, ref)
            out[f"{name}_psnr_db"] = psnr(frame, ref)
        return out


def relative_l2(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(peak * peak / mse)


def infer_patch(x0, bundle):
    """Run the model on one normalized patch (H,W,C) or batch (B,H,W,C).

    Frame 0 is the reconstruction decode(encode(x0)); frame j decodes latent j.
    """
    x = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=bundle.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] != bundle.field_cfg.in_channels:
        raise ContractViolation(f"patch has {x.shape[-1]} channels, bundle expects {bundle.field_cfg.in_channels}")
    xt = Tensor(x)
    z0 = bundle.encode(xt)
    fields = bundle.extract_fields(xt)
    latents = advect_rollout(z0, fields)
    B = x.shape[0]
    stacked = Tensor(np.concatenate([z.data for z in latents], axis=0))
    decoded = bundle.decode(stacked).data
    frames = [decoded[j * B:(j + 1) * B] for j in range(len(latents))]
    return PatchInference(frames, fields, latents)


def _pad_to(img, hp, wp):
    H, W = img.shape[:2]
    ph = (-H) % hp
    pw = (-W) % wp
    if ph == 0 and pw == 0:
        return img
    mode = "reflect" if (ph < H and pw < W) else "symmetric"
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode=mode)


def infer_image(pair, bundle, patch=None):
    """Tile the pair with non-overlapping patches and stitch per-tile results.

    Each tile is normalized with the shared range of its two endpoint patches
    and its frames are mapped back with that same range.
    """
    hp, wp = patch or bundle.patch or pair.x0.shape[:2]
    H, W, C = pair.x0.shape
    x0 = _pad_to(pair.x0, hp, wp)
    x1 = _pad_to(pair.x1, hp, wp)
    Hp, Wp = x0.shape[:2]
    N = bundle.n_evolution
    frames = np.zeros((N + 1, Hp, Wp, C))
    fields = np.zeros((N, Hp, Wp, 2))
    latents = np.zeros((N + 1, Hp, Wp))
    tiles = []
    for r in range(0, Hp, hp):
        for c in range(0, Wp, wp):
            p0, p1, rec = normalize_pair(x0[r:r + hp, c:c + wp], x1[r:r + hp, c:c + wp])
            res = infer_patch(p0, bundle)
            for j, fr in enumerate(res.frames):
                frames[j, r:r + hp, c:c + wp] = denormalize(fr[0], rec)
            fields[:, r:r + hp, c:c + wp] = res.fields.stacked()[:, 0]
            for j, z in enumerate(res.latents):
                latents[j, r:r + hp, c:c + wp] = z.data[0, ..., 0]
            tiles.append({"origin": (r, c), "lo": rec.lo, "hi": rec.hi})
    return ImageInference(frames[:, :H, :W], fields[:, :H, :W], latents[:, :H, :W], bundle.dt, (hp, wp), tiles,
                          pair.x0, pair.x1)


# ---------------------------------------------------------------------------
# export formats


def write_field_bin(path, fields):
    """Write fields (N,H,W,2) as LADV: magic, u32 version, u32 N, H, W, then float32 LE."""
    arr = np.asarray(fields)
    if arr.ndim == 3:
        arr = arr[None]
    N, H, W, two = arr.shape
    if two != 2:
        raise ValueError("fields need two components")
    try:
        with open(path, "wb") as fh:
            fh.write(FIELD_MAGIC)
            fh.write(struct.pack("<IIII", FIELD_VERSION, N, H, W))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def read_field_bin(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    if blob[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: bad field file magic")
    version, N, H, W = struct.unpack_from("<IIII", blob, 4)
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: field file version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=20)
    if data.size != N * H * W * 2:
        raise ValueError(f"{path}: payload has {data.size} values, expected {N * H * W * 2}")
    return data.reshape(N, H, W, 2).copy()


def write_quiver_csv(path, field2d, every=8):
    """Subsampled field vectors: one ``row,col,wx,wy`` line per k-th grid point."""
    H, W = field2d.shape[:2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "wx", "wy"])
        for r in range(0, H, every):
            for c in range(0, W, every):
                w.writerow([r, c, f"{field2d[r, c, 0]:.9g}", f"{field2d[r, c, 1]:.9g}"])


def read_quiver_csv(path):
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return arr


def write_streamlines_csv(path, lines):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "step", "x", "y"])
        for i, line in enumerate(lines):
            for s, (x, y) in enumerate(line):
                w.writerow([i, s, f"{x:.9g}", f"{y:.9g}"])


def seed_grid(n=8):
    """``n x n`` seeds at the centers of an even partition of the unit square."""
    t = (np.arange(n) + 0.5) / n
    gx, gy = np.meshgrid(t, t)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def export_artifacts(result, out_dir, quiver_every=8, n_seeds=8, prefix="", extra_metrics=None):
    """Write frames, per-step field files, quiver CSVs, streamlines and endpoint metrics."""
    target = os.path.join(out_dir, prefix) if prefix else out_dir
    try:
        os.makedirs(target, exist_ok=True)
    except OSError as exc:
        raise ImageIOError(f"{target}: {exc}") from exc
    written = []
    C = result.frames.shape[-1]
    for j, frame in enumerate(result.frames):
        if C == 1:
            path = os.path.join(target, f"frame_{j:03d}.png")
            save_image(path, frame)
            written.append(path)
        else:
            for c in range(C):
                path = os.path.join(target, f"frame_{j:03d}_c{c}.png")
                save_image(path, frame[..., c])
                written.append(path)
    if result.fields is not None:
        for s in range(result.n_steps):
            path = os.path.join(target, f"field_{s:03d}.bin")
            write_field_bin(path, result.fields[s])
            written.append(path)
            path = os.path.join(target, f"field_{s:03d}.csv")
            write_quiver_csv(path, result.fields[s], quiver_every)
            written.append(path)
        lines = streamlines(result.image_fields(), seed_grid(n_seeds), dt=result.dt)
        path = os.path.join(target, "streamlines.csv")
        write_streamlines_csv(path, lines)
        written.append(path)
    metrics = {"method": result.method, "n_steps": result.n_steps, "dt": result.dt}
    metrics.update(result.endpoint_errors())
    metrics.update(extra_metrics or {})
    path = os.path.join(target, "metrics.json")
    try:
        with open(path, "w") as fh:
            json.dump(metrics, fh, indent=1, sort_keys=True)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    written.append(path)
    return written
