"""Image ingestion, pair normalization, patch scanning and synthetic scenes."""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .advection import FieldSequence, advect_rollout
from .tensor import Tensor


class ImageIOError(OSError):
    pass


@dataclass
class ImagePair:
    x0: np.ndarray
    x1: np.ndarray
    pixel_scale: float = 1.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        if self.x0.ndim == 2:
            self.x0 = self.x0[..., None]
        if self.x1.ndim == 2:
            self.x1 = self.x1[..., None]
        if self.x0.shape != self.x1.shape:
            raise ValueError(f"image shapes differ: {self.x0.shape} vs {self.x1.shape}")
        if not (np.all(np.isfinite(self.x0)) and np.all(np.isfinite(self.x1))):
            raise ValueError("images contain non-finite values")


@dataclass
class NormRecord:
    lo: float
    hi: float

    @property
    def degenerate(self):
        return not self.hi > self.lo


@dataclass
class PatchPair:
    x0: np.ndarray
    x1: np.ndarray
    origin: tuple = (0, 0)
    record: NormRecord = None


# ---------------------------------------------------------------------------
# image files


def _read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ImageIOError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u1" if maxval < 256 else ">u2"
    count = w * h
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def _write_pgm(path, img, bits):
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(img, 0.0, 1.0) * maxval).astype(">u1" if bits == 8 else ">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def load_image(path):
    """Read one grayscale PGM/PNG into an (H,W,1) float array scaled to [0,1]."""
    try:
        if str(path).lower().endswith((".pgm", ".pnm")):
            img = _read_pgm(path)
        else:
            with Image.open(path) as im:
                if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                    img = np.asarray(im, dtype=np.float64) / 65535.0
                elif im.mode == "L":
                    img = np.asarray(im, dtype=np.float64) / 255.0
                else:
                    raise ImageIOError(f"{path}: unsupported image mode {im.mode}, expected grayscale")
    except (OSError, ValueError) as exc:
        if isinstance(exc, ImageIOError):
            raise
        raise ImageIOError(f"{path}: {exc}") from exc
    return img[..., None]


def load_channels(paths):
    """Assemble a multi-channel image from one grayscale file per channel."""
    chans = [load_image(p) for p in paths]
    shapes = {c.shape for c in chans}
    if len(shapes) != 1:
        raise ImageIOError(f"channel files have inconsistent extents: {sorted(shapes)}")
    return np.concatenate(chans, axis=-1)


def save_image(path, img, bits=16):
    """Write an (H,W) or (H,W,1) array in [0,1] as grayscale PNG or PGM, clipping outside values."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img[..., 0]
    try:
        if str(path).lower().endswith((".pgm", ".pnm")):
            _write_pgm(path, img, bits)
            return
        if bits == 8:
            Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
        else:
            q = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
            Image.fromarray(q).save(path)
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc


def read_manifest(path):
    """Parse a manifest: ``key value`` lines, ``#`` comments, relative paths resolved.

    Keys ``x0`` and ``x1`` may repeat, one line per channel file.
    """
    base = os.path.dirname(os.path.abspath(path))
    entries = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ImageIOError(f"{path}: {exc}") from exc
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition(" ")
        value = value.strip()
        if key in ("x0", "x1", "field"):
            value = value if os.path.isabs(value) else os.path.join(base, value)
        entries.setdefault(key, []).append(value)
    return entries


def load_pair(manifest_path):
    entries = read_manifest(manifest_path)
    if "x0" not in entries or "x1" not in entries:
        raise ImageIOError(f"{manifest_path}: manifest needs x0 and x1 entries")
    if len(entries["x0"]) != len(entries["x1"]):
        raise ImageIOError(f"{manifest_path}: x0 and x1 list different channel counts")
    scale = float(entries.get("pixel_scale", ["1.0"])[0])
    return ImagePair(load_channels(entries["x0"]), load_channels(entries["x1"]), scale)


def write_manifest(path, x0_files, x1_files, extra=None):
    with open(path, "w") as fh:
        for f in x0_files:
            fh.write(f"x0 {f}\n")
        for f in x1_files:
            fh.write(f"x1 {f}\n")
        for key, values in (extra or {}).items():
            for v in values if isinstance(values, (list, tuple)) else [values]:
                fh.write(f"{key} {v}\n")


# ---------------------------------------------------------------------------
# normalization and patches


def normalize_pair(x0, x1):
    """Map both patches to [-1,1] with their shared min/max; constant pairs map to zeros."""
    lo = float(min(np.min(x0), np.min(x1)))
    hi = float(max(np.max(x0), np.max(x1)))
    rec = NormRecord(lo, hi)
    if rec.degenerate:
        return np.zeros_like(x0, dtype=np.float64), np.zeros_like(x1, dtype=np.float64), rec
    s = 2.0 / (hi - lo)
    return (np.asarray(x0) - lo) * s - 1.0, (np.asarray(x1) - lo) * s - 1.0, rec


def normalize(patch):
    """Single-patch form of :func:`normalize_pair`."""
    out, _, rec = normalize_pair(patch, patch)
    return out, rec


def denormalize(patch, rec):
    if rec.degenerate:
        return np.full_like(np.asarray(patch, dtype=np.float64), rec.lo)
    return (np.asarray(patch, dtype=np.float64) + 1.0) * ((rec.hi - rec.lo) / 2.0) + rec.lo


def window_count(length, patch, stride):
    return max(1, (length - patch) // stride)


def scan_patches(pair, hp, wp, sh=1, sw=1, normalize_patches=True):
    """Cut identical windows from both images; ``max(1, (L-P)//S)`` windows per axis."""
    H, W = pair.x0.shape[:2]
    if hp > H or wp > W:
        raise ValueError(f"patch {hp}x{wp} larger than image {H}x{W}")
    if sh < 1 or sw < 1:
        raise ValueError("strides must be >= 1")
    out = []
    for a in range(window_count(H, hp, sh)):
        for b in range(window_count(W, wp, sw)):
            r, c = a * sh, b * sw
            p0 = pair.x0[r:r + hp, c:c + wp]
            p1 = pair.x1[r:r + hp, c:c + wp]
            rec = None
            if normalize_patches:
                p0, p1, rec = normalize_pair(p0, p1)
            out.append(PatchPair(p0, p1, (r, c), rec))
    return out


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticScene:
    kind: str
    texture: np.ndarray
    fields: np.ndarray
    dt: float
    x1: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def x0(self):
        return self.texture

    def pair(self):
        return ImagePair(self.texture, self.x1)

    def field_sequence(self):
        return FieldSequence.from_array(self.fields[:, None], self.dt)


def random_texture(H, W, rng, n_blobs=20):
    """Band-limited field: a sum of random Gaussians rescaled to [0,1]."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    img = np.zeros((H, W))
    scale = min(H, W)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        sigma = rng.uniform(0.04, 0.12) * scale
        amp = rng.uniform(-1.0, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    img -= img.min()
    peak = img.max()
    return img / peak if peak > 0 else img


def _unit_fields(kind, H, W, rng):
    """Field shape in domain units, before amplitude scaling; returns (field, params)."""
    x = np.linspace(0, 1, W)[None, :] * np.ones((H, 1))
    y = np.linspace(0, 1, H)[:, None] * np.ones((1, W))
    if kind == "translation":
        angle = rng.uniform(0, 2 * np.pi)
        f = np.stack([np.full((H, W), np.cos(angle)), np.full((H, W), np.sin(angle))], -1)
        return f, {"angle": float(angle)}
    if kind == "rotation":
        cx, cy = rng.uniform(0.35, 0.65, size=2)
        sense = 1.0 if rng.uniform() < 0.5 else -1.0
        f = sense * np.stack([-(y - cy), x - cx], -1)
        return f, {"center": [float(cx), float(cy)], "sense": sense}
    if kind == "source-sink":
        phi = np.zeros((H, W))
        gx = np.zeros((H, W))
        gy = np.zeros((H, W))
        for _ in range(3):
            px, py = rng.uniform(0.2, 0.8, size=2)
            amp = rng.uniform(-1, 1)
            s = rng.uniform(0.1, 0.25)
            g = amp * np.exp(-((x - px) ** 2 + (y - py) ** 2) / (2 * s * s))
            phi += g
            gx += -g * (x - px) / (s * s)
            gy += -g * (y - py) / (s * s)
        return np.stack([gx, gy], -1), {}
    raise ValueError(f"unknown synthetic kind {kind!r}")


def make_synthetic(kind, H, W, N, dt=0.1, seed=0, max_displacement=1.0):
    """Random texture moved by a known field; ``x1`` is its advected terminal state.

    ``max_displacement`` is the largest per-step displacement in grid cells and
    is capped at 2.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    rng = np.random.default_rng(seed)
    texture = random_texture(H, W, rng)
    unit, params = _unit_fields(kind, H, W, rng)
    disp = min(float(max_displacement), 2.0)
    # per-step displacement in cells is |w| * dt * (extent - 1)
    cells = np.abs(unit[..., 0]) * dt * (W - 1)
    cells = np.maximum(cells, np.abs(unit[..., 1]) * dt * (H - 1))
    peak = cells.max()
    amp = disp / peak if peak > 0 else 0.0
    fields = np.repeat((unit * amp)[None], N, axis=0)
    params.update({"amplitude": float(amp), "max_displacement": disp})
    seq = FieldSequence.from_array(fields[:, None], dt)
    states = advect_rollout(Tensor(texture[None, :, :, None]), seq)
    x1 = states[-1].data[0]
    return SyntheticScene(kind, texture[..., None], fields, dt, x1, params)
