"""Loss terms, Adam with stepped exponential decay, and the training loop.

Every loss term sums over pixels, channels and steps and averages over the
batch, so the weights keep the same meaning for any batch size.
"""

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .advection import advect_rollout
from .tensor import ContractViolation, Tape, Tensor, squared_error, sum_squares

log = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss_total", "loss_dyn", "loss_ae", "loss_mag", "loss_smooth", "lr"]


class NumericalAbort(RuntimeError):
    def __init__(self, message, iteration=None, dump_path=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump_path = dump_path


@dataclass
class LossWeights:
    ae: float = 1.0
    magnitude: float = 0.01
    smooth: float = 0.01

    def __post_init__(self):
        if min(self.ae, self.magnitude, self.smooth) < 0:
            raise ContractViolation("loss weights must be nonnegative")


EXAMPLE1_WEIGHTS = LossWeights(1.0, 0.01, 0.01)
EXAMPLE2_WEIGHTS = LossWeights(1.0, 0.001, 0.06)
EXAMPLE3_WEIGHTS = LossWeights(1.0, 0.01, 0.01)


@dataclass
class OptimizerState:
    alpha: float = 1e-4
    gamma: float = 0.8
    decay_interval: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def rate(self, step=None):
        """Learning rate in effect for the update at iteration ``step`` (0-based)."""
        step = self.step if step is None else step
        return self.alpha * self.gamma ** (step // self.decay_interval)


def adam_update(params, grads, state):
    """One bias-corrected Adam step in place; returns the rate used."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    lr = state.rate()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.data.dtype, copy=False)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data = p.data - (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return lr


# ---------------------------------------------------------------------------
# losses


def _as_batch(x, dtype):
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    return x


def loss_field_regularizers(fields, batch=None):
    """Squared magnitude of every field and of every step-to-step difference."""
    ws = fields.fields
    B = batch or ws[0].shape[0]
    mag = sum_squares(ws[0])
    for w in ws[1:]:
        mag = mag + sum_squares(w)
    smooth = None
    for prev, w in zip(ws[:-1], ws[1:]):
        term = squared_error(w, prev)
        smooth = term if smooth is None else smooth + term
    if smooth is None:
        smooth = Tensor(np.zeros((), dtype=mag.dtype))
    return mag * (1.0 / B), smooth * (1.0 / B)


def forward_losses(bundle, x0, x1):
    """Evaluate every loss term on one batch; returns a dict of scalar tensors."""
    x0 = _as_batch(x0, bundle.dtype)
    x1 = _as_batch(x1, bundle.dtype)
    if x0.shape != x1.shape:
        raise ContractViolation(f"patch shapes differ: {x0.shape} vs {x1.shape}")
    B = x0.shape[0]
    inv = 1.0 / B
    z0 = bundle.encode(x0)
    fields = bundle.extract_fields(x0)
    states = advect_rollout(z0, fields)
    z_end = states[-1]
    pred = bundle.decode(z_end)
    dyn = squared_error(pred, x1) * inv
    ae = (squared_error(x0, bundle.decode(z0)) + squared_error(z_end, bundle.encode(x1))) * inv
    mag, smooth = loss_field_regularizers(fields, B)
    return {"dyn": dyn, "ae": ae, "mag": mag, "smooth": smooth, "pred": pred, "fields": fields, "states": states}


def loss_dynamics(bundle, x0, x1):
    return forward_losses(bundle, x0, x1)["dyn"]


def loss_autoencoder(bundle, x0, x1):
    return forward_losses(bundle, x0, x1)["ae"]


def combine(terms, weights):
    """Weighted total; zero-weight terms are left out of the graph entirely."""
    total = terms["dyn"]
    for key, lam in (("ae", weights.ae), ("mag", weights.magnitude), ("smooth", weights.smooth)):
        if lam != 0:
            total = total + terms[key] * lam
    return total


def total_loss(bundle, x0, x1, weights):
    return combine(forward_losses(bundle, x0, x1), weights)


# ---------------------------------------------------------------------------
# loop


class BatchSampler:
    """Epoch-wise shuffling without replacement from one seeded generator."""

    def __init__(self, n, batch_size, seed):
        if n < 1:
            raise ContractViolation("dataset is empty")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(seed)
        self._queue = []

    def next(self):
        out = []
        while len(out) < self.batch_size:
            if not self._queue:
                self._queue = list(self.rng.permutation(self.n))
            out.append(self._queue.pop(0))
        return out


def check_shapes(bundle, patch_shape):
    """Shape inference ahead of training: raise if the bundle cannot take these patches."""
    H, W, C = patch_shape
    div = bundle.field_cfg.divisor
    if H % div or W % div:
        raise ContractViolation(f"patch {H}x{W} not divisible by {div}")
    if bundle.field_cfg.in_channels != C:
        raise ContractViolation(f"field extractor expects {bundle.field_cfg.in_channels} channels, data has {C}")
    if not bundle.identity_codecs:
        if bundle.encoder_cfg.in_channels != C or bundle.decoder_cfg.out_channels != C:
            raise ContractViolation(f"codec channels do not match data channels {C}")
        if H % bundle.decoder_cfg.divisor or W % bundle.decoder_cfg.divisor:
            raise ContractViolation(f"patch {H}x{W} not divisible by {bundle.decoder_cfg.divisor}")
    elif C != 1:
        raise ContractViolation("identity codecs need single-channel data")
    return {"latent": (H, W, 1), "fields": (bundle.n_evolution, H, W, 2), "frames": (bundle.n_evolution + 1, H, W, C)}


def _fmt(v):
    return f"{v:.9e}"


def train(dataset, bundle, opt_state, weights, iterations, batch_size=16, seed=0, log_every=100,
          metrics_path=None, dump_path=None, callback=None):
    """Minimise the weighted loss with Adam; returns ``(bundle, metrics_rows)``.

    ``dataset`` is a sequence of objects with ``x0``/``x1`` arrays of shape
    (H,W,C). Metrics rows are written to ``metrics_path`` as CSV if given.
    """
    if len(dataset) == 0:
        raise ContractViolation("dataset is empty")
    check_shapes(bundle, np.shape(dataset[0].x0))
    sampler = BatchSampler(len(dataset), batch_size, seed)
    params = bundle.parameters()
    rows = []
    fh = None
    writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for it in range(iterations):
            idx = sampler.next()
            x0 = np.stack([dataset[i].x0 for i in idx]).astype(bundle.dtype)
            x1 = np.stack([dataset[i].x1 for i in idx]).astype(bundle.dtype)
            with Tape() as tape:
                terms = forward_losses(bundle, x0, x1)
                loss = combine(terms, weights)
            value = float(loss.data)
            if not math.isfinite(value):
                if dump_path is not None:
                    np.savez(dump_path, x0=x0, x1=x1, iteration=it,
                             **{f"p{i}": p.data for i, p in enumerate(params)})
                raise NumericalAbort(f"non-finite loss at iteration {it}", it, dump_path)
            lr = opt_state.rate()
            if it % log_every == 0 or it == iterations - 1:
                row = [it, value] + [float(terms[k].data) for k in ("dyn", "ae", "mag", "smooth")] + [lr]
                rows.append(row)
                if writer is not None:
                    writer.writerow([it] + [_fmt(v) for v in row[1:]])
                    fh.flush()
                log.debug("iter %d loss %.6g", it, value)
            if params:
                grads = tape.backward(loss)
                adam_update(params, [grads[p] for p in params], opt_state)
            if callback is not None:
                callback(it, terms)
    finally:
        if fh is not None:
            fh.close()
    return bundle, rows


def metrics_csv(rows):
    """Render metrics rows exactly as ``train`` writes them."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for row in rows:
        writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
    return buf.getvalue()
