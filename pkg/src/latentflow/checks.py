"""Verification probes behind ``latentflow check``: gradients, advection, OT.

Each probe returns a list of :class:`CheckResult`; nothing here depends on
pytest so the same probes run from the command line and from the test suite.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .advection import advect_step
from .networks import EncoderConfig, ModelBundle, UNetConfig
from .training import LossWeights, total_loss

GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    value: float
    limit: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"[{status}] {self.name}: {self.value:.3e} (limit {self.limit:.1e}){extra}"


def report(results):
    return "\n".join(r.line() for r in results)


# ---------------------------------------------------------------------------
# gradients


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def fd_check(fn, inputs, rng, n_samples=8, h=1e-6):
    """Compare tape gradients of scalar ``fn(*tensors)`` with central differences.

    Returns ``(max relative error, number of sampled entries)``.
    """
    tensors = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    with T.Tape() as tape:
        loss = fn(*tensors)
    grads = tape.backward(loss)
    worst, count = 0.0, 0
    for t in tensors:
        g = grads[t]
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_samples, flat.size), replace=False)
        for k in picks:
            keep = flat[k]
            flat[k] = keep + h
            up = float(fn(*tensors).data)
            flat[k] = keep - h
            down = float(fn(*tensors).data)
            flat[k] = keep
            worst = max(worst, relative_error(float(g.reshape(-1)[k]), (up - down) / (2 * h)))
            count += 1
    return worst, count


def _probe(x, rng):
    """Random linear functional, so non-scalar outputs give a generic scalar loss."""
    return T.sum_all(T.mul(x, T.Tensor(rng.standard_normal(x.shape))))


def primitive_cases(rng):
    """(name, fn, inputs) for every differentiable primitive."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    # sample points kept strictly inside cells so FD never straddles a kink
    pix = np.stack([rng.uniform(0.1, 6.9, (2, 5, 5)), rng.uniform(0.1, 5.9, (2, 5, 5))], -1)
    pix = np.floor(pix) + np.clip(pix - np.floor(pix), 0.05, 0.95)
    coords = rng.uniform(0.05, 0.95, (2, 5, 5, 2))
    pool_in = rng.permutation(2 * 6 * 4 * 3).reshape(2, 6, 4, 3) / 10.0
    lr_in = r(2, 4, 4, 3)
    lr_in[np.abs(lr_in) < 1e-3] += 1e-2
    cases = [
        ("add", lambda a, b: _probe(T.add(a, b), np.random.default_rng(1)), [r(2, 3, 3, 2), r(2, 3, 3, 2)]),
        ("sub", lambda a, b: _probe(T.sub(a, b), np.random.default_rng(2)), [r(2, 3, 3, 2), r(2, 3, 3, 2)]),
        ("neg", lambda a: _probe(T.neg(a), np.random.default_rng(3)), [r(3, 4)]),
        ("mul", lambda a, b: _probe(T.mul(a, b), np.random.default_rng(4)), [r(2, 3, 3, 2), r(2, 3, 3, 2)]),
        ("square", lambda a: _probe(T.square(a), np.random.default_rng(5)), [r(2, 3, 3, 2)]),
        ("sum_all", lambda a: T.sum_all(a), [r(2, 3, 3, 2)]),
        ("squared_error", lambda a, b: T.squared_error(a, b), [r(2, 3, 3, 2), r(2, 3, 3, 2)]),
        ("sum_squares", lambda a: T.sum_squares(a), [r(2, 3, 3, 2)]),
        ("leaky_relu", lambda a: _probe(T.leaky_relu(a, 0.2), np.random.default_rng(6)), [lr_in]),
        ("reshape", lambda a: _probe(T.reshape(a, (2, 9, 2, 1)), np.random.default_rng(7)), [r(2, 3, 3, 2)]),
        ("concat_channels", lambda a, b: _probe(T.concat_channels([a, b]), np.random.default_rng(8)),
         [r(1, 3, 3, 2), r(1, 3, 3, 3)]),
        ("channel_slice", lambda a: _probe(T.channel_slice(a, 1, 3), np.random.default_rng(9)), [r(1, 3, 3, 4)]),
        ("stack", lambda a, b: _probe(T.stack([a, b]), np.random.default_rng(10)), [r(2, 3, 2), r(2, 3, 2)]),
        ("max_pool2", lambda a: _probe(T.max_pool2(a), np.random.default_rng(11)), [pool_in]),
        ("resize_bilinear.up", lambda a: _probe(T.resize_bilinear(a, 7, 9), np.random.default_rng(12)),
         [r(2, 4, 5, 2)]),
        ("resize_bilinear.down", lambda a: _probe(T.resize_bilinear(a, 3, 2), np.random.default_rng(13)),
         [r(2, 6, 5, 2)]),
        ("sample_bilinear", lambda a, p: _probe(T.sample_bilinear(a, p), np.random.default_rng(14)),
         [r(2, 7, 8, 3), pix]),
        ("affine", lambda a: _probe(T.affine(a, np.array([0.5, -2.0]), np.ones((2, 3, 3, 2))),
                                    np.random.default_rng(15)), [r(2, 3, 3, 2)]),
        ("grid_sample", lambda a, c: _probe(T.grid_sample(a, c), np.random.default_rng(16)),
         [r(2, 6, 6, 2), coords]),
        ("advect_step", lambda z, w: _probe(advect_step(z, w, 0.1), np.random.default_rng(17)),
         [r(2, 8, 8, 1), 0.3 * r(2, 8, 8, 2)]),
    ]
    for k in (1, 3, 5):
        cases.append((f"conv2d.k{k}", lambda x, w, b: _probe(T.conv2d(x, w, b), np.random.default_rng(20 + k)),
                      [r(2, 5, 6, 3), r(k, k, 3, 4), r(4)]))
    return cases


def toy_bundle(seed=0, n_evolution=3):
    """Small float64 bundle (channel widths 4-8) for gradient checks."""
    enc = EncoderConfig(in_channels=1, hidden_channels=[4, 8, 4])
    dec = UNetConfig(in_channels=1, input_channels=4, down=[4, 8, 8], bottleneck=8, up=[8, 8, 4],
                     output_channels=4, out_channels=1)
    fld = UNetConfig(in_channels=1, input_channels=4, down=[4, 8, 8], bottleneck=8, up=[8, 8, 4],
                     output_channels=4, out_channels=2 * n_evolution, kernel=5)
    return ModelBundle(enc, dec, fld, n_evolution, 0.1, seed, dtype=np.float64)


def composed_loss_check(seed=0, n_params=60, size=16, h=1e-6, kink_tol=1e-4):
    """FD check of the full weighted loss w.r.t. sampled network parameters.

    Entries whose one-sided differences disagree sit within ``h`` of a
    leaky-ReLU or pooling kink, where central differences are not a valid
    reference; they are replaced by fresh samples and counted.
    Returns ``(max relative error, checked, skipped, total parameters)``.
    """
    rng = np.random.default_rng(seed)
    bundle = toy_bundle(seed)
    x0 = np.tanh(rng.standard_normal((2, size, size, 1)))
    x1 = np.tanh(rng.standard_normal((2, size, size, 1)))
    weights = LossWeights(1.0, 0.01, 0.01)
    params = bundle.parameters()
    with T.Tape() as tape:
        loss = total_loss(bundle, x0, x1, weights)
    grads = tape.backward(loss)
    centre = float(loss.data)
    worst, checked, skipped = 0.0, 0, 0
    while checked < n_params:
        # every tensor is drawn with equal probability so small bias vectors are covered
        p = params[rng.integers(len(params))]
        flat = p.data.reshape(-1)
        k = rng.integers(flat.size)
        keep = flat[k]
        flat[k] = keep + h
        up = float(total_loss(bundle, x0, x1, weights).data)
        flat[k] = keep - h
        down = float(total_loss(bundle, x0, x1, weights).data)
        flat[k] = keep
        fwd, bwd = (up - centre) / h, (centre - down) / h
        if relative_error(fwd, bwd, 1e-6) > kink_tol:
            skipped += 1
            continue
        worst = max(worst, relative_error(float(grads[p].reshape(-1)[k]), (up - down) / (2 * h)))
        checked += 1
    return worst, checked, skipped, sum(p.size for p in params)


def grad_suite(seed=0, n_params=60):
    rng = np.random.default_rng(seed)
    results = []
    total = 0
    for name, fn, inputs in primitive_cases(rng):
        err, n = fd_check(fn, inputs, rng)
        total += n
        results.append(CheckResult(f"grad.{name}", err, GRAD_TOL, err <= GRAD_TOL, f"{n} entries"))
    err, n, skipped, n_all = composed_loss_check(seed, n_params)
    results.append(CheckResult("grad.total_loss", err, GRAD_TOL, err <= GRAD_TOL,
                               f"{n} of {n_all} parameters, {skipped} resampled at kinks, 16x16 patches"))
    return results


# ---------------------------------------------------------------------------
# advection


def gaussian_blob(H, W, cx=0.5, cy=0.5, sigma=0.15):
    y = np.linspace(0, 1, H)[:, None]
    x = np.linspace(0, 1, W)[None, :]
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2))


def advect_suite(seed=0, trials=1000):
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for dtype in (np.float32, np.float64):
        z = rng.standard_normal((2, 16, 16, 1)).astype(dtype)
        out = advect_step(T.Tensor(z), T.Tensor(np.zeros((2, 16, 16, 2), dtype)), 0.1).data
        worst = max(worst, float(np.max(np.abs(out - z))))
    results.append(CheckResult("advect.zero_field_identity", worst, 0.0, worst == 0.0))

    worst = 0.0
    for _ in range(20):
        c = rng.standard_normal()
        w = 3.0 * rng.standard_normal((1, 16, 16, 2))
        out = advect_step(T.Tensor(np.full((1, 16, 16, 1), c)), T.Tensor(w), 0.1).data
        worst = max(worst, float(np.max(np.abs(out - c))))
    results.append(CheckResult("advect.constant_preservation", worst, 0.0, worst == 0.0))

    violations = 0
    worst = 0.0
    for _ in range(trials):
        H, W = rng.integers(2, 12, size=2)
        z = rng.standard_normal((1, H, W, 1)) * rng.uniform(0.1, 10)
        w = rng.standard_normal((1, H, W, 2)) * rng.uniform(0.01, 20)
        out = advect_step(T.Tensor(z), T.Tensor(w), rng.uniform(0.01, 1.0)).data
        over = max(float(out.max() - z.max()), float(z.min() - out.min()), 0.0)
        violations += over > 0
        worst = max(worst, over)
    results.append(CheckResult("advect.maximum_principle", float(violations), 0.0, violations == 0,
                               f"{trials} trials, worst overshoot {worst:.1e}"))

    H = W = 64
    z = gaussian_blob(H, W)[None, :, :, None]
    w = np.zeros((1, H, W, 2))
    w[..., 0] = 0.3 / (0.1 * (W - 1))   # 0.3 cells per full step
    w[..., 1] = -0.2 / (0.1 * (H - 1))
    full = advect_step(T.Tensor(z), T.Tensor(w), 0.1).data
    half = advect_step(advect_step(T.Tensor(z), T.Tensor(w), 0.05), T.Tensor(w), 0.05).data
    err = float(np.max(np.abs(full - half)))
    results.append(CheckResult("advect.half_steps_vs_full_step", err, 1e-3, err <= 1e-3,
                               "64x64 Gaussian, max abs difference"))
    return results


# ---------------------------------------------------------------------------
# optimal transport


def ot_instance(seed, size=16):
    """Random 16x16 pair: independent uniform intensities in [0,1)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(size, size)), rng.uniform(size=(size, size))


def blob_pair(size=16, shift=4, sigma=1.5):
    """One Gaussian blob and a copy translated by ``shift`` pixels along x."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    c = size / 2 - shift / 2
    a = np.exp(-((xx - c) ** 2 + (yy - size / 2) ** 2) / (2 * sigma ** 2))
    b = np.exp(-((xx - c - shift) ** 2 + (yy - size / 2) ** 2) / (2 * sigma ** 2))
    return a, b


def ot_suite(seeds=(0, 1, 2, 3, 4), epsilon=1e-3, N=10):
    from .baselines import exact_ot_cost, ot_interpolate, sinkhorn
    from .data import ImagePair

    results = []
    for seed in seeds:
        a, b = ot_instance(seed)
        tp = sinkhorn(a, b, epsilon, max_iter=50000, tol=1e-7)
        lp, _ = exact_ot_cost(a, b)
        rows = float(np.abs(tp.row_sums() - tp.mu1).max())
        cols = float(np.abs(tp.col_sums() - tp.mu2).max())
        viol = max(rows, cols)
        gap = abs(tp.cost - lp) / lp
        results.append(CheckResult(f"ot.marginals[seed={seed}]", viol, 1e-6, viol <= 1e-6,
                                   f"{tp.n_iter} iterations"))
        results.append(CheckResult(f"ot.cost_vs_lp[seed={seed}]", gap, 0.02, gap <= 0.02,
                                   f"sinkhorn {tp.cost:.6f} vs LP {lp:.6f}"))
        trace = np.asarray(tp.dual_trace)
        drop = float(max(0.0, -(np.diff(trace) / np.maximum(np.abs(trace[1:]), 1e-300)).min())) \
            if trace.size > 1 else 0.0
        results.append(CheckResult(f"ot.dual_monotone[seed={seed}]", drop, 1e-12, drop <= 1e-12))

        interp = ot_interpolate(ImagePair(a, b), N, epsilon=epsilon, transport=tp)
        mu1 = tp.mu1.reshape(a.shape)
        mu2 = tp.mu2.reshape(b.shape)
        tv0 = 0.5 * float(np.abs(interp.densities[0] - mu1).sum())
        tv1 = 0.5 * float(np.abs(interp.densities[-1] - mu2).sum())
        mass = float(np.abs(interp.densities.sum(axis=(1, 2)) - 1.0).max())
        neg = float(min(interp.densities.min(), 0.0))
        results.append(CheckResult(f"ot.endpoint_tv[seed={seed}]", max(tv0, tv1), 1e-3, max(tv0, tv1) <= 1e-3))
        results.append(CheckResult(f"ot.mass[seed={seed}]", mass, 1e-6, mass <= 1e-6 and neg == 0.0))
    return results
