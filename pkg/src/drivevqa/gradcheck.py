"""Finite-difference verification of analytic gradients.

Protocol: cast every input to float64, project the op output onto a fixed
random direction to get a scalar, then compare the tape's gradient against
central differences with step 1e-5. Failures are reported in the returned
record, never raised — callers (tests, the ``gradcheck`` CLI) decide what to
do with them.
"""

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5


class GradCheckReport:
    def __init__(self, name, errors, tolerance):
        self.name = name
        self.errors = tuple(errors)          # max relative error per input
        self.max_error = max(errors) if errors else 0.0
        self.tolerance = tolerance
        self.passed = self.max_error <= tolerance

    def __repr__(self):
        status = "OK" if self.passed else "FAIL"
        errs = ", ".join(f"{e:.3e}" for e in self.errors)
        return f"[{status}] {self.name}: max_rel_err={self.max_error:.3e} tol={self.tolerance:.1e} per-input=({errs})"


def grad_check(fn, inputs, tolerance=1e-4, rng=None, name=None, step=FD_STEP,
               dtype=np.float64):
    """Compare analytic and numeric gradients of ``fn``.

    Args:
        fn: callable taking len(inputs) Tensors, returning a Tensor.
        inputs: arrays; each is checked as an independent input.
        tolerance: max relative error allowed for ``passed``.
        rng: Generator for the output projection (fixed seed if omitted).
        dtype: working precision; float32 checks (composed networks with
            float32 weights) should pair it with a wider ``step``.
    Returns:
        GradCheckReport with one max-relative-error entry per input.
    """
    rng = rng or np.random.default_rng(0)
    xs = [Tensor(np.asarray(a, dtype=dtype), requires_grad=True, dtype=dtype)
          for a in inputs]
    out = fn(*xs)
    proj = rng.standard_normal(out.shape)

    def scalar(ts):
        return float(np.sum(fn(*ts).data.astype(np.float64) * proj))

    (out * Tensor(proj, dtype=dtype)).sum().backward()
    errors = []
    for x in xs:
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        numeric = np.zeros_like(x.data)
        flat = x.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = scalar(xs)
            flat[i] = orig - step
            lo = scalar(xs)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
        errors.append(float(np.max(np.abs(analytic - numeric) / denom)))
    return GradCheckReport(name or getattr(fn, "__name__", "op"), errors, tolerance)


# -- named op suite ---------------------------------------------------------------

def _suite_registry():
    """name -> builder(rng) returning (fn, inputs). Shapes are small so the
    full suite over several seeds stays inside a couple of minutes."""
    from . import functional as F
    from .tensor import concat, matmul, relu, sigmoid, softmax, tmax, tsum

    def conv_plain(rng):
        return (lambda x, w, b: F.conv2d(x, w, bias=b, stride=1, padding=1),
                [rng.standard_normal((2, 3, 6, 6)),
                 rng.standard_normal((4, 3, 3, 3)),
                 rng.standard_normal(4)])

    def conv_strided_dilated(rng):
        return (lambda x, w: F.conv2d(x, w, stride=2, padding=2, dilation=2),
                [rng.standard_normal((2, 3, 9, 9)),
                 rng.standard_normal((4, 3, 3, 3))])

    def conv_grouped(rng):
        return (lambda x, w: F.conv2d(x, w, padding=1, groups=2),
                [rng.standard_normal((2, 4, 5, 5)),
                 rng.standard_normal((6, 2, 3, 3))])

    def conv_1x1(rng):
        return (lambda x, w: F.conv2d(x, w, stride=2),
                [rng.standard_normal((2, 5, 6, 6)),
                 rng.standard_normal((3, 5, 1, 1))])

    def dynamic_depthwise(rng):
        return (lambda x, k: F.conv2d_dynamic_depthwise(x, softmax(k.reshape(2, 3, 9), axis=-1).reshape(2, 3, 3, 3)),
                [rng.standard_normal((2, 3, 6, 6)),
                 rng.standard_normal((2, 3, 3, 3))])

    def pool_2x2(rng):
        return (lambda x: F.max_pool2d(x, 2),
                [rng.standard_normal((2, 3, 6, 6))])

    def pool_3x3_s1(rng):
        return (lambda x: F.max_pool2d(x, 3, stride=1, padding=1),
                [rng.standard_normal((2, 2, 6, 6))])

    def pool_4x4_s4(rng):
        return (lambda x: F.max_pool2d(x, 4, stride=4),
                [rng.standard_normal((1, 2, 8, 8))])

    def gap(rng):
        return (F.global_avg_pool, [rng.standard_normal((2, 3, 5, 5))])

    def adaptive_pool(rng):
        return (lambda x: F.adaptive_avg_pool2d(x, 3),
                [rng.standard_normal((2, 2, 9, 9))])

    def upsample(rng):
        return (lambda x: F.upsample_bilinear(x, 8, 8),
                [rng.standard_normal((2, 3, 4, 4))])

    def sobel(rng):
        return (F.sobel_magnitude, [rng.standard_normal((2, 1, 6, 6))])

    def localvar(rng):
        return (lambda x: F.local_variance(x, window=3),
                [rng.standard_normal((2, 1, 6, 6))])

    def bnorm(rng):
        rm = np.zeros(3)
        rv = np.ones(3)
        return (lambda x, g, b: F.batch_norm(x, g, b, rm.copy(), rv.copy(), True),
                [rng.standard_normal((3, 3, 4, 4)),
                 rng.standard_normal(3),
                 rng.standard_normal(3)])

    def lnorm(rng):
        return (lambda x, g, b: F.layer_norm(x, g, b),
                [rng.standard_normal((3, 4, 5)),
                 rng.standard_normal(5),
                 rng.standard_normal(5)])

    def dense(rng):
        return (lambda x, w, b: matmul(x, w) + b,
                [rng.standard_normal((4, 6)),
                 rng.standard_normal((6, 3)),
                 rng.standard_normal(3)])

    def attention_cell(rng):
        def fn(q, k, v):
            scores = matmul(q, k.transpose(0, 2, 1)) * 0.5
            return matmul(softmax(scores, axis=-1), v)
        return (fn, [rng.standard_normal((2, 4, 5)),
                     rng.standard_normal((2, 4, 5)),
                     rng.standard_normal((2, 4, 5))])

    def cross_entropy(rng):
        targets = rng.integers(0, 5, size=6)
        return (lambda z: F.cross_entropy_per_token(z, targets)[0],
                [rng.standard_normal((6, 5))])

    def elementwise_chain(rng):
        return (lambda x: tsum(relu(x) + sigmoid(x) * tmax(x, axis=1, keepdims=True)),
                [rng.standard_normal((3, 4))])

    def padding(rng):
        return (lambda x: F.pad2d(x, 2, mode="replicate"),
                [rng.standard_normal((2, 2, 4, 4))])

    def concat_slice(rng):
        return (lambda a, b: concat([a, b], axis=1)[:, 1:4],
                [rng.standard_normal((2, 3)),
                 rng.standard_normal((2, 3))])

    return {
        "conv2d": conv_plain,
        "conv2d_strided_dilated": conv_strided_dilated,
        "conv2d_grouped": conv_grouped,
        "conv2d_1x1": conv_1x1,
        "dynamic_depthwise": dynamic_depthwise,
        "max_pool_2x2": pool_2x2,
        "max_pool_3x3_s1": pool_3x3_s1,
        "max_pool_4x4_s4": pool_4x4_s4,
        "global_avg_pool": gap,
        "adaptive_avg_pool": adaptive_pool,
        "upsample_bilinear": upsample,
        "sobel_magnitude": sobel,
        "local_variance": localvar,
        "batch_norm": bnorm,
        "layer_norm": lnorm,
        "dense": dense,
        "attention_cell": attention_cell,
        "cross_entropy": cross_entropy,
        "elementwise_chain": elementwise_chain,
        "pad_replicate": padding,
        "concat_slice": concat_slice,
    }


def suite_names():
    return sorted(_suite_registry())


def run_suite(names=None, seeds=(0, 1, 2, 3, 4), tolerance=1e-4):
    """Run the finite-difference suite; returns a list of GradCheckReport."""
    registry = _suite_registry()
    unknown = set(names or []) - set(registry)
    if unknown:
        raise ValueError(f"unknown op(s): {sorted(unknown)}; "
                         f"known: {suite_names()}")
    reports = []
    for name in (names or suite_names()):
        builder = registry[name]
        for seed in seeds:
            rng = np.random.default_rng(seed)
            fn, inputs = builder(rng)
            reports.append(grad_check(fn, inputs, tolerance=tolerance, rng=rng,
                                      name=f"{name}[seed={seed}]"))
    return reports
