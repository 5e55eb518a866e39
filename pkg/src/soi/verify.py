"""Gradient verification suite: analytic vs central finite differences.

Everything runs in double precision (single-precision differences are
dominated by rounding).  Normalization checks project the output onto a
fixed random direction first: the plain sum of a normalized signal is
constant by construction, which would leave nothing to differentiate.
"""

from __future__ import annotations

import numpy as np

from soi.contrastive import info_nce
from soi.nn import HeadConfig, Mode, NormState, ProjectionHead, batch_instance_norm
from soi.tensor import Tensor, conv2d, grad_check, l2_normalize

TOLERANCE = 1e-4


def _unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def run_gradcheck_suite(eps: float = 1e-5) -> list[tuple[str, float]]:
    """All (check name, max relative error) pairs, double precision."""
    rng = np.random.default_rng(20240811)
    checks: list[tuple[str, float]] = []

    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
    checks.append((
        "conv2d(stride=1,pad=1)",
        grad_check(lambda a, b: conv2d(a, b, 1, 1).mean(), x, w, eps=eps),
    ))
    x2 = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(3, 2, 2, 2)), requires_grad=True)
    checks.append((
        "conv2d(stride=2,pad=0)",
        grad_check(lambda a, b: conv2d(a, b, 2, 0).mean(), x2, w2, eps=eps),
    ))

    proj = Tensor(rng.normal(size=(4, 3, 5, 5)))

    def norm_check(gamma, mode):
        def fn(xx, scale, shift):
            state = NormState(3, balance_gamma=gamma, affine_scale=scale,
                              affine_shift=shift, dtype=np.float64)
            state.running_mean[:] = rng.normal(size=3) * 0.0 + 0.25
            state.running_var[:] = 1.5
            return (batch_instance_norm(xx, state, mode) * proj).sum()

        xx = Tensor(rng.normal(size=(4, 3, 5, 5)), requires_grad=True)
        scale = Tensor(rng.normal(size=3) * 0.4 + 1.0, requires_grad=True)
        shift = Tensor(rng.normal(size=3) * 0.2, requires_grad=True)
        return grad_check(fn, xx, scale, shift, eps=eps)

    checks.append(("batch_norm (train)", norm_check(1.0, Mode.TRAIN)))
    checks.append(("batch_norm (eval)", norm_check(1.0, Mode.EVAL)))
    checks.append(("instance_norm", norm_check(0.0, Mode.TRAIN)))
    for gamma in (0.0, 0.3, 0.5, 1.0):
        checks.append((f"bin(gamma={gamma})", norm_check(gamma, Mode.TRAIN)))

    head = ProjectionHead(6, HeadConfig(hidden_dim=8, out_dim=5), seed=7, dtype=np.float64)
    hproj = Tensor(rng.normal(size=(3, 5)))
    hx = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    checks.append((
        "projection_head",
        grad_check(lambda v: (head(v) * hproj).sum(), hx, eps=eps),
    ))

    for n_neg in (1, 8, 64):
        d = 12
        qv = Tensor(rng.normal(size=d), requires_grad=True)
        pos = _unit_rows(rng, 1, d)[0]
        negs = _unit_rows(rng, n_neg, d)
        # normalize inside the checked function: a perturbed raw query must
        # not flip info_nce's defensive-renormalization branch mid-check
        checks.append((
            f"info_nce(negatives={n_neg})",
            grad_check(lambda t: info_nce(l2_normalize(t), pos, negs, 0.2), qv, eps=eps),
        ))
    return checks
