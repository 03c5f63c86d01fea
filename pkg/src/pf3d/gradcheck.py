"""Central-finite-difference gradient verification.

The independent oracle for every differentiable operation in this package:
perturb inputs by +/- h, difference the loss, compare against the analytic
gradient from the tape.  Used throughout the test suite and usable on any
closure that maps a list of leaf tensors to a scalar Tensor.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def finite_difference_grad(
    fn: Callable[[], Tensor],
    leaf: Tensor,
    h: float = 1e-4,
    coords: Sequence[tuple] | None = None,
) -> dict:
    """Central differences of ``fn()`` wrt selected coordinates of ``leaf``.

    Returns {flat_index: derivative}.  ``fn`` must be a pure function of the
    current leaf values.
    """
    flat = leaf.data.reshape(-1)
    if coords is None:
        idxs = range(flat.size)
    else:
        idxs = coords
    out = {}
    for i in idxs:
        keep = flat[i]
        flat[i] = keep + h
        up = fn().item()
        flat[i] = keep - h
        dn = fn().item()
        flat[i] = keep
        out[i] = (up - dn) / (2.0 * h)
    return out


def check_gradients(
    fn: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-4,
    rtol: float = 1e-4,
    atol: float = 1e-7,
    max_coords_per_leaf: int = 10,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic grads of ``fn`` against central differences.

    For each leaf, up to ``max_coords_per_leaf`` random coordinates are
    probed (all of them when the leaf is small).  Returns the worst relative
    error observed; raises AssertionError when |analytic - numeric| exceeds
    atol + rtol * |numeric| anywhere.
    """
    rng = rng or np.random.default_rng(0)
    for leaf in leaves:
        leaf.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for li, leaf in enumerate(leaves):
        assert leaf.grad is not None, f"leaf {li} received no gradient"
        n = leaf.data.size
        if n <= max_coords_per_leaf:
            coords = list(range(n))
        else:
            coords = list(rng.choice(n, size=max_coords_per_leaf, replace=False))
        numeric = finite_difference_grad(fn, leaf, h=h, coords=coords)
        analytic = leaf.grad.reshape(-1)
        for i, num in numeric.items():
            ana = analytic[i]
            if abs(ana - num) > atol + rtol * abs(num):
                # O(h^2) truncation can exceed the bound where the third
                # derivative is large; refine to O(h^4) by Richardson
                # extrapolation before judging (still a pure FD oracle).
                half = finite_difference_grad(fn, leaf, h=h / 2, coords=[i])[i]
                num = (4.0 * half - num) / 3.0
            err = abs(ana - num)
            bound = atol + rtol * abs(num)
            rel = err / max(abs(num), abs(ana), atol / rtol)
            worst = max(worst, rel)
            assert err <= bound, (
                f"gradient mismatch on leaf {li} coord {i}: "
                f"analytic={ana:.10g} numeric={num:.10g} rel={rel:.3g}"
            )
    return worst
