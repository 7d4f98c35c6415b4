"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np


class GradCheckFailure(AssertionError):
    pass


def finite_difference(f, param, index, step=1e-5):
    """Central difference of the scalar f() w.r.t. one entry of param.data."""
    orig = param.data[index]
    param.data[index] = orig + step
    up = f().item()
    param.data[index] = orig - step
    dn = f().item()
    param.data[index] = orig
    return (up - dn) / (2.0 * step)


def check_gradients(f, params, rel_tol=1e-4, abs_tol=1e-8, step=1e-5,
                    max_entries_per_param=None, rng=None):
    """Compare analytic grads of the scalar-valued f() against central
    finite differences.

    f must rebuild the forward graph on every call. Raises GradCheckFailure
    listing every offending entry; returns the number of entries checked.
    """
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = []
    for p in params:
        if p.grad is None:
            raise GradCheckFailure("parameter received no gradient")
        analytic.append(p.grad.copy())

    failures = []
    checked = 0
    for p, a in zip(params, analytic):
        idxs = list(np.ndindex(p.data.shape))
        if max_entries_per_param is not None and len(idxs) > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            pick = rng.choice(len(idxs), size=max_entries_per_param, replace=False)
            idxs = [idxs[i] for i in pick]
        for index in idxs:
            num = finite_difference(f, p, index, step=step)
            ana = a[index]
            err = abs(num - ana)
            tol = abs_tol + rel_tol * max(abs(num), abs(ana))
            checked += 1
            if err > tol:
                failures.append((p.shape, index, ana, num, err))
    if failures:
        lines = [f"shape={s} idx={i} analytic={a:.6g} numeric={n:.6g} err={e:.3g}"
                 for s, i, a, n, e in failures[:10]]
        raise GradCheckFailure(
            f"{len(failures)}/{checked} gradient entries outside tolerance:\n" + "\n".join(lines))
    return checked
