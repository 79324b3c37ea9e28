from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple  # (array name, flat index, analytic, numeric)

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


# Central differences at h = 1e-5 carry roughly 1e-10 absolute noise on O(1)
# losses, so gradients below the floor are compared on an absolute scale.
FLOOR = 1e-6


def relative_error(analytic, numeric, floor=FLOOR):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(loss_fn, arrays, analytic, n_samples=20, h=1e-5, rng=None, floor=FLOOR):
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must recompute the scalar loss from the current contents of
    ``arrays`` (a dict name -> ndarray, perturbed in place).  ``analytic`` maps
    the same names to gradient arrays.  Up to ``n_samples`` entries per array
    are drawn at random; all entries are checked for smaller arrays.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst = (None, -1, 0.0, 0.0)
    max_err = 0.0
    count = 0
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise TypeError("gradient checks require float64 arrays")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name} must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        if arr.size <= n_samples:
            idx = np.arange(arr.size)
        else:
            idx = rng.choice(arr.size, size=n_samples, replace=False)
        g = analytic[name].reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn()
            flat[i] = old - h
            fm = loss_fn()
            flat[i] = old
            num = (fp - fm) / (2.0 * h)
            err = relative_error(g[i], num, floor)
            count += 1
            if err > max_err or worst[0] is None:
                max_err = max(err, max_err)
                worst = (name, int(i), float(g[i]), float(num))
    return GradCheckReport(max_err, count, worst)


def check_module(module, x, rng=None, n_samples=20, h=1e-5, seed=0):
    """Gradient-check a module with the projection loss ``sum(R * module(x))``.

    Checks the input and every parameter.  Dropout masks are frozen by
    re-seeding the forward stream for each evaluation.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = module.forward(x, np.random.default_rng(seed + 1))
    proj = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(proj * module.forward(x, np.random.default_rng(seed + 1))))

    module.zero_grad()
    loss()
    dx = module.backward(proj)
    arrays = {"input": x}
    analytic = {"input": dx}
    for name, p in module.named_parameters():
        arrays[name] = p.data
        analytic[name] = p.grad.copy()
    return grad_check(loss, arrays, analytic, n_samples=n_samples, h=h, rng=rng)
