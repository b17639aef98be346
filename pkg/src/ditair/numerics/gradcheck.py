from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .rng import Rng


def grad_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    eps: float = 1e-4,
    max_entries: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``f`` evaluates the scalar loss from the current contents of ``params``,
    which are perturbed in place and restored. With ``max_entries`` set, each
    array is probed at that many randomly chosen positions.
    """
    worst = 0.0
    for arr, g in zip(params, grads):
        flat = arr.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            picker = rng or Rng(0)
            idx = np.sort(picker.integers(0, flat.size, (max_entries,)))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite loss while probing entry {i}")
            fd = (fp - fm) / (2 * eps)
            a = float(gflat[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
