"""Central finite-difference gradient checking.

`check_gradients` compares tape gradients against central differences
(step 1e-3) on a sample of coordinates per tensor. A coordinate passes when
|analytic - numeric| <= max(rel_tol * max(|analytic|, |numeric|), abs_floor);
the absolute floor absorbs float32 evaluation noise near zero.

`run_suite` drives the registered whole-package check list and backs the
`gradcheck` CLI command.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor, backward, mul, scale, sum_all

STEP = 1e-3
REL_TOL = 1e-2
ABS_FLOOR = 1e-4
MAX_ENTRIES = 64


def probe_weights(rng: np.random.Generator, dims: tuple[int, ...]) -> Tensor:
    """Fixed random weights for a probe loss; freeze once, reuse per build."""
    return Tensor(rng.uniform(-1.0, 1.0, size=dims).astype(np.float32))


def weighted_mean(out: Tensor, weights: Tensor) -> Tensor:
    """Scalar probe `mean(out * weights)`.

    Normalizing by the element count keeps the loss magnitude O(1) so the
    float32 evaluation noise of the central difference stays below the
    absolute floor.
    """
    return scale(sum_all(mul(out, weights)), 1.0 / out.numel)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool
    worst: str = ""

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        tail = f" ({self.worst})" if self.worst and not self.passed else ""
        return (f"{status:4s} {self.name}: max rel err {self.max_rel_err:.3e}, "
                f"max abs err {self.max_abs_err:.3e}{tail}")


def check_gradients(name: str, build: Callable[[], Tensor],
                    params: dict[str, Tensor], *, step: float = STEP,
                    rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR,
                    max_entries: int = MAX_ENTRIES,
                    rng: np.random.Generator | None = None) -> CheckResult:
    """Check d(build())/d(param) for every tensor in `params`.

    `build` must rebuild the scalar loss from the current parameter values on
    every call; it is invoked once under a tape for the analytic gradients and
    repeatedly without one for the perturbed evaluations.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    analytic = {k: (p.grad.copy() if p.grad is not None
                    else np.zeros(p.dims, dtype=np.float32))
                for k, p in params.items()}

    max_rel = 0.0
    max_abs = 0.0
    passed = True
    worst = ""
    for key, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idx = (np.arange(n) if n <= max_entries
               else rng.choice(n, size=max_entries, replace=False))
        for i in idx:
            keep = flat[i]
            flat[i] = keep + step
            up = build().item()
            flat[i] = keep - step
            down = build().item()
            flat[i] = keep
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[key].reshape(-1)[i])
            err = abs(a - numeric)
            denom = max(abs(a), abs(numeric))
            rel = err / denom if denom > 0 else 0.0
            if err > max_abs:
                max_abs = err
                worst = (f"{key}[{i}]: analytic {a:.6e} vs "
                         f"numeric {numeric:.6e}")
            if err > max(rel_tol * denom, abs_floor):
                passed = False
                max_rel = max(max_rel, rel)
            elif denom > abs_floor:
                max_rel = max(max_rel, rel)
    return CheckResult(name, max_rel, max_abs, passed, worst)


def run_suite(verbose: bool = True) -> list[CheckResult]:
    """Run every registered gradient check; import is deferred so the tensor
    core stays free of higher-module dependencies."""
    from .checks import build_all_checks

    results = []
    for name, fn in build_all_checks():
        res = fn()
        res.name = name
        results.append(res)
        if verbose:
            print(res)
    return results
