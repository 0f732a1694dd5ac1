"""Finite-difference verification of reverse-mode gradients.

The checker evaluates a scalar-valued function twice: once under a tape to
collect reverse-mode gradients, then coordinate by coordinate with central
differences. It reports the worst per-coordinate relative error and which
input/coordinate produced it, so a broken backward rule is attributable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class CoordinateError:
    input_name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    name: str
    passed: bool
    tolerance: float
    max_rel_error: float
    worst: CoordinateError | None
    num_coords: int
    failures: list[CoordinateError] = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check[{self.name}]: {status} "
            f"(max rel err {self.max_rel_error:.3e} over {self.num_coords} coords, tol {self.tolerance:.1e})"
        )


def _rel_error(a: float, n: float, atol: float) -> float:
    diff = abs(a - n)
    if diff <= atol:
        return 0.0
    return diff / max(abs(a), abs(n), atol)


def grad_check(
    f,
    inputs: dict[str, Tensor],
    step: float = 1e-3,
    tolerance: float = 1e-4,
    atol: float = 1e-8,
    name: str = "f",
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(inputs)`` with central differences.

    ``f`` takes the inputs dict and returns a scalar Tensor. Every input with
    requires_grad=True is probed coordinate-wise at the given step. Errors
    below ``atol`` are treated as zero so true-zero gradients do not blow up
    the relative measure.
    """
    for t in inputs.values():
        t.grad = None
    with Tape() as tape:
        out = f(inputs)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    tape.backward(out)

    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in inputs.items()
        if t.requires_grad
    }

    worst: CoordinateError | None = None
    failures: list[CoordinateError] = []
    max_rel = 0.0
    ncoords = 0
    for key, t in inputs.items():
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        a_flat = analytic[key].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f(inputs).item()
            flat[i] = orig - step
            f_minus = f(inputs).item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = _rel_error(float(a_flat[i]), numeric, atol)
            ncoords += 1
            coord = CoordinateError(
                input_name=key,
                index=tuple(int(v) for v in np.unravel_index(i, t.data.shape)),
                analytic=float(a_flat[i]),
                numeric=numeric,
                rel_error=rel,
            )
            if rel > max_rel:
                max_rel = rel
                worst = coord
            if rel > tolerance:
                failures.append(coord)

    return GradCheckReport(
        name=name,
        passed=max_rel <= tolerance,
        tolerance=tolerance,
        max_rel_error=max_rel,
        worst=worst,
        num_coords=ncoords,
        failures=failures,
    )
