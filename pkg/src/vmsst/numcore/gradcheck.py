"""Central-difference gradient checking against the tape's analytic grads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import NumericalError
from .tensor import Tape, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: int
    tol: float
    passed: bool
    n_entries: int
    per_param: dict[str, float] = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}) at {self.worst_param}[{self.worst_index}] "
            f"over {self.n_entries} entries"
        )

    def update(self, err: float, name: str, index: int) -> None:
        self.n_entries += 1
        self.per_param[name] = max(err, self.per_param.get(name, 0.0))
        if err > self.max_rel_error:
            self.max_rel_error = err
            self.worst_param = name
            self.worst_index = index
        self.passed = self.max_rel_error < self.tol


def grad_check_multi(
    f: Callable[[], Sequence[Tensor]],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    denom_floor: float = 1e-5,
) -> list[GradCheckReport]:
    """Check several scalar losses sharing one forward graph.

    f must return the same tuple of deterministic scalar losses on every call
    (internal randomness re-seeded per call). Each perturbed evaluation
    yields one central difference per loss, so the sweep cost is shared.
    Relative error per entry is |a - n| / max(|a|, |n|, denom_floor); the
    floor keeps cancellation noise on near-zero gradients from dominating.
    Run with 64-bit parameters.
    """
    with Tape():
        losses = list(f())
        analytic: list[dict[str, np.ndarray]] = []
        for loss in losses:
            if not np.isfinite(float(loss.data)):
                raise NumericalError("grad_check: loss is non-finite at the base point")
            for p in params.values():
                p.zero_grad()
            backward(loss)
            analytic.append({n: p.grad_or_zeros().copy() for n, p in params.items()})

    reports = [
        GradCheckReport(max_rel_error=0.0, worst_param="", worst_index=-1,
                        tol=tol, passed=True, n_entries=0)
        for _ in losses
    ]

    def evaluate(name: str, index: int) -> list[float]:
        vals = [float(t.data) for t in f()]
        if not all(np.isfinite(v) for v in vals):
            raise NumericalError(
                f"grad_check: non-finite loss probing {name}[{index}]"
            )
        return vals

    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flats = [a[name].reshape(-1) for a in analytic]
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate(name, i)
            flat[i] = orig - h
            f_minus = evaluate(name, i)
            flat[i] = orig
            for out, (fp, fm) in enumerate(zip(f_plus, f_minus)):
                num = (fp - fm) / (2.0 * h)
                a = a_flats[out][i]
                err = abs(a - num) / max(abs(a), abs(num), denom_floor)
                reports[out].update(err, name, i)
    return reports


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-6,
    denom_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar f() with central differences."""
    return grad_check_multi(lambda: (f(),), params, h=h, tol=tol,
                            denom_floor=denom_floor)[0]
