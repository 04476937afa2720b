"""Central-difference verification of the analytic gradients.

Runs the full composite loss (projection, pairing, relation MLP, mean
pool, scoring MLP, classifier, cross-entropy) at every parameter scalar
and compares against the tape's gradients. Requires float64 parameters
and uses eval mode so dropout cannot inject noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError
from .model import ItemInput, ModelParams
from .training import batch_loss, batch_loss_value


@dataclass
class GradCheckFailure:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    h: float
    tol: float
    failures: list[GradCheckFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(
    params: ModelParams,
    batch: Sequence[tuple[Sequence[ItemInput], int]],
    h: float = 1e-4,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare every analytic parameter gradient to (L(p+h) - L(p-h)) / 2h.

    Relative error is |ga - gn| / max(1, |ga|, |gn|). Failures carry the
    parameter name, flat index, and both values.
    """
    if params.dtype != np.float64:
        raise InputError("grad_check requires float64 parameters; use params.astype(np.float64)")
    _, grads = batch_loss(params, batch, mode="eval", rng=None)
    max_rel = 0.0
    n_checked = 0
    failures: list[GradCheckFailure] = []
    for name, tensor in params.named_tensors():
        flat = tensor.data.reshape(-1)
        analytic_flat = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            loss_plus = batch_loss_value(params, batch)
            flat[i] = orig - h
            loss_minus = batch_loss_value(params, batch)
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = float(analytic_flat[i])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            max_rel = max(max_rel, rel)
            n_checked += 1
            if rel > tol:
                failures.append(
                    GradCheckFailure(
                        name=name,
                        index=np.unravel_index(i, tensor.data.shape),
                        analytic=analytic,
                        numeric=numeric,
                        rel_error=rel,
                    )
                )
    return GradCheckReport(
        max_rel_error=max_rel, n_checked=n_checked, h=h, tol=tol, failures=failures
    )
