"""Allocation instrumentation for solver kernels.

Solver kernels (the inverse-apply variants, CG and the Neumann recurrence)
report every scratch array they allocate through :func:`note_workspace`.
When a :class:`WorkspaceMeter` is active, the meter records the sizes;
otherwise the call is a near-free no-op.

``peak_bytes`` is the largest single scratch buffer a kernel needed, the
classic workspace notion (LAPACK's ``lwork``). It is what the benchmark
reports as memory: deliberately independent of machine RSS, it exposes the
algorithmic space behavior of each solver variant. Inputs to the kernels
(the Nystrom factor block, the right-hand side) are not workspace and are
never noted.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

_ACTIVE: contextvars.ContextVar["WorkspaceMeter | None"] = contextvars.ContextVar(
    "nygrad_workspace_meter", default=None
)


@dataclass
class WorkspaceMeter:
    """Accumulates scratch-allocation sizes noted by solver kernels."""

    peak_bytes: int = 0
    total_bytes: int = 0
    n_allocations: int = 0
    by_label: dict[str, int] = field(default_factory=dict)

    def note(self, arr: np.ndarray, label: str = "") -> None:
        nbytes = int(arr.nbytes)
        self.total_bytes += nbytes
        self.n_allocations += 1
        if nbytes > self.peak_bytes:
            self.peak_bytes = nbytes
        if label:
            self.by_label[label] = max(self.by_label.get(label, 0), nbytes)


def note_workspace(arr: np.ndarray, label: str = "") -> None:
    """Record a scratch allocation on the active meter, if any."""
    meter = _ACTIVE.get()
    if meter is not None:
        meter.note(arr, label)


@contextlib.contextmanager
def track_workspace():
    """Activate a fresh meter for the duration of the block and yield it."""
    meter = WorkspaceMeter()
    token = _ACTIVE.set(meter)
    try:
        yield meter
    finally:
        _ACTIVE.reset(token)
