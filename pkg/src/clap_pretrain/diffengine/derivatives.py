"""Second-order helpers built on the tape-of-tape backward pass."""
from __future__ import annotations

import numpy as np

from . import ops
from .core import DiffValue, EngineError, gradient

MODES = ("jacobian-frobenius", "vjp-ones")


def jacobian(vector_output: DiffValue, wrt_input: DiffValue) -> np.ndarray:
    """Jacobian of a 3-vector field, batched over leading rows.

    ``vector_output`` is (3,) or (N, 3); ``wrt_input`` matches. For batched
    use every output row must depend only on the matching input row, so one
    reverse pass per output component recovers all N Jacobians at once.
    Returns (3, 3) or (N, 3, 3) with ``J[..., i, j] = d out_i / d in_j``.
    """
    if vector_output.shape[-1] != 3 or wrt_input.shape[-1] != 3:
        raise EngineError(
            f"second derivative needs 3-vector output and input, got {vector_output.shape} and {wrt_input.shape}"
        )
    if vector_output.shape != wrt_input.shape:
        raise EngineError(f"output {vector_output.shape} and input {wrt_input.shape} must be row-aligned")
    if vector_output.node is None:
        # nothing was recorded: the output does not depend on the input
        return np.zeros(vector_output.shape + (3,))
    rows = []
    for k in range(3):
        comp = ops.sum_(vector_output[..., k])
        (g,) = gradient(comp, [wrt_input])
        rows.append(g)
    return np.stack(rows, axis=-2)


def second_derivative(vector_output: DiffValue, wrt_input: DiffValue, mode: str = "jacobian-frobenius") -> np.ndarray:
    """Derivative of a 3-vector that is itself built from a gradient.

    ``jacobian-frobenius`` returns the full Jacobian; ``vjp-ones`` returns
    ``J^T 1`` (one 3-vector per row).
    """
    if mode not in MODES:
        raise EngineError(f"unknown mode '{mode}', expected one of {MODES}")
    jac = jacobian(vector_output, wrt_input)
    if mode == "jacobian-frobenius":
        return jac
    return jac.sum(axis=-2)
