"""Minimal tape-based reverse-mode engine with second-order support."""
from .core import (
    OPS,
    DiffValue,
    EngineError,
    GradientError,
    NonFiniteError,
    ShapeError,
    Tape,
    apply,
    as_value,
    grad_and_value,
    gradient,
)
from .derivatives import jacobian, second_derivative
from .ops import *  # noqa: F401,F403
from .ops import sum_ as sum_  # noqa: F401
from .params import ParamSet


def forward(tape: Tape, inputs: dict | None = None):
    """Replay ``tape`` with optionally overridden named inputs; return the last node's value."""
    return tape.replay(inputs)[-1]
