"""Tape, recorded values and the reverse-mode driver.

Every elementary op is registered in :data:`OPS` with a numpy forward
function and a vector-Jacobian rule. The rules are written with the engine's
own ops, so running the backward pass with ``create_graph=True`` appends the
backward computation to the same tape and it can be differentiated again.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for differentiable-engine failures."""


class ShapeError(EngineError):
    """Operand shapes are incompatible for an op.

    ``node`` is the id the failing op would have received on its tape (or
    ``None`` when every operand was a constant).
    """

    def __init__(self, op: str, node: int | None, shapes: Sequence[tuple], detail: str = ""):
        self.op = op
        self.node = node
        self.shapes = tuple(tuple(s) for s in shapes)
        where = f"node {node}" if node is not None else "constant expression"
        msg = f"shape mismatch in '{op}' at {where}: operand shapes {list(self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(EngineError):
    """Invalid gradient request (non-scalar output, unrecorded inputs, ...)."""


class NonFiniteError(EngineError):
    """A recorded node holds NaN or Inf."""

    def __init__(self, node: int, op: str):
        self.node = node
        self.op = op
        super().__init__(f"first non-finite value at node {node} (op '{op}')")


@dataclass(frozen=True)
class OpDef:
    fwd: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]


OPS: dict[str, OpDef] = {}


def register(name: str, fwd: Callable[..., np.ndarray], vjp: Callable[..., tuple]) -> None:
    OPS[name] = OpDef(fwd, vjp)


class DiffValue:
    """A float64 array, optionally tied to a node of a tape."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # make ``ndarray <op> DiffValue`` dispatch to us

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self.node is not None

    def detach(self) -> "DiffValue":
        return DiffValue(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f"node={self.node}" if self.node is not None else "const"
        return f"DiffValue(shape={self.shape}, {tag})"

    # arithmetic sugar; implementations live in ops.py
    def __add__(self, other):
        return apply("add", self, other)

    def __radd__(self, other):
        return apply("add", other, self)

    def __sub__(self, other):
        return apply("sub", self, other)

    def __rsub__(self, other):
        return apply("sub", other, self)

    def __mul__(self, other):
        return apply("mul", self, other)

    def __rmul__(self, other):
        return apply("mul", other, self)

    def __truediv__(self, other):
        return apply("div", self, other)

    def __rtruediv__(self, other):
        return apply("div", other, self)

    def __neg__(self):
        return apply("mul", self, -1.0)

    def __matmul__(self, other):
        from .ops import matmul

        return matmul(self, other)

    def __rmatmul__(self, other):
        from .ops import matmul

        return matmul(other, self)

    def __getitem__(self, key):
        from .ops import slice_

        return slice_(self, key)


def as_value(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


class Tape:
    """Append-only record of an eager computation.

    Nodes are stored in creation order, so parents always precede children.
    Leaves are either named (inputs and parameters, see :meth:`leaf`) or
    anonymous constants folded into the consuming node.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.parents: list[tuple] = []
        self.consts: list[tuple] = []
        self.attrs: list[dict] = []
        self.values: list[np.ndarray] = []
        self.names: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.ops)

    # -- recording -------------------------------------------------------
    def leaf(self, name: str, data) -> DiffValue:
        """Register a named differentiable input (parameter or data)."""
        if name in self.names:
            raise EngineError(f"leaf '{name}' already registered on this tape")
        data = np.array(data, dtype=np.float64)
        nid = self._append("leaf", (), (), {"name": name}, data)
        self.names[name] = nid
        return DiffValue(data, self, nid)

    def value(self, name: str) -> DiffValue:
        nid = self.names[name]
        return DiffValue(self.values[nid], self, nid)

    def _append(self, op, parents, consts, attrs, value) -> int:
        nid = len(self.ops)
        self.ops.append(op)
        self.parents.append(parents)
        self.consts.append(consts)
        self.attrs.append(attrs)
        self.values.append(value)
        return nid

    # -- inspection ------------------------------------------------------
    def first_nonfinite(self) -> int | None:
        for i, v in enumerate(self.values):
            if not np.all(np.isfinite(v)):
                return i
        return None

    def check_finite(self) -> None:
        bad = self.first_nonfinite()
        if bad is not None:
            raise NonFiniteError(bad, self.ops[bad])

    def replay(self, inputs: dict[str, Any] | None = None) -> list[np.ndarray]:
        """Re-run every node's forward function from the leaves.

        ``inputs`` optionally overrides named leaves. Returns the new value of
        every node; the tape itself is not modified.
        """
        inputs = inputs or {}
        out: list[np.ndarray] = []
        for i, op in enumerate(self.ops):
            if op == "leaf":
                name = self.attrs[i]["name"]
                out.append(np.asarray(inputs[name], dtype=np.float64) if name in inputs else self.values[i])
                continue
            args = [out[p] if p is not None else c for p, c in zip(self.parents[i], self.consts[i])]
            out.append(OPS[op].fwd(*args, **self.attrs[i]))
        return out

    def to_json(self) -> str:
        """Dump the op list (no values) for debugging."""

        def enc(v):
            if isinstance(v, np.ndarray):
                return {"ndarray": list(v.shape)}
            if isinstance(v, (tuple, list)):
                return [enc(x) for x in v]
            if isinstance(v, slice):
                return f"{v.start}:{v.stop}:{v.step}"
            if isinstance(v, (np.integer,)):
                return int(v)
            return v

        nodes = [
            {
                "id": i,
                "op": op,
                "parents": list(self.parents[i]),
                "attrs": {k: enc(v) for k, v in self.attrs[i].items()},
                "shape": list(self.values[i].shape),
            }
            for i, op in enumerate(self.ops)
        ]
        return json.dumps(nodes, indent=1)


def apply(op: str, *inputs, **attrs) -> DiffValue:
    """Evaluate ``op`` eagerly and record it if any operand is recorded."""
    vals = [as_value(x) for x in inputs]
    tape = None
    for v in vals:
        if v.node is not None:
            if tape is None:
                tape = v.tape
            elif v.tape is not tape:
                raise EngineError(f"operands of '{op}' live on different tapes")
    try:
        out = OPS[op].fwd(*[v.data for v in vals], **attrs)
    except (ValueError, IndexError) as exc:
        raise ShapeError(op, len(tape) if tape is not None else None, [v.shape for v in vals], str(exc)) from None
    if tape is None:
        return DiffValue(out)
    parents = tuple(v.node if v.node is not None else None for v in vals)
    consts = tuple(None if v.node is not None else v.data for v in vals)
    nid = tape._append(op, parents, consts, attrs, out)
    return DiffValue(out, tape, nid)


def _collect_targets(tape: Tape, wrt) -> list[int]:
    ids = []
    for w in wrt:
        if isinstance(w, str):
            if w not in tape.names:
                raise GradientError(f"no recorded input named '{w}'")
            ids.append(tape.names[w])
        else:
            if not isinstance(w, DiffValue) or w.node is None or w.tape is not tape:
                raise GradientError("gradient requested with respect to an unrecorded constant")
            ids.append(w.node)
    return ids


def gradient(output: DiffValue, wrt: Sequence, create_graph: bool = False) -> list:
    """Reverse-mode derivative of a scalar ``output``.

    ``wrt`` holds recorded DiffValues or names of tape leaves. Returns numpy
    arrays, or recorded DiffValues when ``create_graph`` is set (the backward
    pass is then itself recorded and can be differentiated again).
    """
    if output.size != 1:
        raise GradientError(f"output must be scalar, got shape {output.shape}")
    if output.node is None:
        raise GradientError("output is a constant; nothing was recorded")
    tape = output.tape
    targets = _collect_targets(tape, wrt)
    top = output.node
    lo = min(targets)
    target_set = set(targets)

    # forward sweep: which nodes depend on any target
    needs = np.zeros(top + 1, dtype=bool)
    for t in targets:
        if t <= top:
            needs[t] = True
    for i in range(lo, top + 1):
        if not needs[i]:
            for p in tape.parents[i]:
                if p is not None and needs[p]:
                    needs[i] = True
                    break

    def node_value(i: int) -> DiffValue:
        return DiffValue(tape.values[i], tape, i) if create_graph else DiffValue(tape.values[i])

    def parent_value(i: int, k: int) -> DiffValue:
        p = tape.parents[i][k]
        return node_value(p) if p is not None else DiffValue(tape.consts[i][k])

    cot: dict[int, DiffValue] = {top: DiffValue(np.ones_like(tape.values[top]))}
    found: dict[int, DiffValue] = {}
    for i in range(top, lo - 1, -1):
        g = cot.pop(i, None)
        if g is None or not needs[i]:
            continue
        if i in target_set:
            found[i] = g
        op = tape.ops[i]
        if op == "leaf":
            continue
        parents = tape.parents[i]
        pneeds = tuple(p is not None and bool(needs[p]) for p in parents)
        if not any(pneeds):
            continue
        ins = [parent_value(i, k) for k in range(len(parents))]
        outs = OPS[op].vjp(g, ins, node_value(i), pneeds, **tape.attrs[i])
        for p, need, c in zip(parents, pneeds, outs):
            if not need or c is None:
                continue
            prev = cot.get(p)
            cot[p] = c if prev is None else prev + c

    result = []
    for t in targets:
        g = found.get(t)
        if g is None:
            g = DiffValue(np.zeros_like(tape.values[t]))
        result.append(g if create_graph else g.data)
    return result


def grad_and_value(fn: Callable[..., DiffValue], *args) -> tuple[float, list[np.ndarray]]:
    """Convenience: record ``fn(*leaves)`` on a fresh tape and differentiate."""
    tape = Tape()
    leaves = [tape.leaf(f"x{i}", a) for i, a in enumerate(args)]
    out = fn(*leaves)
    return out.item(), gradient(out, leaves)
