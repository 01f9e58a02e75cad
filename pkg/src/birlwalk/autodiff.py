"""Reverse-accumulation gradient engine over a small set of array primitives.

A ``Tape`` records each primitive applied to ``Var`` handles in execution
order; since every node only refers to earlier nodes, a single reverse sweep
propagates adjoints from a scalar root back to any input.  The primitive set
(elementwise arithmetic, matvec/matmul, reductions, logsumexp, exp/log/tanh/
elu, gather/reshape, max, a log-determinant of ``I - gamma*P``, and a linear
solve against a fixed factorization) is exactly what the log posteriors in
this package need, in double precision throughout.

Finiteness is normally checked only at the scalar root (the hot path stays
lean); when the root comes out non-finite the expression is replayed in
strict mode, where every node checks its output, so the error names the
primitive that produced the first NaN/Inf.
"""

import math

import numpy as np
from scipy.linalg import lu_solve

_STRICT = False


class NonFiniteError(RuntimeError):
    """Raised when a primitive produces NaN or Inf in the forward pass."""

    def __init__(self, op):
        super().__init__(f"non-finite value produced by primitive '{op}'")
        self.op = op


class strict_checks:
    """Context manager enabling per-node finiteness checks."""

    def __enter__(self):
        global _STRICT
        self._prev = _STRICT
        _STRICT = True

    def __exit__(self, *exc):
        global _STRICT
        _STRICT = self._prev


def replay_nonfinite(build):
    """Re-run ``build`` with per-node checks to locate a non-finite op.

    ``build`` must reconstruct the failing expression from scratch.  Always
    raises ``NonFiniteError``.
    """
    with strict_checks():
        build()
    raise NonFiniteError("output")


class Tape:
    """Append-only record of primitive operations, one list entry per node.

    Each entry is a list of ``(parent_index, vjp)`` pairs, where ``vjp`` maps
    the node's adjoint to the parent's adjoint contribution.
    """

    def __init__(self):
        self._links = []

    def _append(self, links):
        self._links.append(links)
        return len(self._links) - 1

    def leaf(self, value):
        """Register an input vector and return its handle."""
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("leaf")
        return Var(self, self._append(()), arr)

    def gradient(self, root, wrt):
        """Adjoint of ``wrt`` after a reverse pass from scalar ``root``."""
        if root.value.size != 1:
            raise ValueError("reverse pass requires a scalar root")
        links = self._links
        adjoints = [None] * (root.index + 1)
        adjoints[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            adj = adjoints[i]
            if adj is None:
                continue
            for parent_index, vjp in links[i]:
                contrib = vjp(adj)
                prev = adjoints[parent_index]
                adjoints[parent_index] = contrib if prev is None else prev + contrib
        result = adjoints[wrt.index]
        if result is None:
            return np.zeros_like(wrt.value)
        return np.asarray(result, dtype=float)


class Var:
    """Handle to one tape node: the tape, the node index, and the value."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ValueError("cannot mix Vars from different tapes")
    if tape is None:
        raise ValueError("at least one operand must be a Var")
    return tape


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _node(op, args, value, vjps):
    """Create a node; ``vjps`` pairs up with the Var operands in ``args``."""
    tape = _tape_of(*args)
    value = np.asarray(value, dtype=float)
    if _STRICT and not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    links = tuple((a.index, vjp) for a, vjp in zip(args, vjps)
                  if isinstance(a, Var))
    return Var(tape, tape._append(links), value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(x, y):
    xv, yv = _val(x), _val(y)
    return _node("add", (x, y), xv + yv,
                 (lambda a: _unbroadcast(a, xv.shape),
                  lambda a: _unbroadcast(a, yv.shape)))


def sub(x, y):
    xv, yv = _val(x), _val(y)
    return _node("sub", (x, y), xv - yv,
                 (lambda a: _unbroadcast(a, xv.shape),
                  lambda a: _unbroadcast(-a, yv.shape)))


def mul(x, y):
    xv, yv = _val(x), _val(y)
    return _node("mul", (x, y), xv * yv,
                 (lambda a: _unbroadcast(a * yv, xv.shape),
                  lambda a: _unbroadcast(a * xv, yv.shape)))


def div(x, y):
    xv, yv = _val(x), _val(y)
    return _node("div", (x, y), xv / yv,
                 (lambda a: _unbroadcast(a / yv, xv.shape),
                  lambda a: _unbroadcast(-a * xv / (yv * yv), yv.shape)))


def neg(x):
    xv = _val(x)
    return _node("neg", (x,), -xv, (lambda a: -a,))


def matvec(m, x):
    """Matrix-vector product, (r, c) @ (c,) -> (r,)."""
    mv, xv = _val(m), _val(x)
    return _node("matvec", (m, x), mv @ xv,
                 (lambda a: np.outer(a, xv),
                  lambda a: mv.T @ a))


def matmul(x, y):
    xv, yv = _val(x), _val(y)
    return _node("matmul", (x, y), xv @ yv,
                 (lambda a: a @ yv.T,
                  lambda a: xv.T @ a))


def dot(x, y):
    xv, yv = _val(x), _val(y)
    return _node("dot", (x, y), np.dot(xv, yv),
                 (lambda a: a * yv, lambda a: a * xv))


def vsum(x, axis=None):
    xv = _val(x)
    if axis is None:
        return _node("sum", (x,), xv.sum(),
                     (lambda a: np.broadcast_to(a, xv.shape),))
    return _node("sum", (x,), xv.sum(axis=axis),
                 (lambda a: np.broadcast_to(np.expand_dims(a, axis), xv.shape),))


def logsumexp(x, axis=-1):
    """Numerically stable log-sum-exp along ``axis``."""
    xv = _val(x)
    hi = np.max(xv, axis=axis, keepdims=True)
    out = np.squeeze(hi, axis=axis) + np.log(
        np.sum(np.exp(xv - hi), axis=axis))

    def vjp(a):
        soft = np.exp(xv - np.expand_dims(out, axis))
        return np.expand_dims(a, axis) * soft

    return _node("logsumexp", (x,), out, (vjp,))


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(_val(x))
    return _node("exp", (x,), out, (lambda a: a * out,))


def log(x):
    xv = _val(x)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(xv)
    return _node("log", (x,), out, (lambda a: a / xv,))


def tanh(x):
    out = np.tanh(_val(x))
    return _node("tanh", (x,), out, (lambda a: a * (1.0 - out * out),))


def elu(x):
    """Exponential linear unit, x for x > 0 and exp(x) - 1 otherwise."""
    xv = _val(x)
    pos = xv > 0
    out = np.where(pos, xv, np.expm1(np.minimum(xv, 0.0)))
    return _node("elu", (x,), out,
                 (lambda a: a * np.where(pos, 1.0, out + 1.0),))


def vmax(x, axis=-1):
    """Max along ``axis``; the reverse pass routes to the first argmax."""
    xv = _val(x)
    out = np.max(xv, axis=axis)
    idx = np.argmax(xv, axis=axis)

    def vjp(a):
        grad = np.zeros_like(xv)
        np.put_along_axis(grad, np.expand_dims(idx, axis),
                          np.expand_dims(a, axis), axis)
        return grad

    return _node("max", (x,), out, (vjp,))


def gather(x, indices):
    """Take elements (1-d input) or rows (2-d input) at integer ``indices``."""
    xv = _val(x)
    idx = np.asarray(indices)
    out = xv[idx]

    def vjp(a):
        grad = np.zeros_like(xv)
        np.add.at(grad, idx, a)
        return grad

    return _node("gather", (x,), out, (vjp,))


def reshape(x, shape):
    xv = _val(x)
    return _node("reshape", (x,), xv.reshape(shape),
                 (lambda a: a.reshape(xv.shape),))


def stop_gradient(x):
    """Identity in the forward pass; blocks the reverse pass."""
    if not isinstance(x, Var):
        return np.asarray(x, dtype=float)
    return _node("stop_gradient", (x,), x.value, ())


def logdet_shrink(p, gamma):
    """log det(I - gamma * P) for a (sub)stochastic square matrix P.

    The determinant is strictly positive whenever every eigenvalue of
    gamma * P lies inside the unit disk; a non-positive sign therefore
    signals corrupted input and raises.
    """
    pv = _val(p)
    a_mat = np.eye(pv.shape[0]) - gamma * pv
    sign, logabs = np.linalg.slogdet(a_mat)
    if sign <= 0:
        raise np.linalg.LinAlgError(
            "det(I - gamma*P) not positive; input is not a valid kernel")

    def vjp(a):
        return -gamma * a * np.linalg.inv(a_mat).T

    return _node("logdet", (p,), logabs, (vjp,))


def solve_fixed(lu_and_piv, b):
    """Solve A x = b where A is held fixed as a prefactored LU pair.

    Only ``b`` participates in differentiation; the reverse pass solves
    against A transposed.
    """
    bv = _val(b)
    out = lu_solve(lu_and_piv, bv)
    return _node("solve", (b,), out,
                 (lambda a: lu_solve(lu_and_piv, a, trans=1),))


def value_and_grad(f, theta):
    """Evaluate a scalar expression ``f`` and its gradient at ``theta``.

    ``f`` receives a Var holding ``theta`` and must build its result from
    the primitives in this module.  Returns ``(value, gradient)`` with the
    gradient matching ``theta`` in length.  A NaN or Inf anywhere in the
    forward pass raises ``NonFiniteError`` naming the offending primitive.
    """
    tape = Tape()
    x = tape.leaf(theta)
    out = f(x)
    if not isinstance(out, Var):
        raise TypeError("expression must return a Var")
    if not np.all(np.isfinite(out.value)):
        replay_nonfinite(lambda: f(Tape().leaf(theta)))
    return float(out.value), tape.gradient(out, x)


# Alias matching the operation's conventional name.
grad = value_and_grad
