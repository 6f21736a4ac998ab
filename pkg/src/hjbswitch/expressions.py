"""Tiny closed-form expression language for problem coefficients.

Coefficients are written as strings over the grid coordinates (``x`` in 1D,
``x`` and ``y`` in 2D) using constants, ``+ - * / **``, unary minus and the
functions ``sin``, ``cos``, ``exp``.  Expressions are parsed once into a
whitelisted AST and evaluated vectorised with numpy, so problem instances
stay serialisable in plain config files.
"""

from __future__ import annotations

import ast

import numpy as np

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_COORD_NAMES = ("x", "y")


class ExpressionError(ValueError):
    """Raised when an expression uses syntax outside the language."""


def _check(node, dim):
    if isinstance(node, ast.Expression):
        _check(node.body, dim)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant {node.value!r}")
    elif isinstance(node, ast.Name):
        if node.id in _CONSTS:
            return
        if node.id not in _COORD_NAMES[:dim]:
            raise ExpressionError(f"unknown name {node.id!r} (dim={dim})")
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed")
        _check(node.left, dim)
        _check(node.right, dim)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError("only unary +/- allowed")
        _check(node.operand, dim)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("only sin/cos/exp calls allowed")
        if len(node.args) != 1 or node.keywords:
            raise ExpressionError("functions take exactly one argument")
        _check(node.args[0], dim)
    else:
        raise ExpressionError(f"syntax node {type(node).__name__} not allowed")


def _eval(node, coords):
    if isinstance(node, ast.Expression):
        return _eval(node.body, coords)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id in _CONSTS:
            return _CONSTS[node.id]
        return coords[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, coords), _eval(node.right, coords))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, coords)
        return -val if isinstance(node.op, ast.USub) else +val
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](_eval(node.args[0], coords))
    raise ExpressionError(f"unexpected node {type(node).__name__}")


class Expression:
    """A parsed coefficient expression, callable on point arrays.

    Calling with an ``(npoints, dim)`` array returns an ``(npoints,)`` array.
    """

    def __init__(self, source, dim):
        if isinstance(source, (int, float)):
            source = repr(float(source))
        self.source = source
        self.dim = dim
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {source!r}: {exc}") from exc
        _check(tree, dim)
        self._tree = tree

    def __call__(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        coords = {name: pts[:, k] for k, name in enumerate(_COORD_NAMES[: self.dim])}
        out = _eval(self._tree, coords)
        return np.broadcast_to(np.asarray(out, dtype=float), (pts.shape[0],)).copy()

    def __repr__(self):
        return f"Expression({self.source!r}, dim={self.dim})"
