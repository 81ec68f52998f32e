"""Tiny arithmetic expression language for feature maps and blip terms.

Grammar: numeric constants, variable references, ``+``, ``-``, ``*`` and
parentheses.  Variables are names like ``a0`` (treatment at time 0), ``y2``
(outcome at time 2) or ``x1`` (covariate ``x`` at time 1); which names are in
scope depends on where the expression is used and is checked by the caller.
"""

from __future__ import annotations

import ast
from functools import lru_cache
from typing import Mapping

import numpy as np

__all__ = ["Expression", "compile_expression", "ExpressionError"]


class ExpressionError(ValueError):
    """Raised for syntax errors or constructs outside the supported grammar."""


_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply}


class Expression:
    """A compiled expression; call with a variable environment to evaluate.

    Evaluation broadcasts over numpy arrays, so the same expression works for
    a single subject (scalar env) and a whole panel (vector env).
    """

    def __init__(self, text: str):
        self.text = text
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"invalid expression {text!r}: {exc.msg}") from None
        self._root = _validate(tree.body, text)
        self.variables = frozenset(
            node.id for node in ast.walk(self._root) if isinstance(node, ast.Name)
        )

    def __call__(self, env: Mapping[str, object]):
        return _eval(self._root, env, self.text)

    def __repr__(self):
        return f"Expression({self.text!r})"


def _validate(node: ast.expr, text: str) -> ast.expr:
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ExpressionError(f"non-numeric constant in {text!r}")
        return node
    if isinstance(node, ast.Name):
        return node
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _validate(node.left, text)
        _validate(node.right, text)
        return node
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _validate(node.operand, text)
        return node
    raise ExpressionError(
        f"unsupported construct in {text!r}: only constants, variables, "
        "+, - and * are allowed"
    )


def _eval(node: ast.expr, env: Mapping[str, object], text: str):
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        try:
            return env[node.id]
        except KeyError:
            raise ExpressionError(f"unknown variable {node.id!r} in {text!r}") from None
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env, text), _eval(node.right, env, text))
    # unary +/- is the only remaining node kind after validation
    value = _eval(node.operand, env, text)
    return -value if isinstance(node.op, ast.USub) else +value


@lru_cache(maxsize=4096)
def compile_expression(text: str) -> Expression:
    """Parse ``text`` once and cache the compiled form."""
    return Expression(text)
