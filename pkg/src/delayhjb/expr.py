"""A tiny, safe expression language for costs and initial histories in JSON specs.

Grammar (Python syntax subset)::

    expr   := number | name | expr OP expr | -expr | call
    OP     := + - * / **
    call   := FUNC(expr, ...)
    FUNC   := abs exp log sqrt sin cos tanh min max clamp
    name   := t | s | y0 y1 ... | u0 u1 ... | pi

``clamp(x, lo, hi)`` clips ``x`` to ``[lo, hi]``. ``min``/``max`` are
elementwise over two arguments. Everything is evaluated with numpy so a
compiled expression accepts arrays and broadcasts.

Examples
--------
>>> f = compile_expression("0.5*(1 - exp(-y0**2))", variables=("y0",))
>>> float(f(y0=0.0))
0.0
"""

from __future__ import annotations

import ast
from typing import Callable, Iterable

import numpy as np

_FUNCS: dict[str, Callable] = {
    "abs": np.abs,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "min": np.minimum,
    "max": np.maximum,
    "clamp": lambda x, lo, hi: np.clip(x, lo, hi),
}

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


def _check(node: ast.AST, allowed: set[str]) -> None:
    if isinstance(node, ast.Expression):
        _check(node.body, allowed)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"unsupported constant {node.value!r}")
    elif isinstance(node, ast.Name):
        if node.id not in allowed and node.id != "pi":
            raise ExpressionError(f"unknown name {node.id!r}")
    elif isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"unsupported operator {type(node.op).__name__}")
        _check(node.left, allowed)
        _check(node.right, allowed)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError("unsupported unary operator")
        _check(node.operand, allowed)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ExpressionError("unsupported function call")
        if node.keywords:
            raise ExpressionError("keyword arguments are not allowed")
        for arg in node.args:
            _check(arg, allowed)
    else:
        raise ExpressionError(f"unsupported syntax {type(node).__name__}")


def _eval(node: ast.AST, env: dict):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return np.pi if node.id == "pi" else env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        val = _eval(node.operand, env)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](*(_eval(a, env) for a in node.args))
    raise ExpressionError("unreachable")  # pragma: no cover


def compile_expression(source: str, variables: Iterable[str]) -> Callable[..., np.ndarray]:
    """Parse ``source`` once and return a keyword-argument evaluator."""
    allowed = set(variables)
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {source!r}: {exc.msg}") from None
    _check(tree, allowed)
    body = tree.body

    def evaluate(**env):
        missing = allowed - env.keys()
        if missing:
            raise ExpressionError(f"missing variables {sorted(missing)}")
        return _eval(body, env)

    evaluate.source = source
    return evaluate


def state_function(source: str, n: int, time_arg: str | None = None):
    """Wrap an expression in ``y0..y{n-1}`` as a vectorised callable.

    Returns ``f(y)`` (or ``f(t, y)`` when ``time_arg`` is given) where ``y`` has
    shape ``(..., n)`` and the result has shape ``y.shape[:-1]``.
    """
    names = [f"y{i}" for i in range(n)]
    variables = names + ([time_arg] if time_arg else [])
    fn = compile_expression(source, variables)

    def _apply(t, y):
        y = np.asarray(y, dtype=float)
        env = {name: y[..., i] for i, name in enumerate(names)}
        if time_arg:
            env[time_arg] = t
        out = np.asarray(fn(**env), dtype=float)
        return np.broadcast_to(out, y.shape[:-1]).copy()

    if time_arg:
        return lambda t, y: _apply(t, y)
    return lambda y: _apply(None, y)
