"""Small arithmetic-expression evaluator for model coefficients in configs.

Supports + - * / ^ (and **), unary minus, numbers, the constants pi and e,
the variables t and x, and the functions exp, log, sqrt, abs, min, max.

    >>> f = compile_expr("max(x - 1, 0)^2 + 0.5*t", ("t", "x"))
    >>> float(f(1.0, 3.0))
    4.5
"""
from __future__ import annotations

import ast
import operator

import numpy as np

from .errors import ConfigurationError

_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: np.power}
_FUNCS = {"exp": (np.exp, 1), "log": (np.log, 1), "sqrt": (np.sqrt, 1), "abs": (np.abs, 1),
          "min": (np.minimum, 2), "max": (np.maximum, 2)}
_CONSTS = {"pi": np.pi, "e": np.e}


def _check(node, variables):
    if isinstance(node, ast.Expression):
        return _check(node.body, variables)
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ConfigurationError(f"operator {type(node.op).__name__} not allowed")
        _check(node.left, variables)
        _check(node.right, variables)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ConfigurationError("only unary + and - are allowed")
        _check(node.operand, variables)
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ConfigurationError(f"bad literal {node.value!r}")
    elif isinstance(node, ast.Name):
        if node.id not in variables and node.id not in _CONSTS:
            raise ConfigurationError(f"unknown name {node.id!r}; allowed: {sorted(variables)}")
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ConfigurationError("unknown function call")
        arity = _FUNCS[node.func.id][1]
        if len(node.args) != arity or node.keywords:
            raise ConfigurationError(f"{node.func.id} takes {arity} argument(s)")
        for a in node.args:
            _check(a, variables)
    else:
        raise ConfigurationError(f"unsupported syntax: {type(node).__name__}")


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    fn = _FUNCS[node.func.id][0]
    return fn(*[_eval(a, env) for a in node.args])


def compile_expr(text: str, variables=("x",)):
    """Parse once and return a vectorized callable of the given variables."""
    if not isinstance(text, str):
        if isinstance(text, (int, float)) and not isinstance(text, bool):
            text = repr(float(text))
        else:
            raise ConfigurationError(f"expression must be a string or number, got {text!r}")
    try:
        # ^ means power; as Python's xor it would bind looser than + and -
        tree = ast.parse(text.strip().replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse {text!r}: {exc.msg}") from None
    _check(tree, set(variables))
    names = tuple(variables)

    def f(*args):
        if len(args) != len(names):
            raise TypeError(f"expected {len(names)} arguments")
        arrs = [np.asarray(a, float) for a in args]
        shape = np.broadcast_shapes(*[a.shape for a in arrs])
        with np.errstate(all="ignore"):
            out = _eval(tree, dict(zip(names, arrs)))
        return np.broadcast_to(np.asarray(out, float), shape).copy() if shape else np.asarray(out, float)

    f.source = text
    return f
