"""Built-in wave problems on the unit square."""
from __future__ import annotations

import numpy as np

from .dynamics import ExactSolution, WaveProblem

__all__ = ["test1", "test2", "quadratic", "zero", "get"]

PI = np.pi


def _bump(x, y):
    return np.sin(PI * x) * np.sin(PI * y)


def _bump_grad(x, y):
    return PI * np.cos(PI * x) * np.sin(PI * y), PI * np.sin(PI * x) * np.cos(PI * y)


def quadratic(k, T=1.0):
    """f(s) = k s^2 with Test 1's initial data (no exact solution unless k = (1 - 2 pi^2)/2)."""
    return WaveProblem(
        f=lambda s: k * s * s,
        f_prime=lambda s: 2.0 * k * s,
        f_second=lambda s: np.full_like(np.asarray(s, dtype=float), 2.0 * k),
        u0=lambda x, y: 0.0 * x,
        v0=_bump,
        grad_u0=lambda x, y: (0.0 * x, 0.0 * y),
        T=T,
        name=f"quadratic(k={k:g})",
    )


def test1(T=1.0):
    """K = I, f(u) = (1 - 2 pi^2)/2 u^2, exact u = sin(t) sin(pi x) sin(pi y)."""
    k = 0.5 * (1.0 - 2.0 * PI**2)
    exact = ExactSolution(
        u=lambda t, x, y: np.sin(t) * _bump(x, y),
        grad=lambda t, x, y: tuple(np.sin(t) * g for g in _bump_grad(x, y)),
        v=lambda t, x, y: np.cos(t) * _bump(x, y),
    )
    return WaveProblem(
        f=lambda s: k * s * s,
        f_prime=lambda s: 2.0 * k * s,
        f_second=lambda s: np.full_like(np.asarray(s, dtype=float), 2.0 * k),
        u0=lambda x, y: 0.0 * x,
        v0=_bump,
        exact=exact,
        T=T,
        name="test1",
    )


def test2(T=1.0):
    """K = I, f(u) = sin(u), u0 = 0, v0 = sin(pi x) sin(pi y)."""
    return WaveProblem(
        f=np.sin,
        f_prime=np.cos,
        f_second=lambda s: -np.sin(s),
        u0=lambda x, y: 0.0 * x,
        v0=_bump,
        grad_u0=lambda x, y: (0.0 * x, 0.0 * y),
        T=T,
        name="test2",
    )


def zero(T=1.0):
    """All data zero with f(s) = s^2; every metric vanishes."""
    return WaveProblem(
        f=lambda s: s * s,
        f_prime=lambda s: 2.0 * s,
        f_second=lambda s: np.full_like(np.asarray(s, dtype=float), 2.0),
        u0=lambda x, y: 0.0 * x,
        v0=lambda x, y: 0.0 * x,
        grad_u0=lambda x, y: (0.0 * x, 0.0 * y),
        exact=ExactSolution(
            u=lambda t, x, y: 0.0 * x,
            grad=lambda t, x, y: (0.0 * x, 0.0 * y),
            v=lambda t, x, y: 0.0 * x,
        ),
        T=T,
        name="zero",
    )


def get(name, T=1.0):
    table = {"1": test1, "test1": test1, "2": test2, "test2": test2, "zero": zero}
    try:
        return table[str(name)](T)
    except KeyError:
        raise ValueError(f"unknown built-in problem {name!r}") from None
