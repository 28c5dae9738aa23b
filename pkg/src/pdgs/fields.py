"""Named analytic coefficient/boundary/source fields for case configs.

Configs refer to fields by name with parameters instead of embedding an
expression language; every factory returns a vectorized callable over an
(n, 2) coordinate array.
"""

import numpy as np


def _constant(value=0.0):
    value = float(value)

    def f(x):
        return np.full(len(x), value)

    return f


def _peak_exact(**_):
    def f(x):
        rho2 = (x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2
        return np.exp(-1000.0 * rho2)

    return f


def _peak_source(**_):
    # s = -lap(u) for the exact peak solution above
    def f(x):
        rho2 = (x[:, 0] - 0.5) ** 2 + (x[:, 1] - 0.5) ** 2
        u = np.exp(-1000.0 * rho2)
        return -u * (4.0e6 * rho2 - 4000.0)

    return f


def _oscillating_source(alpha1=1.0, alpha2=4.0):
    # s = -f for lap(u) - u = f with the prescribed oscillating f
    a1, a2 = float(alpha1), float(alpha2)
    coef = (a1**2 + a2**2 + 1.0) * np.pi**2

    def f(x):
        return coef * np.sin(a1 * np.pi * x[:, 0]) * np.sin(a2 * np.pi * x[:, 1])

    return f


def _sin_kx(k=10.0):
    k = float(k)

    def f(x):
        return np.sin(k * x[:, 0])

    return f


def _quadratic(**_):
    def f(x):
        return x[:, 0] ** 2 + x[:, 1] ** 2

    return f


REGISTRY = {
    "constant": _constant,
    "zero": lambda: _constant(0.0),
    "case2_peak_exact": _peak_exact,
    "case2_peak_source": _peak_source,
    "case3_oscillating_source": _oscillating_source,
    "sin_kx": _sin_kx,
    "quadratic": _quadratic,
}


def resolve(spec):
    """Turn a config field spec into a constant or callable.

    Accepts a number, or {"kind": name, ...params}.
    """
    if isinstance(spec, (int, float)):
        return float(spec)
    if isinstance(spec, dict):
        kind = spec.get("kind")
        if kind == "constant":
            return float(spec.get("value", 0.0))
        if kind not in REGISTRY:
            raise ValueError(f"unknown field kind {kind!r}")
        params = {k: v for k, v in spec.items() if k != "kind"}
        return REGISTRY[kind](**params)
    raise ValueError(f"bad field spec {spec!r}")
