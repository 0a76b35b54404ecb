"""Relative-degree-2 extension: smooth safe velocity, shrunken barrier,
acceleration filter.

The velocity-level controller k_v replaces the ReLU correction with the
smooth gap lambda = (-a + sqrt(a^2 + sigma_s^2))/2, which keeps
v.k_v + gamma h strictly positive and is C-infinity, so its Jacobian (needed
by the acceleration constraint) exists.  The barrier over (y, ydot) is
h_B = h - ||ydot - k_v||^2 / (2 mu) and the filter enforces
d/dt h_B >= -gamma h_B by direct differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCoefficient, OutOfDomain, VanishingGuidance


@dataclass
class ExtendedState:
    y: np.ndarray
    ydot: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.ydot = np.asarray(self.ydot, dtype=float)
        if not (np.isfinite(self.y).all() and np.isfinite(self.ydot).all()):
            raise ValueError("extended state must be finite")


@dataclass
class BackstepConfig:
    mu: float = 1.0          # shrink rate of the velocity penalty
    gamma: float = 1.0
    sigma_s: float = 0.1     # smooth-formula sharpness
    eta_c: float = 1e-8      # coefficient floor in the accel constraint
    eta_v: float = 1e-6
    k_nom_v: object = None   # velocity-level nominal controller over points

    def __post_init__(self):
        if min(self.mu, self.gamma, self.sigma_s, self.eta_c,
               self.eta_v) <= 0:
            raise ValueError("backstep parameters must all be positive")

    def nominal(self, y):
        if self.k_nom_v is None:
            raise ValueError("BackstepConfig.k_nom_v is unset")
        return np.asarray(self.k_nom_v(np.asarray(y, dtype=float)),
                          dtype=float)


def smooth_margin(a, sigma_s):
    """(a + sqrt(a^2 + sigma_s^2)) / 2 evaluated without cancellation.

    This is the value of v.k_v + gamma h after the smooth correction; it is
    positive for every finite a.
    """
    r = math.hypot(a, sigma_s)
    if a >= 0.0:
        return 0.5 * (a + r)
    return sigma_s * sigma_s / (2.0 * (r - a))


def k_v_smooth(y, k_nom_value, sf, gf, cfg):
    """Velocity controller k_nom + lambda/||v||^2 v, smooth in y."""
    v = gf.value(y)
    k = np.array(k_nom_value, dtype=float)
    nv2 = float(v[0] * v[0] + v[1] * v[1])
    if nv2 < cfg.eta_v * cfg.eta_v:
        raise VanishingGuidance(
            f"||v||={math.sqrt(nv2):.3e} below eta_v at {tuple(np.asarray(y))}")
    a = float(v[0] * k[0] + v[1] * k[1]) + cfg.gamma * sf.value(y)
    lam = 0.5 * (-a + math.hypot(a, cfg.sigma_s))
    return k + (lam / nv2) * v


def _k_v_at(y, sf, gf, cfg):
    return k_v_smooth(y, cfg.nominal(y), sf, gf, cfg)


def h_B(state, sf, gf, cfg):
    """Shrunken barrier h - ||ydot - k_v||^2 / (2 mu); never above h."""
    e = state.ydot - _k_v_at(state.y, sf, gf, cfg)
    return sf.value(state.y) - float(e @ e) / (2.0 * cfg.mu)


def k_v_jacobian(y, sf, gf, cfg):
    """Finite-difference Jacobian of k_v, central step d/2 per axis.

    Falls back to one-sided differences when a probe point leaves the
    sampleable region.
    """
    y = np.asarray(y, dtype=float)
    step = 0.5 * sf.grid.d
    cols = []
    for axis in range(2):
        off = np.zeros(2)
        off[axis] = step
        hi = lo = None
        try:
            hi = _k_v_at(y + off, sf, gf, cfg)
        except OutOfDomain:
            pass
        try:
            lo = _k_v_at(y - off, sf, gf, cfg)
        except OutOfDomain:
            pass
        if hi is not None and lo is not None:
            cols.append((hi - lo) / (2.0 * step))
        elif hi is not None:
            cols.append((hi - _k_v_at(y, sf, gf, cfg)) / step)
        elif lo is not None:
            cols.append((_k_v_at(y, sf, gf, cfg) - lo) / step)
        else:
            raise OutOfDomain(f"no valid probes around {tuple(y)}")
    return np.column_stack(cols)


def hdot_B(state, w, sf, gf, cfg):
    """d/dt h_B under acceleration w, by direct differentiation:

        Dh.ydot - (1/mu)(ydot - k_v).(w - J_kv ydot)
    """
    e = state.ydot - _k_v_at(state.y, sf, gf, cfg)
    Dh = sf.grad_at(state.y)
    J = k_v_jacobian(state.y, sf, gf, cfg)
    return float(Dh @ state.ydot) - float(e @ (np.asarray(w, dtype=float)
                                               - J @ state.ydot)) / cfg.mu


def filter_accel(state, w_nom, sf, gf, cfg):
    """Minimal correction of w_nom enforcing hdot_B >= -gamma h_B.

    The constraint is affine in w with coefficient c = -(ydot - k_v)/mu, so
    the correction is the usual ReLU step along c.  A vanishing coefficient
    with the constraint already satisfied is fine (on the boundary of the
    shrunken set ydot = k_v); vanishing with a violated constraint means the
    state left the shrunken set or the gradients are off, and is an error.
    """
    w_nom = np.array(w_nom, dtype=float)
    kv = _k_v_at(state.y, sf, gf, cfg)
    e = state.ydot - kv
    Dh = sf.grad_at(state.y)
    J = k_v_jacobian(state.y, sf, gf, cfg)
    hb = sf.value(state.y) - float(e @ e) / (2.0 * cfg.mu)
    hdot = float(Dh @ state.ydot) - float(e @ (w_nom - J @ state.ydot)) \
        / cfg.mu
    resid = hdot + cfg.gamma * hb
    if resid >= 0.0:
        return w_nom
    c = -e / cfg.mu
    nc2 = float(c @ c)
    if nc2 < cfg.eta_c * cfg.eta_c:
        if resid < -1e-9:
            raise DegenerateCoefficient(
                f"constraint residual {resid:.3e} with ||c||={math.sqrt(nc2):.3e}")
        return w_nom
    return w_nom + (-resid / nc2) * c
