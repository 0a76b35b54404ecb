"""Activation function, closed-form safety filter, and activation zones.

The filter solves, in closed form, the pointwise QP

    min ||u - k_nom||^2   s.t.  v(y).u >= -gamma h(y),

whose solution is k_nom + ReLU(-a)/||v||^2 v with a = v.k_nom + gamma h.
The time-varying variant shifts a by a scaled dh/dt term; the constraint
stays affine in u with coefficient v, so the same closed form applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from .errors import GridMismatch, VanishingGuidance
from .grid import fill_band, sample_gradient, sample_scalar, sample_vector


@dataclass
class FilterConfig:
    gamma: float = 1.0      # class-K slope, 1/s
    eps: float = 0.1        # transition amplitude for the dh/dt scaling
    eta_v: float = 1e-6     # ||v|| floor before we refuse to divide

    def __post_init__(self):
        if self.gamma <= 0 or self.eps <= 0 or self.eta_v <= 0:
            raise ValueError("gamma, eps, eta_v must all be positive")

    def sigma(self, s):
        # smooth transition: sigma(0)=0, monotone, -> eps
        return self.eps * -np.expm1(-np.maximum(s, 0.0))


class SafetyFunction:
    """Scalar field h with its cached lattice gradient."""

    def __init__(self, h):
        self.h = h
        self.grid = h.grid
        self.grad = h.gradient()

    def value(self, y):
        return sample_scalar(self.h, y)

    def grad_at(self, y):
        return sample_gradient(self.h, y)


class GuidanceFieldBundle:
    """Vector field v plus the flux-carrying boundary it was solved from."""

    def __init__(self, v, boundary=None):
        self.v = v
        self.grid = v.grid
        self.boundary = boundary if boundary is not None else getattr(
            v, "boundary", None)

    def value(self, y):
        return sample_vector(self.v, y)


def activation(y, k_nom_value, sf, gf, cfg):
    """a(y) = v(y).k_nom + gamma h(y)."""
    v = gf.value(y)
    k = np.asarray(k_nom_value, dtype=float)
    vk = float(v[0] * k[0] + v[1] * k[1])
    return vk + cfg.gamma * sf.value(y)


def filter_control(y, k_nom_value, sf, gf, cfg):
    """Closed-form filtered input; k_nom untouched when a >= 0."""
    v = gf.value(y)
    k = np.array(k_nom_value, dtype=float)
    vk = float(v[0] * k[0] + v[1] * k[1])
    a = vk + cfg.gamma * sf.value(y)
    if a >= 0.0:
        return k
    nv2 = float(v[0] * v[0] + v[1] * v[1])
    if nv2 < cfg.eta_v * cfg.eta_v:
        raise VanishingGuidance(
            f"a={a:.3e} < 0 with ||v||={math.sqrt(nv2):.3e} at {tuple(y)}")
    return k + (-a / nv2) * v


def _dyn_terms(y, sf_t, dh_dt, gf, cfg):
    v = gf.value(y)
    h = sf_t.value(y)
    g = sf_t.grad_at(y)
    gn = math.hypot(g[0], g[1])
    denom = gn + float(cfg.sigma(h))
    nv = math.hypot(v[0], v[1])
    coeff = nv / denom if denom > 0.0 else 0.0
    tv = coeff * sample_scalar(dh_dt, y)
    return v, h, tv


def activation_dynamic(y, t, k_nom_value, sf_t, dh_dt, gf, cfg):
    """a(y,t) = v.k_nom + (||v||/(||Dh||+sigma(h))) dh/dt + gamma h.

    With dh/dt identically zero this reproduces activation() bit for bit.
    """
    v, h, tv = _dyn_terms(y, sf_t, dh_dt, gf, cfg)
    k = np.asarray(k_nom_value, dtype=float)
    vk = float(v[0] * k[0] + v[1] * k[1])
    return (vk + tv) + cfg.gamma * h


def filter_control_dynamic(y, t, k_nom_value, sf_t, dh_dt, gf, cfg):
    v, h, tv = _dyn_terms(y, sf_t, dh_dt, gf, cfg)
    k = np.array(k_nom_value, dtype=float)
    vk = float(v[0] * k[0] + v[1] * k[1])
    a = (vk + tv) + cfg.gamma * h
    if a >= 0.0:
        return k
    nv2 = float(v[0] * v[0] + v[1] * v[1])
    if nv2 < cfg.eta_v * cfg.eta_v:
        raise VanishingGuidance(
            f"a={a:.3e} < 0 with ||v||={math.sqrt(nv2):.3e} at {tuple(y)}")
    return k + (-a / nv2) * v


def eval_controller(k_nom, pts):
    """Evaluates a point controller at an (n,2) block of points.

    Tries one vectorized call first; falls back to a python loop for
    controllers that only understand single points.
    """
    pts = np.asarray(pts, dtype=float)
    try:
        out = np.asarray(k_nom(pts), dtype=float)
        if out.shape == pts.shape:
            return out
    except Exception:
        pass
    out = np.empty_like(pts)
    for i in range(pts.shape[0]):
        out[i] = np.asarray(k_nom(pts[i]), dtype=float)
    return out


# marching squares: corner bit set means a > 0
# edges: 0 bottom, 1 right, 2 top, 3 left
_MS_TABLE = {
    0: [], 15: [],
    1: [(3, 0)], 14: [(3, 0)],
    2: [(0, 1)], 13: [(0, 1)],
    4: [(1, 2)], 11: [(1, 2)],
    8: [(2, 3)], 7: [(2, 3)],
    3: [(3, 1)], 12: [(3, 1)],
    6: [(0, 2)], 9: [(0, 2)],
}


def _edge_point(edge, i, j, a00, a10, a11, a01, cx, cy):
    if edge == 0:
        p, q = a00, a10
        x0, y0, dx, dy = cx[i], cy[j], cx[i + 1] - cx[i], 0.0
    elif edge == 1:
        p, q = a10, a11
        x0, y0, dx, dy = cx[i + 1], cy[j], 0.0, cy[j + 1] - cy[j]
    elif edge == 2:
        p, q = a01, a11
        x0, y0, dx, dy = cx[i], cy[j + 1], cx[i + 1] - cx[i], 0.0
    else:
        p, q = a00, a01
        x0, y0, dx, dy = cx[i], cy[j], 0.0, cy[j + 1] - cy[j]
    den = p - q
    t = 0.5 if den == 0.0 else p / den
    t = min(1.0, max(0.0, t))
    return (x0 + t * dx, y0 + t * dy)


def _chain_segments(segments):
    """Joins raw segments into polylines by shared endpoints."""
    def key(p):
        return (round(p[0], 9), round(p[1], 9))

    adj = {}
    for s, (p, q) in enumerate(segments):
        adj.setdefault(key(p), []).append(s)
        adj.setdefault(key(q), []).append(s)
    used = [False] * len(segments)
    lines = []
    for s0 in range(len(segments)):
        if used[s0]:
            continue
        used[s0] = True
        path = [segments[s0][0], segments[s0][1]]
        # grow forward then backward
        for flip in (False, True):
            if flip:
                path.reverse()
            while True:
                k = key(path[-1])
                nxt = [s for s in adj.get(k, []) if not used[s]]
                if not nxt:
                    break
                s = nxt[0]
                used[s] = True
                p, q = segments[s]
                path.append(q if key(p) == k else p)
        lines.append(np.array(path))
    return lines


@dataclass
class ActivationZone:
    """Sign of the activation function over the lattice plus its contour."""
    grid: object
    a: object                      # ScalarField of a over free cells
    active: np.ndarray             # free cells with a <= 0
    active_restricted: np.ndarray  # additionally v.k_nom <= 0
    polylines: list = field(default_factory=list)

    @property
    def cell_count(self):
        return int(self.active.sum())

    @property
    def cell_count_restricted(self):
        return int(self.active_restricted.sum())

    @property
    def area(self):
        return self.cell_count * self.grid.d ** 2

    def write_sign_csv(self, path):
        sign = np.zeros(self.grid.state.shape, dtype=int)
        sign[self.grid.free] = 1
        sign[self.active] = -1
        np.savetxt(path, sign.T[::-1], fmt="%d", delimiter=",")

    def write_polylines(self, path):
        with open(path, "w") as fh:
            for li, line in enumerate(self.polylines):
                for x, y in line:
                    fh.write(f"{li},{x:.9g},{y:.9g}\n")


def activation_zone(grid, k_nom, sf, gf, cfg, dh_dt=None):
    """Evaluates a on every free cell center and traces its zero contour.

    k_nom is a controller over points.  With dh_dt given, uses the
    time-varying activation instead; the arithmetic mirrors the pointwise
    ops so lattice and sampled values agree where it matters.
    """
    if not grid.same_geometry(sf.grid):
        raise GridMismatch("safety function solved on a different lattice")
    free = grid.free
    pts = grid.free_centers()
    ks = eval_controller(k_nom, pts)
    kx = np.zeros(grid.state.shape)
    ky = np.zeros(grid.state.shape)
    kx[free] = ks[:, 0]
    ky[free] = ks[:, 1]

    h = sf.h.values
    vx = gf.v.x.values
    vy = gf.v.y.values
    vk = vx * kx + vy * ky
    if dh_dt is None:
        a = vk + cfg.gamma * h
    else:
        if not grid.same_geometry(dh_dt.grid):
            raise GridMismatch("dh/dt field lives on a different lattice")
        gn = np.hypot(sf.grad.x.values, sf.grad.y.values)
        denom = gn + cfg.sigma(h)
        nv = np.hypot(vx, vy)
        coeff = np.where(denom > 0.0, nv / np.where(denom > 0.0, denom, 1.0),
                         0.0)
        a = (vk + coeff * dh_dt.values) + cfg.gamma * h

    a_free = np.where(free, a, np.nan)
    active = free & (a_free <= 0.0)
    restricted = active & (vk <= 0.0)

    # contour only across squares whose four cells are all free
    segments = []
    cx = grid.centers_x()
    cy = grid.centers_y()
    sq = free[:-1, :-1] & free[1:, :-1] & free[1:, 1:] & free[:-1, 1:]
    pos = a_free > 0.0
    case = (pos[:-1, :-1].astype(int) + 2 * pos[1:, :-1] + 4 * pos[1:, 1:]
            + 8 * pos[:-1, 1:])
    ii, jj = np.nonzero(sq & (case != 0) & (case != 15))
    for i, j in zip(ii, jj):
        a00, a10 = a_free[i, j], a_free[i + 1, j]
        a11, a01 = a_free[i + 1, j + 1], a_free[i, j + 1]
        c = int(case[i, j])
        if c in (5, 10):
            mid = 0.25 * (a00 + a10 + a11 + a01)
            if c == 5:
                pairs = [(0, 1), (2, 3)] if mid > 0 else [(0, 3), (1, 2)]
            else:
                pairs = [(0, 3), (1, 2)] if mid > 0 else [(0, 1), (2, 3)]
        else:
            pairs = _MS_TABLE[c]
        for e0, e1 in pairs:
            p = _edge_point(e0, i, j, a00, a10, a11, a01, cx, cy)
            q = _edge_point(e1, i, j, a00, a10, a11, a01, cx, cy)
            segments.append((p, q))

    afield = gridmod.ScalarField(grid, fill_band(grid, np.where(free, a, 0.0),
                                                 band_value=0.0))
    return ActivationZone(grid, afield, active, restricted,
                          _chain_segments(segments))
