"""Discrete calculus on the periodic lattice Z_L^d.

Vertex fields are arrays of shape ``(L,)*d``.  Vector fields have shape
``(d, L, ..., L)``; component ``i`` at ``x`` lives on the edge ``{x, x+e_i}``.

Sign conventions::

    (grad f)_i(x)  = f(x + e_i) - f(x)
    (div* g)(x)    = sum_i g_i(x) - g_i(x - e_i)
    laplacian f    = div*(grad f)          (negative semidefinite)

so that ``<grad f, g> = -<f, div* g>``.  The elliptic operator
``-div*(A grad u) (+ u/T)`` returned by :func:`apply_operator` is positive
semidefinite.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, GeometryError

__all__ = [
    "forward_gradient",
    "backward_divergence",
    "backward_partial",
    "laplacian",
    "edge_average",
    "edge_average_field",
    "apply_operator",
    "operator_matrix",
    "Ball",
    "ball",
    "ball_offsets",
    "ball_average",
    "ball_average_field",
    "vertex_component_average",
    "edge_ball_average_field",
    "averages_by_radius",
    "edge_averages_by_radius",
    "inhomogeneous_double_average",
    "periodic_distance",
]


def _dims(f: np.ndarray) -> tuple[int, int]:
    return f.ndim, f.shape[0]


def forward_gradient(f: np.ndarray) -> np.ndarray:
    """Forward differences ``f(x+e_i) - f(x)`` for every direction, periodic."""
    f = np.asarray(f, dtype=float)
    return np.stack([np.roll(f, -1, axis=i) - f for i in range(f.ndim)])


def backward_partial(h: np.ndarray, i: int) -> np.ndarray:
    """Backward difference ``h(x) - h(x - e_i)`` of a vertex field."""
    return h - np.roll(h, 1, axis=i)


def backward_divergence(g: np.ndarray) -> np.ndarray:
    """``sum_i g_i(x) - g_i(x - e_i)``; minus the adjoint of :func:`forward_gradient`."""
    g = np.asarray(g, dtype=float)
    out = np.zeros(g.shape[1:])
    for i in range(g.shape[0]):
        out += backward_partial(g[i], i)
    return out


def laplacian(f: np.ndarray) -> np.ndarray:
    """Lattice Laplacian ``div*(grad f)``; e.g. ``d=1``: ``f(x+1) - 2f(x) + f(x-1)``."""
    return backward_divergence(forward_gradient(f))


def edge_average(f: np.ndarray, x, i: int) -> float:
    """Mean of ``f`` over the two endpoints of the edge ``{x, x+e_i}``."""
    f = np.asarray(f)
    L = f.shape[0]
    x = tuple(int(c) % L for c in x)
    y = list(x)
    y[i] = (y[i] + 1) % L
    return 0.5 * (f[x] + f[tuple(y)])


def edge_average_field(f: np.ndarray) -> np.ndarray:
    """Endpoint means ``f_e`` for all edges, as a vector field."""
    f = np.asarray(f, dtype=float)
    return np.stack([0.5 * (f + np.roll(f, -1, axis=i)) for i in range(f.ndim)])


def apply_operator(a: np.ndarray, u: np.ndarray, T: float | None = None) -> np.ndarray:
    """``-div*(A grad u) + u/T`` with edge-diagonal conductances ``a`` of shape (d, L..L)."""
    out = -backward_divergence(a * forward_gradient(u))
    if T is not None:
        out += u / T
    return out


def operator_matrix(a: np.ndarray, T: float | None = None) -> sp.csr_matrix:
    """Sparse matrix of :func:`apply_operator` in C-order vertex numbering."""
    d = a.shape[0]
    shape = a.shape[1:]
    n = a[0].size
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for i in range(d):
        nb = np.roll(idx, -1, axis=i).ravel()
        w = a[i].ravel()
        rows += [idx.ravel(), nb]
        cols += [nb, idx.ravel()]
        vals += [-w, -w]
        diag += w
        np.add.at(diag, nb, w)
    if T is not None:
        diag += 1.0 / T
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return m.tocsr()


def periodic_distance(shape: tuple[int, ...], x=None) -> np.ndarray:
    """Euclidean distance on the torus from ``x`` (default origin) to every vertex."""
    L = shape[0]
    grids = np.meshgrid(*[np.arange(L)] * len(shape), indexing="ij")
    sq = np.zeros(shape)
    x = (0,) * len(shape) if x is None else x
    for g, c in zip(grids, x):
        t = (g - int(c)) % L
        t = np.minimum(t, L - t)
        sq += t.astype(float) ** 2
    return np.sqrt(sq)


# --------------------------------------------------------------------------
# Balls
# --------------------------------------------------------------------------

def _check_radius(R: float, L: int) -> None:
    if not 2 * R < L:
        raise GeometryError(f"ball radius {R} self-wraps on a box of side {L} (need 2R < L)")


@functools.lru_cache(maxsize=256)
def ball_offsets(d: int, r2: int) -> np.ndarray:
    """Integer offsets z with ``|z|^2 <= r2``, shape (n, d)."""
    k = math.isqrt(r2)
    axes = np.arange(-k, k + 1)
    grid = np.stack(np.meshgrid(*[axes] * d, indexing="ij"), axis=-1).reshape(-1, d)
    return grid[(grid ** 2).sum(axis=1) <= r2]


def _r2(R: float) -> int:
    # |z|^2 is an integer, so |z| <= R  iff  |z|^2 <= floor(R^2)
    return int(math.floor(R * R + 1e-9)) if R >= 0 else -1


@dataclass(frozen=True)
class Ball:
    """Euclidean ball ``B_R(x)`` on the torus with its vertex and edge lists.

    ``vertices`` is an ``(n, d)`` array of wrapped coordinates; ``edges`` is an
    ``(m, d+1)`` array of rows ``(i, y...)`` for edges ``{y, y+e_i}`` with both
    endpoints in the ball.
    """

    center: tuple[int, ...]
    R: float
    L: int
    vertices: np.ndarray
    edges: np.ndarray

    @property
    def d(self) -> int:
        return len(self.center)

    def vertex_index(self):
        return tuple(self.vertices.T)

    def edge_index(self):
        return tuple(self.edges.T)


def ball(x, R: float, L: int) -> Ball:
    x = tuple(int(c) % L for c in x)
    d = len(x)
    _check_radius(R, L)
    off = ball_offsets(d, _r2(R))
    if len(off) == 0:
        raise GeometryError(f"ball of radius {R} is empty")
    inside = {tuple(z) for z in off.tolist()}
    edges = []
    for i in range(d):
        shifted = off.copy()
        shifted[:, i] += 1
        keep = np.array([tuple(z) in inside for z in shifted.tolist()], dtype=bool)
        e = off[keep]
        edges.append(np.column_stack([np.full(len(e), i), (e + np.array(x)) % L]))
    verts = (off + np.array(x)) % L
    edges = np.concatenate(edges) if edges else np.zeros((0, d + 1), dtype=int)
    return Ball(center=x, R=float(R), L=L, vertices=verts, edges=edges.astype(int))


def ball_average(f: np.ndarray, x, R: float) -> float | np.ndarray:
    """Exact mean of ``f`` over ``B_R(x)`` (vertex field) or its edge ball (vector field).

    A vertex field has shape ``(L,)*d``; a vector field (edge data) has shape
    ``(d, L, ..., L)`` and is averaged over the edges with both endpoints in the
    ball.  Use :func:`vertex_component_average` for vertex-ball means of each
    component of a vector field.
    """
    f = np.asarray(f, dtype=float)
    d = len(tuple(x))
    L = f.shape[-1]
    B = ball(x, R, L)
    if f.ndim == d:
        return float(f[B.vertex_index()].mean())
    if f.ndim == d + 1 and f.shape[0] == d:
        if len(B.edges) == 0:
            raise GeometryError(f"edge ball of radius {R} is empty")
        return float(f[B.edge_index()].mean())
    raise ConfigurationError(f"cannot average a field of shape {f.shape} over a {d}-dimensional ball")


def vertex_component_average(g: np.ndarray, x, R: float) -> np.ndarray:
    """Vertex-ball mean of each component of a vector field (``⨏_{B_R} grad f``)."""
    g = np.asarray(g, dtype=float)
    B = ball(x, R, g.shape[-1])
    return np.array([comp[B.vertex_index()].mean() for comp in g])


# FFT-based averages over every centre at once --------------------------------

@functools.lru_cache(maxsize=64)
def _ball_kernel_hat(L: int, d: int, r2: int, edge_dir: int | None):
    """Fourier transform of the (reflected) indicator kernel used for correlation."""
    off = ball_offsets(d, r2)
    if edge_dir is not None:
        inside = {tuple(z) for z in off.tolist()}
        sh = off.copy()
        sh[:, edge_dir] += 1
        keep = np.array([tuple(z) in inside for z in sh.tolist()], dtype=bool)
        off = off[keep]
    k = np.zeros((L,) * d)
    # correlation: out(x) = sum_z f(x+z) => convolve with kernel at -z
    k[tuple(((-off) % L).T)] = 1.0
    return np.fft.rfftn(k), len(off)


def _correlate(f: np.ndarray, khat: np.ndarray) -> np.ndarray:
    return np.fft.irfftn(np.fft.rfftn(f) * khat, s=f.shape, axes=tuple(range(f.ndim)))


def ball_average_field(f: np.ndarray, R: float) -> np.ndarray:
    """``⨏_{B_R(x)} f`` for every centre x (vertex field in, vertex field out)."""
    f = np.asarray(f, dtype=float)
    d, L = _dims(f)
    _check_radius(R, L)
    khat, n = _ball_kernel_hat(L, d, _r2(R), None)
    return _correlate(f, khat) / n


def edge_ball_count(L: int, d: int, R: float) -> int:
    return sum(_ball_kernel_hat(L, d, _r2(R), i)[1] for i in range(d))


def edge_ball_average_field(g: np.ndarray, R: float) -> np.ndarray:
    """``⨏_{𝓑_R(x)} g`` over the edge ball for every centre x; ``g`` has shape (d, L..L)."""
    g = np.asarray(g, dtype=float)
    d = g.shape[0]
    L = g.shape[1]
    _check_radius(R, L)
    total = np.zeros(g.shape[1:])
    count = 0
    for i in range(d):
        khat, n = _ball_kernel_hat(L, d, _r2(R), i)
        total += _correlate(g[i], khat)
        count += n
    if count == 0:
        raise GeometryError(f"edge ball of radius {R} is empty")
    return total / count


def inhomogeneous_double_average(F: np.ndarray, radii: np.ndarray, B: Ball) -> float:
    """Nested average ``⨏_{x in B} ⨏_{B_{r(x)}(x)} F`` with a radius per vertex.

    Inner averages are evaluated with one FFT pass per distinct integer
    ``floor(r^2)`` among the vertices of ``B``.
    """
    F = np.asarray(F, dtype=float)
    radii = np.asarray(radii, dtype=float)
    idx = B.vertex_index()
    r_in = radii[idx]
    if not np.all(np.isfinite(r_in)):
        raise ConfigurationError("radius field must be finite on the ball")
    L = F.shape[0]
    inner = np.empty(len(r_in))
    keys = np.array([_r2(r) for r in r_in])
    for key in np.unique(keys):
        R = math.sqrt(key)
        _check_radius(R, L)
        sel = keys == key
        avg = ball_average_field(F, R)
        inner[sel] = avg[tuple(v[sel] for v in idx)]
    return float(inner.mean())


def averages_by_radius(F: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """``⨏_{B_{r(x)}(x)} F`` at every vertex x for a per-vertex radius field."""
    F = np.asarray(F, dtype=float)
    radii = np.asarray(radii, dtype=float)
    keys = np.vectorize(_r2)(radii)
    out = np.empty_like(F)
    for key in np.unique(keys):
        sel = keys == key
        out[sel] = ball_average_field(F, math.sqrt(key))[sel]
    return out


def edge_averages_by_radius(g: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """``⨏_{𝓑_{r(x)}(x)} g`` at every vertex x for a per-vertex radius field."""
    g = np.asarray(g, dtype=float)
    radii = np.asarray(radii, dtype=float)
    keys = np.vectorize(_r2)(radii)
    out = np.empty(g.shape[1:])
    for key in np.unique(keys):
        sel = keys == key
        out[sel] = edge_ball_average_field(g, math.sqrt(key))[sel]
    return out
