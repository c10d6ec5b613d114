"""Gradient backends for differentiating the clustering solve.

Three ways to obtain the derivative of the converged codebook with respect
to the weights being clustered:

* ``unrolled``: chain rule through every recorded iteration of the solve.
  Exact for the computed iterate, but must retain the whole trace, so its
  memory and time grow linearly with the iteration count.
* ``implicit``: differentiate the fixed-point condition C* = F(C*, W) at the
  solution only. The inverse (I - dF/dC*)^-1 is obtained by an averaged
  fixed-point iteration with alpha-halving restarts on divergence.
* ``jfb``: zeroth-order truncation of the Neumann series for that inverse,
  i.e. the inverse is replaced by the identity and the backward pass costs a
  single Jacobian evaluation.

Flattening conventions: a k x d codebook flattens row-major to length k*d
(codeword j, coordinate p maps to j*d + p); a d x m weight matrix flattens
row-major to length d*m (coordinate p, sub-vector i maps to p*m + i). All
Jacobians in this module are laid out over those flattenings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import AdjointDivergence, NumericsError, ParamError, ShapeError
from .pq import Codebook, DistanceMatrix, WeightMatrix, attention
from .solver import DEGENERATE_FLOOR, solve_fixed_point

BACKEND_KINDS = ("unrolled", "implicit", "jfb")

DIVERGENCE_CAP = 1e8
DIVERGENCE_GROWTH_STEPS = 10


@dataclass(frozen=True)
class GradBackend:
    """Backend choice plus the averaged-iteration controls.

    alpha0 is the initial averaging weight; each detected divergence restarts
    the iteration from the identity with alpha halved, at most max_restarts
    times before raising AdjointDivergence.
    """

    kind: str = "implicit"
    alpha0: float = 0.25
    max_adjoint_iters: int = 500
    max_restarts: int = 5
    adjoint_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ParamError(f"unknown gradient backend {self.kind!r}")
        if not 0 < self.alpha0 <= 1:
            raise ParamError(f"alpha0 must be in (0, 1], got {self.alpha0}")
        if self.max_restarts < 0:
            raise ParamError("max_restarts must be >= 0")
        if self.max_adjoint_iters < 1:
            raise ParamError("max_adjoint_iters must be >= 1")
        if self.adjoint_eps <= 0:
            raise ParamError("adjoint_eps must be positive")


@dataclass(frozen=True)
class ClusterJacobians:
    """Both partial derivatives of the center-update map at one point.

    j_c: (k*d) x (k*d) derivative with respect to the flattened codebook.
    j_w: (k*d) x (d*m) derivative with respect to the flattened weights.
    """

    j_c: np.ndarray
    j_w: np.ndarray


def jacobians_of_F(w: WeightMatrix, c_star: Codebook, tau: float) -> ClusterJacobians:
    """Analytic Jacobians of one center update, evaluated at (c_star, w).

    Valid at any point, not only fixed points; the unrolled sweep evaluates
    these along the whole trace. Both blocks account for the attention's
    dependence on distances, with coincident point/center pairs contributing
    zero direction (the norm is not differentiable there).
    """
    if w.d != c_star.d:
        raise ShapeError(f"sub-vector dim {w.d} != codeword dim {c_star.d}")
    if tau <= 0:
        raise ParamError(f"tau must be positive, got {tau}")
    wd = w.data
    cd = c_star.data
    d, m = wd.shape
    k = cd.shape[0]

    diff = cd[None, :, :] - wd.T[:, None, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    a = attention(DistanceMatrix(dist), tau).data
    s = np.maximum(a.sum(axis=0), DEGENERATE_FLOOR)
    f_out = (a.T @ wd.T) / s[:, None]

    with np.errstate(divide="ignore", invalid="ignore"):
        g_dir = np.where(dist[:, :, None] > 0, diff / dist[:, :, None], 0.0)
    r_dev = wd.T[:, None, :] - f_out[None, :, :]
    h_mix = np.einsum("il,ilq->iq", a, g_dir)

    inv_ts = 1.0 / (tau * s)
    t2 = np.einsum("ij,ijp,il,ilq->jplq", a, r_dev, a, g_dir)
    t1 = np.einsum("ij,ijq,ijp->jpq", a, g_dir, r_dev)
    jc4 = t2 * inv_ts[:, None, None, None]
    idx = np.arange(k)
    jc4[idx, :, idx, :] -= t1 * inv_ts[:, None, None]

    gh = g_dir - h_mix[:, None, :]
    jw4 = np.einsum("ij,ijp,ijq->jpqi", a, r_dev, gh) * inv_ts[:, None, None, None]
    pidx = np.arange(d)
    jw4[:, pidx, pidx, :] += (a.T / s[:, None])[:, None, :]

    j_c = jc4.reshape(k * d, k * d)
    j_w = jw4.reshape(k * d, d * m)
    if not (np.all(np.isfinite(j_c)) and np.all(np.isfinite(j_w))):
        raise NumericsError("center-update Jacobians contain non-finite values")
    return ClusterJacobians(j_c=j_c, j_w=j_w)


def _averaged_solve(
    apply_map: Callable[[np.ndarray], np.ndarray],
    start: np.ndarray,
    backend: GradBackend,
    label: str,
) -> np.ndarray:
    """Averaged fixed-point iteration x <- alpha*g(x) + (1-alpha)*x.

    Divergence (ten consecutive residual increases, a residual above the cap,
    or non-finite values) restarts from `start` with alpha halved. Returns an
    iterate whose residual ||g(x) - x|| is below backend.adjoint_eps.
    """
    alpha = backend.alpha0
    attempts = backend.max_restarts + 1
    for attempt in range(attempts):
        x = start.copy()
        prev_res = np.inf
        growth = 0
        diverged = False
        for _ in range(backend.max_adjoint_iters):
            mapped = apply_map(x)
            res = float(np.linalg.norm(mapped - x))
            if not np.isfinite(res) or res > DIVERGENCE_CAP:
                diverged = True
                break
            if res < backend.adjoint_eps:
                return x
            growth = growth + 1 if res > prev_res else 0
            if growth >= DIVERGENCE_GROWTH_STEPS:
                diverged = True
                break
            x = alpha * mapped + (1.0 - alpha) * x
            prev_res = res
        if not diverged:
            raise AdjointDivergence(
                f"{label}: residual still above {backend.adjoint_eps:g} after "
                f"{backend.max_adjoint_iters} iterations at alpha={alpha:g}"
            )
        alpha *= 0.5
    raise AdjointDivergence(
        f"{label}: diverged on all {attempts} attempts (final alpha={alpha * 2:g})"
    )


def neumann_inverse(j_c: np.ndarray, backend: GradBackend) -> np.ndarray:
    """Solve M = j_c M + I by averaged iteration, yielding (I - j_c)^-1."""
    j_c = np.asarray(j_c, dtype=np.float64)
    if j_c.ndim != 2 or j_c.shape[0] != j_c.shape[1]:
        raise ShapeError(f"j_c must be square, got {j_c.shape}")
    eye = np.eye(j_c.shape[0])
    return _averaged_solve(lambda m: j_c @ m + eye, eye, backend, "adjoint inverse")


def implicit_dC_dW(
    w: WeightMatrix, c_star: Codebook, tau: float, backend: GradBackend
) -> np.ndarray:
    """Derivative of the fixed point with respect to the weights.

    Computed from the solution alone as (I - dF/dC*)^-1 dF/dW, so nothing
    from the forward solve needs to be retained.
    """
    jac = jacobians_of_F(w, c_star, tau)
    m_star = neumann_inverse(jac.j_c, backend)
    return m_star @ jac.j_w


def jfb_dC_dW(w: WeightMatrix, c_star: Codebook, tau: float) -> np.ndarray:
    """Jacobian-free approximation: the weight block of one update alone."""
    return jacobians_of_F(w, c_star, tau).j_w


def unrolled_dC_dW(
    w: WeightMatrix,
    c0: Codebook,
    tau: float,
    eps: float,
    max_iters: int,
) -> np.ndarray:
    """Exact derivative of the final iterate by a reverse sweep of the trace.

    Runs the forward solve with trace recording, then accumulates the chain
    rule backwards through every recorded update. The initial codebook is
    treated as a constant.
    """
    result = solve_fixed_point(w, c0, tau, eps, max_iters, record_trace=True)
    k_d = c0.k * c0.d
    total = np.zeros((k_d, w.d * w.m))
    carry = np.eye(k_d)
    for step_input in reversed(result.trace):
        jac = jacobians_of_F(w, step_input, tau)
        total += carry @ jac.j_w
        carry = carry @ jac.j_c
    return total


def vjp_dC_dW(
    upstream: np.ndarray,
    w: WeightMatrix,
    c_star: Codebook,
    tau: float,
    backend: GradBackend,
) -> np.ndarray:
    """Row-contracted form: upstream @ dC*/dW without materializing M*.

    Solves v = upstream + v j_c by the same averaged iteration (or takes
    v = upstream for the jfb backend) and returns v @ j_w. The unrolled
    backend needs the forward trace and is served by vjp_through_trace.
    """
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    if upstream.size != c_star.k * c_star.d:
        raise ShapeError(
            f"upstream length {upstream.size} != k*d = {c_star.k * c_star.d}"
        )
    if backend.kind == "unrolled":
        raise ParamError("unrolled VJPs require the forward trace; "
                         "use vjp_through_trace")
    jac = jacobians_of_F(w, c_star, tau)
    if backend.kind == "jfb":
        return upstream @ jac.j_w
    v = _averaged_solve(
        lambda x: upstream + x @ jac.j_c, upstream, backend, "adjoint VJP"
    )
    return v @ jac.j_w


def vjp_through_trace(
    upstream: np.ndarray,
    w: WeightMatrix,
    trace: tuple[Codebook, ...],
    tau: float,
) -> np.ndarray:
    """Reverse sweep of the recorded solve, contracted with one upstream row."""
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    total = np.zeros(w.d * w.m)
    v = upstream
    for step_input in reversed(trace):
        jac = jacobians_of_F(w, step_input, tau)
        total += v @ jac.j_w
        v = v @ jac.j_c
    return total
