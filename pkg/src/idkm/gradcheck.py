"""Self-checking harness for the gradient backends.

Generates seeded clustering instances, solves them tightly, and compares
every derivative route against an independent reference: the implicit
gradient against the unrolled sweep, both against central finite
differences of the converged solve, the analytic update Jacobians against
finite differences of a single update, and the averaged-iteration inverse
against a dense LU solve. The CLI's gradcheck command and the test suite
both run through this module so they cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericsError
from .gradients import (
    GradBackend,
    implicit_dC_dW,
    jacobians_of_F,
    jfb_dC_dW,
    neumann_inverse,
    unrolled_dC_dW,
)
from .pq import Codebook, WeightMatrix, partition_weights
from .solver import (
    InitStrategy,
    fixed_point_map_F,
    init_codebook,
    solve_fixed_point,
)

FORWARD_EPS = 1e-10
FORWARD_MAX_ITERS = 5000

TOL_ORACLE = 1e-4
TOL_FD_SOLVE = 1e-3
TOL_FD_BLOCKS = 1e-5
TOL_NEUMANN = 1e-6


@dataclass(frozen=True)
class GradInstance:
    """One clustering problem plus its tightly converged solution."""

    seed: int
    w: WeightMatrix
    c0: Codebook
    c_star: Codebook
    k: int
    tau: float


def rel_err(candidate: np.ndarray, reference: np.ndarray) -> float:
    denom = max(float(np.linalg.norm(reference)), 1e-30)
    return float(np.linalg.norm(candidate - reference)) / denom


def make_instance(seed: int) -> GradInstance:
    """Seeded random instance with tau tied to the data's own scale.

    m is drawn from [8, 64], k from {2, 4, 8}, d from {1, 2}; tau is 5% of
    the median pairwise sub-vector distance so the attention is neither
    one-hot nor uniform. Seeds whose forward solve stalls before reaching
    the tight tolerance are skipped deterministically (the derivative
    comparisons are only meaningful at a converged point).
    """
    attempt = seed
    while True:
        rng = np.random.default_rng(attempt)
        m = int(rng.integers(8, 65))
        k = int(rng.choice([2, 4, 8]))
        d = int(rng.choice([1, 2]))
        flat = rng.normal(size=m * d)
        w = partition_weights(flat, d)
        cols = w.data.T
        gaps = np.linalg.norm(cols[:, None, :] - cols[None, :, :], axis=2)
        tau = 0.05 * float(np.median(gaps[np.triu_indices(m, k=1)]))
        c0 = init_codebook(w, k, InitStrategy(seed=attempt))
        result = solve_fixed_point(
            w, c0, tau, FORWARD_EPS, FORWARD_MAX_ITERS
        )
        if result.converged:
            return GradInstance(
                seed=attempt, w=w, c0=c0, c_star=result.codebook, k=k, tau=tau
            )
        attempt += 10_000


def check_oracle_equivalence(inst: GradInstance, backend: GradBackend,
                             inject_identity_m: bool = False) -> float:
    """Implicit gradient vs the unrolled sweep, as relative L2 error.

    inject_identity_m deliberately replaces the adjoint inverse with the
    identity (i.e. runs jfb in implicit's place) so the harness can prove
    it detects a broken implicit path.
    """
    reference = unrolled_dC_dW(
        inst.w, inst.c0, inst.tau, FORWARD_EPS, FORWARD_MAX_ITERS
    )
    if inject_identity_m:
        candidate = jfb_dC_dW(inst.w, inst.c_star, inst.tau)
    else:
        candidate = implicit_dC_dW(inst.w, inst.c_star, inst.tau, backend)
    return rel_err(candidate, reference)


def fd_solve_jacobian(inst: GradInstance, h_scale: float = 1e-5) -> np.ndarray:
    """Central differences of the converged solve, column by column.

    Each perturbed solve warm-starts from the unperturbed solution so every
    column tracks the same fixed-point branch.
    """
    wd = inst.w.data
    d, m = wd.shape
    k = inst.c_star.k
    jac = np.empty((k * d, d * m))
    for p in range(d):
        for i in range(m):
            h = h_scale * (1.0 + abs(wd[p, i]))
            shifted = {}
            for sign in (1.0, -1.0):
                bumped = wd.copy()
                bumped[p, i] += sign * h
                w2 = WeightMatrix(data=bumped, n=inst.w.n,
                                  pad_count=inst.w.pad_count)
                res = solve_fixed_point(
                    w2, inst.c_star, inst.tau, 1e-12, FORWARD_MAX_ITERS
                )
                if not res.converged:
                    raise NumericsError(
                        f"perturbed solve stalled at entry ({p}, {i})"
                    )
                shifted[sign] = res.codebook.data.ravel()
            jac[:, p * m + i] = (shifted[1.0] - shifted[-1.0]) / (2 * h)
    return jac


def check_fd_solve(inst: GradInstance, backend: GradBackend) -> float:
    candidate = implicit_dC_dW(inst.w, inst.c_star, inst.tau, backend)
    return rel_err(candidate, fd_solve_jacobian(inst))


def fd_update_blocks(inst: GradInstance, h_scale: float = 1e-6):
    """Finite differences of a single update in both arguments."""
    wd = inst.w.data
    cd = inst.c_star.data
    d, m = wd.shape
    k = cd.shape[0]

    j_c = np.empty((k * d, k * d))
    for j in range(k):
        for p in range(d):
            h = h_scale * (1.0 + abs(cd[j, p]))
            outs = {}
            for sign in (1.0, -1.0):
                bumped = cd.copy()
                bumped[j, p] += sign * h
                outs[sign] = fixed_point_map_F(
                    inst.w, Codebook(bumped), inst.tau
                ).data.ravel()
            j_c[:, j * d + p] = (outs[1.0] - outs[-1.0]) / (2 * h)

    j_w = np.empty((k * d, d * m))
    for p in range(d):
        for i in range(m):
            h = h_scale * (1.0 + abs(wd[p, i]))
            outs = {}
            for sign in (1.0, -1.0):
                bumped = wd.copy()
                bumped[p, i] += sign * h
                w2 = WeightMatrix(data=bumped, n=inst.w.n,
                                  pad_count=inst.w.pad_count)
                outs[sign] = fixed_point_map_F(
                    w2, inst.c_star, inst.tau
                ).data.ravel()
            j_w[:, p * m + i] = (outs[1.0] - outs[-1.0]) / (2 * h)
    return j_c, j_w


def check_update_blocks(inst: GradInstance) -> tuple[float, float]:
    jac = jacobians_of_F(inst.w, inst.c_star, inst.tau)
    fd_c, fd_w = fd_update_blocks(inst)
    return rel_err(jac.j_c, fd_c), rel_err(jac.j_w, fd_w)


def check_neumann(seed: int, count: int = 10) -> float:
    """Averaged-iteration inverse vs a dense solve on random matrices.

    Matrices are scaled to 2-norm 0.9 (hence spectral radius <= 0.9); one
    extra case carries an eigenvalue at -1.5 and starts at alpha0 = 1 so the
    divergence detector must kick in and recover by halving alpha.
    """
    rng = np.random.default_rng(seed)
    backend = GradBackend(max_adjoint_iters=4000)
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(4, 13))
        mat = rng.normal(size=(n, n))
        mat *= 0.9 / np.linalg.norm(mat, ord=2)
        direct = np.linalg.solve(np.eye(n) - mat, np.eye(n))
        worst = max(worst, rel_err(neumann_inverse(mat, backend), direct))

    spiky = np.diag([-1.5, 0.3, 0.2])
    restart_backend = GradBackend(alpha0=1.0, max_adjoint_iters=4000)
    direct = np.linalg.solve(np.eye(3) - spiky, np.eye(3))
    worst = max(worst, rel_err(neumann_inverse(spiky, restart_backend), direct))
    return worst


@dataclass
class SuiteReport:
    """Worst-case relative errors across the whole run."""

    oracle_err: float = 0.0
    fd_solve_err: float = 0.0
    fd_jc_err: float = 0.0
    fd_jw_err: float = 0.0
    jfb_self_err: float = 0.0
    neumann_err: float = 0.0
    instances: int = 0

    @property
    def passed(self) -> bool:
        return (
            self.oracle_err <= TOL_ORACLE
            and self.fd_solve_err <= TOL_FD_SOLVE
            and self.fd_jc_err <= TOL_FD_BLOCKS
            and self.fd_jw_err <= TOL_FD_BLOCKS
            and self.jfb_self_err == 0.0
            and self.neumann_err <= TOL_NEUMANN
        )

    def lines(self) -> list[str]:
        def verdict(value, tol):
            return "ok" if value <= tol else f"FAIL (tol {tol:g})"

        return [
            f"instances checked        : {self.instances}",
            f"implicit vs unrolled     : {self.oracle_err:.3e}  "
            f"{verdict(self.oracle_err, TOL_ORACLE)}",
            f"implicit vs finite diff  : {self.fd_solve_err:.3e}  "
            f"{verdict(self.fd_solve_err, TOL_FD_SOLVE)}",
            f"update dF/dC vs FD       : {self.fd_jc_err:.3e}  "
            f"{verdict(self.fd_jc_err, TOL_FD_BLOCKS)}",
            f"update dF/dW vs FD       : {self.fd_jw_err:.3e}  "
            f"{verdict(self.fd_jw_err, TOL_FD_BLOCKS)}",
            f"jfb vs dF/dW block       : {self.jfb_self_err:.3e}  "
            f"{verdict(self.jfb_self_err, 0.0)}",
            f"averaged inverse vs LU   : {self.neumann_err:.3e}  "
            f"{verdict(self.neumann_err, TOL_NEUMANN)}",
        ]


def run_suite(
    instances: int = 20,
    base_seed: int = 0,
    inject_identity_m: bool = False,
    with_fd: bool = True,
) -> SuiteReport:
    """Run every check; with_fd=False skips the slow finite-difference half."""
    backend = GradBackend(max_adjoint_iters=4000)
    report = SuiteReport(instances=instances)
    for index in range(instances):
        inst = make_instance(base_seed + index)
        report.oracle_err = max(
            report.oracle_err,
            check_oracle_equivalence(inst, backend, inject_identity_m),
        )
        jfb = jfb_dC_dW(inst.w, inst.c_star, inst.tau)
        block = jacobians_of_F(inst.w, inst.c_star, inst.tau).j_w
        report.jfb_self_err = max(report.jfb_self_err, rel_err(jfb, block))
        if with_fd:
            report.fd_solve_err = max(
                report.fd_solve_err, check_fd_solve(inst, backend)
            )
            err_c, err_w = check_update_blocks(inst)
            report.fd_jc_err = max(report.fd_jc_err, err_c)
            report.fd_jw_err = max(report.fd_jw_err, err_w)
    report.neumann_err = check_neumann(base_seed + 777)
    return report
