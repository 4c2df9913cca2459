"""Robust Levenberg-Marquardt over (roll, pitch, tx, ty).

The objective is ``sum_i w_i * rho(r_i**2)`` with the Huber ``rho``. Each
outer iteration asks a correspondence provider for pairs built under the
current estimate, then runs damped Gauss-Newton on those fixed pairs.

Rotation steps are right perturbations ``R_LM · Exp(delta)`` restricted to the
roll and pitch generators; after each step (roll, pitch) are re-extracted in
the ZYX convention and yaw is reset to its fixed value.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .correspondences import Correspondence, CorrespondenceSet, residuals
from .errors import DegenerateGeometryError, ValidationError
from .geometry import ExtrinsicParams, MotorTrajectory, PARAMETER_NAMES, rot_z, rot_z_stack, skew

__all__ = [
    "CorrespondenceProvider",
    "CostRecord",
    "SolveResult",
    "SolverConfig",
    "huber_cost",
    "huber_rho",
    "huber_weight",
    "jacobian_rotation",
    "jacobian_rows",
    "jacobian_translation",
    "jacobian_yaw",
    "solve",
]

logger = logging.getLogger(__name__)

JACOBIAN_FORMS = ("full", "simplified")
TIME_OFFSET_STEP = 1e-6
_CHUNK = 2048
_MAX_LAMBDA = 1e16
_STEP_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SolverConfig:
    huber_delta: float = 0.05
    max_inner_iterations: int = 50
    max_outer_iterations: int = 5
    relative_cost_tolerance: float = 1e-6
    outer_rotation_tolerance: float = 1e-6
    outer_translation_tolerance: float = 1e-5
    lm_initial_lambda: float = 1e-4
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 0.5
    rank_tolerance: float = 1e-10
    jacobian_form: str = "full"
    time_offset: float = 0.0
    estimate_time_offset: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.huber_delta > 0:
            raise ValidationError("huber_delta must be positive (use inf to disable)")
        for name in (
            "relative_cost_tolerance",
            "outer_rotation_tolerance",
            "outer_translation_tolerance",
            "lm_initial_lambda",
            "rank_tolerance",
        ):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.max_inner_iterations < 1 or self.max_outer_iterations < 1:
            raise ValidationError("iteration caps must be >= 1")
        if not (self.lm_lambda_up > 1.0 and 0.0 < self.lm_lambda_down < 1.0):
            raise ValidationError("need lm_lambda_up > 1 and 0 < lm_lambda_down < 1")
        if self.jacobian_form not in JACOBIAN_FORMS:
            raise ValidationError(f"jacobian_form must be one of {JACOBIAN_FORMS}")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")

    @property
    def n_params(self) -> int:
        return 5 if self.estimate_time_offset else 4

    @property
    def param_names(self) -> Tuple[str, ...]:
        return PARAMETER_NAMES + (("time_offset",) if self.estimate_time_offset else ())


@dataclass(frozen=True)
class CostRecord:
    outer: int
    inner: int
    cost: float
    lam: float


@dataclass
class SolveResult:
    ext: ExtrinsicParams
    final_cost: float
    converged: bool
    cost_trace: List[CostRecord] = field(default_factory=list)
    param_trace: List[Dict[str, float]] = field(default_factory=list)
    residual_stats: Dict[str, float] = field(default_factory=dict)
    condition: Dict[str, object] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    time_offset: float = 0.0
    outer_iterations: int = 0
    inner_iterations: int = 0
    residual_evaluations: int = 0
    n_correspondences: int = 0
    n_primitives: int = 0
    mode: str = "limo"

    def to_dict(self) -> Dict[str, object]:
        return {
            "mode": self.mode,
            "converged": self.converged,
            "extrinsics": self.ext.to_dict(),
            "time_offset": self.time_offset,
            "final_cost": self.final_cost,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "residual_evaluations": self.residual_evaluations,
            "correspondences": self.n_correspondences,
            "primitives": self.n_primitives,
            "residual_stats": dict(self.residual_stats),
            "condition": dict(self.condition),
            "timings": dict(self.timings),
            "param_trace": [dict(p) for p in self.param_trace],
        }


class CorrespondenceProvider(Protocol):
    """Rebuilds correspondences under an extrinsic estimate (one call per outer iteration)."""

    def build(self, ext: ExtrinsicParams, time_offset: float) -> CorrespondenceSet:
        ...


class _FixedProvider:
    def __init__(self, cset: CorrespondenceSet):
        self.cset = cset

    def build(self, ext: ExtrinsicParams, time_offset: float) -> CorrespondenceSet:
        return self.cset


# ---------------------------------------------------------------------------
# Huber loss


def huber_rho(s: np.ndarray, delta: float) -> np.ndarray:
    """rho(s) = s for s <= delta², 2 delta sqrt(s) - delta² otherwise (s = r²)."""
    s = np.asarray(s, dtype=float)
    if math.isinf(delta):
        return s.copy()
    d2 = delta * delta
    return np.where(s <= d2, s, 2.0 * delta * np.sqrt(s) - d2)


def huber_weight(s: np.ndarray, delta: float) -> np.ndarray:
    """rho'(s): 1 inside the quadratic zone, delta/|r| outside."""
    s = np.asarray(s, dtype=float)
    if math.isinf(delta):
        return np.ones_like(s)
    with np.errstate(divide="ignore"):
        return np.where(s <= delta * delta, 1.0, delta / np.sqrt(s))


def huber_cost(r: np.ndarray, weights: np.ndarray, delta: float) -> float:
    return float(np.sum(np.asarray(weights) * huber_rho(np.square(r), delta)))


# ---------------------------------------------------------------------------
# Jacobians


def _rz_pair(
    c: Correspondence, traj: Optional[MotorTrajectory] = None, time_offset: float = 0.0
) -> Tuple[np.ndarray, np.ndarray]:
    if traj is None:
        return rot_z(c.theta_n), rot_z(c.theta_m)
    return (
        rot_z(float(traj.angle_at(c.t_n + time_offset))),
        rot_z(float(traj.angle_at(c.t_m + time_offset))),
    )


def jacobian_translation(
    c: Correspondence, traj: Optional[MotorTrajectory] = None, *, time_offset: float = 0.0
) -> np.ndarray:
    """∂r/∂r_LM = nᵀ[R_MB(t_m) - R_MB(t_n)] (full 3-vector, z component is 0).

    Motor angles come from ``traj`` when given, else from the stored angles.
    """
    R_n, R_m = _rz_pair(c, traj, time_offset)
    return np.asarray(c.normal) @ (R_m - R_n)


def _rotation_generators(roll: float) -> np.ndarray:
    """Columns map (d_roll, d_pitch) to the right-perturbation vector of Rz·Ry·Rx."""
    return np.array([[1.0, 0.0], [0.0, math.cos(roll)], [0.0, -math.sin(roll)]])


def jacobian_rotation(
    c: Correspondence,
    ext: ExtrinsicParams,
    traj: Optional[MotorTrajectory] = None,
    *,
    form: str = "full",
    time_offset: float = 0.0,
) -> np.ndarray:
    """∂r/∂delta for R_LM·Exp(delta), 3-vector.

    ``full``: nᵀ[-R_m R_LM [p_m]x + R_n R_LM [p_n]x]
    ``simplified``: the same without R_LM (exact only when R_LM = I)

    The (roll, pitch) columns are ``J @ [e_x, Rx(roll)ᵀ e_y]``.
    """
    R_n, R_m = _rz_pair(c, traj, time_offset)
    n = np.asarray(c.normal)
    R = ext.rotation if form == "full" else np.eye(3)
    return n @ (-R_m @ R @ skew(c.point_m) + R_n @ R @ skew(c.point_n))


def jacobian_yaw(c: Correspondence, ext: ExtrinsicParams) -> float:
    """Column of a yaw perturbation R_LM <- Rz(d)·R_LM (unobservable, diagnostics only)."""
    R_n, R_m = _rz_pair(c)
    ez = skew([0.0, 0.0, 1.0])
    R = ext.rotation
    return float(np.asarray(c.normal) @ (R_m @ ez @ R @ c.point_m - R_n @ ez @ R @ c.point_n))


def jacobian_rows(
    cset: CorrespondenceSet,
    ext: ExtrinsicParams,
    *,
    form: str = "full",
    theta_n: Optional[np.ndarray] = None,
    theta_m: Optional[np.ndarray] = None,
) -> np.ndarray:
    """(M, 4) Jacobian in (roll, pitch, tx, ty) order."""
    theta_n = cset.theta_n if theta_n is None else theta_n
    theta_m = cset.theta_m if theta_m is None else theta_m
    Rn, Rm = rot_z_stack(theta_n), rot_z_stack(theta_m)
    # nᵀ R_MB as row vectors
    a_n = np.einsum("ij,ijk->ik", cset.normals, Rn)
    a_m = np.einsum("ij,ijk->ik", cset.normals, Rm)
    J_t = a_m - a_n
    if form == "full":
        R = ext.rotation
        b_n, b_m = a_n @ R, a_m @ R
    else:
        b_n, b_m = a_n, a_m
    # bᵀ[p]x = (b x p)ᵀ
    J_delta = -np.cross(b_m, cset.p_m) + np.cross(b_n, cset.p_n)
    J_rp = J_delta @ _rotation_generators(ext.roll)
    return np.column_stack([J_rp, J_t[:, 0], J_t[:, 1]])


def apply_update(ext: ExtrinsicParams, step: np.ndarray) -> ExtrinsicParams:
    d_roll, d_pitch, d_tx, d_ty = (float(v) for v in step[:4])
    delta = _rotation_generators(ext.roll) @ np.array([d_roll, d_pitch])
    rotation = ext.rotation @ Rotation.from_rotvec(delta).as_matrix()
    return ExtrinsicParams.from_rotation(
        rotation, ext.tx + d_tx, ext.ty + d_ty, ext.yaw_fixed, ext.tz_fixed
    )


# ---------------------------------------------------------------------------
# Assembly


@dataclass
class _System:
    H: np.ndarray
    g: np.ndarray
    cost: float
    r: np.ndarray


class _Problem:
    """Residuals and normal equations for one fixed correspondence set."""

    def __init__(self, cset: CorrespondenceSet, config: SolverConfig):
        self.cset = cset
        self.config = config
        self.evaluations = 0
        self.chunks = [(lo, min(lo + _CHUNK, len(cset))) for lo in range(0, len(cset), _CHUNK)]

    def _angles(self, tau: float, cset: CorrespondenceSet) -> Tuple[np.ndarray, np.ndarray]:
        if self.config.estimate_time_offset or tau != 0.0:
            return cset.angles(tau)
        return cset.theta_n, cset.theta_m

    def residuals(self, ext: ExtrinsicParams, tau: float, cset: Optional[CorrespondenceSet] = None) -> np.ndarray:
        cset = self.cset if cset is None else cset
        theta_n, theta_m = self._angles(tau, cset)
        self.evaluations += len(cset)
        return residuals(cset, ext, theta_n, theta_m)

    def cost(self, ext: ExtrinsicParams, tau: float) -> Tuple[float, np.ndarray]:
        r = self.residuals(ext, tau)
        return huber_cost(r, self.cset.weights, self.config.huber_delta), r

    def _chunk_system(self, ext: ExtrinsicParams, tau: float, lo: int, hi: int):
        part = _slice(self.cset, lo, hi)
        theta_n, theta_m = self._angles(tau, part)
        r = residuals(part, ext, theta_n, theta_m)
        J = jacobian_rows(part, ext, form=self.config.jacobian_form, theta_n=theta_n, theta_m=theta_m)
        evaluations = len(part)
        if self.config.estimate_time_offset:
            h = TIME_OFFSET_STEP
            r_plus = residuals(part, ext, *part.angles(tau + h))
            r_minus = residuals(part, ext, *part.angles(tau - h))
            J = np.column_stack([J, (r_plus - r_minus) / (2.0 * h)])
            evaluations += 2 * len(part)
        s = np.square(r)
        w = part.weights * huber_weight(s, self.config.huber_delta)
        cost = float(np.sum(part.weights * huber_rho(s, self.config.huber_delta)))
        Jw = J * w[:, None]
        return Jw.T @ J, Jw.T @ r, cost, r, evaluations

    def system(self, ext: ExtrinsicParams, tau: float) -> _System:
        workers = self.config.workers
        if workers > 1 and len(self.chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda b: self._chunk_system(ext, tau, *b), self.chunks))
        else:
            parts = [self._chunk_system(ext, tau, lo, hi) for lo, hi in self.chunks]
        n = self.config.n_params
        H, g, cost = np.zeros((n, n)), np.zeros(n), 0.0
        # fixed chunk order keeps the sums bit-identical for any worker count
        for H_c, g_c, cost_c, _, evals in parts:
            H += H_c
            g += g_c
            cost += cost_c
            self.evaluations += evals
        r = np.concatenate([p[3] for p in parts]) if parts else np.empty(0)
        return _System(H=H, g=g, cost=cost, r=r)


def _slice(cset: CorrespondenceSet, lo: int, hi: int) -> CorrespondenceSet:
    return CorrespondenceSet(
        normals=cset.normals[lo:hi],
        p_n=cset.p_n[lo:hi],
        t_n=cset.t_n[lo:hi],
        theta_n=cset.theta_n[lo:hi],
        p_m=cset.p_m[lo:hi],
        t_m=cset.t_m[lo:hi],
        theta_m=cset.theta_m[lo:hi],
        weights=cset.weights[lo:hi],
        trajectory=cset.trajectory,
    )


def _conditioning(H: np.ndarray, names: Tuple[str, ...], tolerance: float) -> Dict[str, object]:
    """Eigenvalues of JᵀWJ; ``degenerate`` is set with the null direction when it is rank deficient."""
    eigvals, eigvecs = np.linalg.eigh(H)
    largest = float(eigvals[-1])
    smallest = float(eigvals[0])
    info: Dict[str, object] = {
        "eigenvalues": [float(v) for v in eigvals],
        "condition_number": largest / smallest if smallest > 0.0 else math.inf,
        "degenerate": False,
    }
    if largest <= 0.0 or smallest <= tolerance * largest:
        null = eigvecs[:, 0]
        null = null * (1.0 if null[np.argmax(np.abs(null))] >= 0 else -1.0)
        info["degenerate"] = True
        info["condition_number"] = math.inf
        info["null_direction"] = {name: float(v) for name, v in zip(names, null)}
    return info


def _check_rank(H: np.ndarray, names: Tuple[str, ...], tolerance: float) -> Dict[str, object]:
    info = _conditioning(H, names, tolerance)
    if info["degenerate"]:
        logger.warning("JᵀWJ is rank deficient; eigenvalues %s", info["eigenvalues"])
        raise DegenerateGeometryError(
            "correspondence geometry does not constrain all parameters",
            null_direction=info["null_direction"],
            eigenvalues=info["eigenvalues"],
        )
    return info


def _residual_stats(r: np.ndarray, delta: float) -> Dict[str, float]:
    if r.size == 0:
        return {"rms": 0.0, "median_abs": 0.0, "inlier_fraction": 0.0, "count": 0}
    a = np.abs(r)
    return {
        "rms": float(np.sqrt(np.mean(r * r))),
        "median_abs": float(np.median(a)),
        "inlier_fraction": float(np.mean(a <= delta)),
        "count": int(r.size),
    }


# ---------------------------------------------------------------------------
# Solver


def _inner_lm(
    problem: _Problem,
    ext: ExtrinsicParams,
    tau: float,
    outer: int,
    trace: List[CostRecord],
) -> Tuple[ExtrinsicParams, float, int, Dict[str, object]]:
    config = problem.config
    system = problem.system(ext, tau)
    condition = _check_rank(system.H, config.param_names, config.rank_tolerance)
    cost = system.cost
    lam = config.lm_initial_lambda
    trace.append(CostRecord(outer, 0, cost, lam))
    iterations = 0

    while iterations < config.max_inner_iterations and cost > 0.0:
        iterations += 1
        H = system.H
        damped = H + lam * np.diag(np.diag(H))
        try:
            step = np.linalg.solve(damped, -system.g)
        except np.linalg.LinAlgError:
            lam *= config.lm_lambda_up
            continue
        if float(np.max(np.abs(step))) < _STEP_TOLERANCE:
            break
        # reduction predicted by the damped quadratic model
        predicted = float(step @ (lam * np.diag(H) * step - system.g))
        if predicted <= config.relative_cost_tolerance * cost:
            logger.debug("outer %d inner %d: predicted reduction %.3e below tolerance", outer, iterations, predicted)
            break
        try:
            candidate = apply_update(ext, step)
        except ValidationError:
            candidate = None
        new_tau = tau + float(step[4]) if config.estimate_time_offset else tau
        new_cost = problem.cost(candidate, new_tau)[0] if candidate is not None else math.inf

        if new_cost < cost:
            relative = (cost - new_cost) / cost
            ext, tau, cost = candidate, new_tau, new_cost
            lam = max(lam * config.lm_lambda_down, 1e-12)
            trace.append(CostRecord(outer, iterations, cost, lam))
            logger.debug("outer %d inner %d: accepted, cost %.6e lambda %.1e", outer, iterations, cost, lam)
            if relative < config.relative_cost_tolerance:
                break
            system = problem.system(ext, tau)
        else:
            lam *= config.lm_lambda_up
            logger.debug("outer %d inner %d: rejected (%.6e >= %.6e), lambda %.1e", outer, iterations, new_cost, cost, lam)
            if lam > _MAX_LAMBDA:
                break

    condition = _conditioning(problem.system(ext, tau).H, config.param_names, config.rank_tolerance)
    if condition["degenerate"]:
        logger.warning("JᵀWJ at the final estimate is rank deficient; null direction %s", condition["null_direction"])
    return ext, tau, iterations, condition


def solve(
    provider: Union[CorrespondenceProvider, CorrespondenceSet],
    ext_init: ExtrinsicParams,
    config: Optional[SolverConfig] = None,
    *,
    mode: str = "limo",
) -> SolveResult:
    """Outer re-association loop around an inner robust LM solve."""
    config = config or SolverConfig()
    if isinstance(provider, CorrespondenceSet):
        provider = _FixedProvider(provider)

    ext, tau = ext_init, config.time_offset
    trace: List[CostRecord] = []
    params: List[Dict[str, float]] = []
    converged = False
    inner_total = 0
    evaluations = 0
    solve_time = 0.0
    condition: Dict[str, object] = {}
    problem: Optional[_Problem] = None
    cset: Optional[CorrespondenceSet] = None
    outer = 0

    for outer in range(1, config.max_outer_iterations + 1):
        cset = provider.build(ext, tau)
        if len(cset) < 4:
            raise DegenerateGeometryError(
                f"{len(cset)} correspondences cannot constrain 4 parameters"
            )
        if config.estimate_time_offset and cset.trajectory is None:
            raise ValidationError("time-offset estimation needs correspondences with a trajectory")

        start = time.perf_counter()
        problem = _Problem(cset, config)
        new_ext, new_tau, inner, condition = _inner_lm(problem, ext, tau, outer, trace)
        solve_time += time.perf_counter() - start
        inner_total += inner
        evaluations += problem.evaluations

        d_rot = max(abs(new_ext.roll - ext.roll), abs(new_ext.pitch - ext.pitch))
        d_trans = max(abs(new_ext.tx - ext.tx), abs(new_ext.ty - ext.ty))
        ext, tau = new_ext, new_tau
        cost = trace[-1].cost
        params.append(
            {"outer": outer, **{k: getattr(ext, k) for k in PARAMETER_NAMES},
             "time_offset": tau, "cost": cost, "correspondences": len(cset)}
        )
        logger.info(
            "outer %d: roll %.6f pitch %.6f tx %.6f ty %.6f cost %.6e (d_rot %.2e, d_trans %.2e)",
            outer, ext.roll, ext.pitch, ext.tx, ext.ty, cost, d_rot, d_trans,
        )
        if cost == 0.0 or (
            d_rot < config.outer_rotation_tolerance and d_trans < config.outer_translation_tolerance
        ):
            converged = True
            break

    assert problem is not None and cset is not None
    final_r = problem.residuals(ext, tau)
    evaluations += len(final_r)
    if not converged:
        logger.warning("not converged after %d outer iterations", config.max_outer_iterations)

    provider_timings = getattr(provider, "timings", {})
    timings = {k: float(v) for k, v in provider_timings.items()}
    timings["solve"] = solve_time
    return SolveResult(
        ext=ext,
        final_cost=huber_cost(final_r, cset.weights, config.huber_delta),
        converged=converged,
        cost_trace=trace,
        param_trace=params,
        residual_stats=_residual_stats(final_r, config.huber_delta),
        condition=condition,
        timings=timings,
        time_offset=tau,
        outer_iterations=outer,
        inner_iterations=inner_total,
        residual_evaluations=evaluations,
        n_correspondences=len(cset),
        n_primitives=int(getattr(provider, "last_primitive_count", 0)),
        mode=mode,
    )
