"""Loss-landscape probes around trained minima.

Everything here treats the loss as a black box over flat parameter vectors:
a 2-D section through three minima, linear interpolation paths, a normalized
box-constrained sharpness score, and finite-difference curvature estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ParamVector, RngStream, gram_schmidt_pair, least_squares_apply


@dataclass
class LandscapePlane:
    """Affine plane w1 + a*d1 + b*d2 with orthonormal (d1, d2).

    Anchor coordinates place the three defining points exactly: w1 at (0, 0),
    w2 at (||w2-w1||, 0), w3 at its two projections.
    """

    origin: ParamVector
    d1: np.ndarray
    d2: np.ndarray
    anchor_coords: np.ndarray  # shape (3, 2)

    def point(self, a: float, b: float) -> ParamVector:
        return ParamVector(self.origin.values + a * self.d1 + b * self.d2, self.origin.layout)


def build_plane(w1: ParamVector, w2: ParamVector, w3: ParamVector) -> LandscapePlane:
    u = w2.values - w1.values
    v = w3.values - w1.values
    d1, d2 = gram_schmidt_pair(u, v)
    coords = np.array(
        [
            [0.0, 0.0],
            [float(np.linalg.norm(u)), 0.0],
            [float(np.dot(v, d1)), float(np.dot(v, d2))],
        ]
    )
    return LandscapePlane(w1.copy(), d1, d2, coords)


@dataclass
class ContourGrid:
    a_values: np.ndarray
    b_values: np.ndarray
    losses: np.ndarray  # shape (len(a_values), len(b_values))
    anchor_coords: np.ndarray

    def rows(self):
        """(a, b, loss) triples in row-major order, for delimited output."""
        for i, a in enumerate(self.a_values):
            for j, b in enumerate(self.b_values):
                yield float(a), float(b), float(self.losses[i, j])


def contour_grid(plane: LandscapePlane, loss_at, resolution: int = 25, margin: float = 0.2) -> ContourGrid:
    """Evaluate the loss on a regular grid over the anchors' bounding box,
    expanded by ``margin`` (fraction of each side) in every direction.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    lo = plane.anchor_coords.min(axis=0)
    hi = plane.anchor_coords.max(axis=0)
    span = hi - lo
    a_values = np.linspace(lo[0] - margin * span[0], hi[0] + margin * span[0], resolution)
    b_values = np.linspace(lo[1] - margin * span[1], hi[1] + margin * span[1], resolution)
    losses = np.empty((resolution, resolution))
    for i, a in enumerate(a_values):
        for j, b in enumerate(b_values):
            losses[i, j] = loss_at(plane.point(float(a), float(b)))
    return ContourGrid(a_values, b_values, losses, plane.anchor_coords.copy())


def interpolate(wa: ParamVector, wb: ParamVector, steps: int, loss_at) -> list[tuple[float, float]]:
    """Loss along (1-alpha) wa + alpha wb at ``steps`` evenly spaced alphas in [0, 1]."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    if wa.layout != wb.layout:
        raise ValueError("endpoints have different layouts")
    out = []
    for alpha in np.linspace(0.0, 1.0, steps):
        w = ParamVector((1.0 - alpha) * wa.values + alpha * wb.values, wa.layout)
        out.append((float(alpha), float(loss_at(w))))
    return out


@dataclass(frozen=True)
class SharpnessConfig:
    """Box-constrained sharpness settings. ``p`` = 0 probes the full parameter
    space; p > 0 probes a random p-dimensional subspace."""

    epsilon: float
    p: int = 0
    max_iters: int = 10
    seed: int = 0
    backtracks: int = 30

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.p < 0:
            raise ValueError("p must be >= 0 (0 selects the full space)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class SharpnessResult:
    phi: float
    base_loss: float
    argmax_z: np.ndarray
    epsilon: float
    p: int
    rank_deficient: bool


def sharpness(loss_and_grad_at, x: ParamVector, cfg: SharpnessConfig) -> SharpnessResult:
    """Largest relative loss rise reachable inside a data-scaled box.

    The box allows |z_i| <= epsilon * (|(A^+ x)_i| + 1) in subspace coordinates;
    the score is 100 * (max f - f(x)) / (1 + f(x)). Maximization runs projected
    gradient ascent from z = 0 with a backtracking line search; starting at an
    exact stationary point would stall on a zero gradient, so that one case gets
    a tiny seeded interior nudge. Non-finite trial losses reject the step.
    """
    rng = RngStream(cfg.seed, "sharpness")
    n = x.size
    if cfg.p == 0:
        A = None
        p_dim = n
        coords = x.values
        rank_deficient = False
    else:
        A = rng.derive("A").uniform(-1.0, 1.0, size=(n, cfg.p))
        A /= np.linalg.norm(A, axis=1, keepdims=True)
        p_dim = cfg.p
        coords, rank_deficient = least_squares_apply(A, x.values)
    bounds = cfg.epsilon * (np.abs(coords) + 1.0)

    def point(z: np.ndarray) -> ParamVector:
        shift = z if A is None else A @ z
        return ParamVector(x.values + shift, x.layout)

    base_loss, _ = loss_and_grad_at(x)
    if not np.isfinite(base_loss):
        raise ValueError("loss at the probe point is non-finite")
    if base_loss <= -1.0:
        raise ValueError("sharpness needs base loss > -1 (normalization)")

    z = np.zeros(p_dim)
    best_f = base_loss
    best_z = z.copy()
    f_z = base_loss
    nudge_rng = rng.derive("nudge")
    for _ in range(cfg.max_iters):
        _, grad_w = loss_and_grad_at(point(z))
        g = grad_w.values if A is None else A.T @ grad_w.values
        gmax = np.max(np.abs(g))
        if gmax == 0.0:
            if np.all(z == 0.0):
                z = nudge_rng.uniform(-1.0, 1.0, size=p_dim) * bounds * 1e-3
                continue
            break
        nonzero = np.abs(g) > 0
        alpha = float(np.max((bounds[nonzero] + np.abs(z[nonzero])) / np.abs(g[nonzero])))
        improved = False
        for _ in range(cfg.backtracks):
            cand = np.clip(z + alpha * g, -bounds, bounds)
            f_cand = loss_and_grad_at(point(cand))[0]
            if np.isfinite(f_cand) and f_cand > f_z:
                z = cand
                f_z = float(f_cand)
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        if f_z > best_f:
            best_f = f_z
            best_z = z.copy()
    phi = 100.0 * max(best_f - base_loss, 0.0) / (1.0 + base_loss)
    return SharpnessResult(float(phi), float(base_loss), best_z, cfg.epsilon, cfg.p, rank_deficient)


def hessian_vector_product(grad_at, x: ParamVector, v: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference H v; exact for quadratics since their gradient is linear."""
    v = np.asarray(v, dtype=np.float64)
    if np.all(v == 0.0):
        raise ValueError("direction must be non-zero")
    if h <= 0:
        raise ValueError("step size must be positive")
    step = ParamVector(x.values + h * v, x.layout)
    back = ParamVector(x.values - h * v, x.layout)
    return (grad_at(step).values - grad_at(back).values) / (2.0 * h)


@dataclass
class CurvatureEstimate:
    lambda_max: float
    iterations_used: int
    residual: float
    converged: bool


def max_eigenvalue(hvp, dim: int, iters: int = 100, tol: float = 1e-6, rng: RngStream | None = None) -> CurvatureEstimate:
    """Dominant Hessian eigenvalue by power iteration with a Rayleigh quotient.

    ``hvp`` maps a direction to H @ direction. Convergence means the residual
    ||Hv - lambda v|| fell below tol * max(1, |lambda|); otherwise the estimate
    is returned flagged as unconverged.
    """
    if dim < 1 or iters < 1:
        raise ValueError("need dim >= 1 and iters >= 1")
    rng = rng if rng is not None else RngStream(0, "power")
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = np.inf
    for k in range(1, iters + 1):
        hv = np.asarray(hvp(v), dtype=np.float64)
        lam = float(np.dot(v, hv))
        residual = float(np.linalg.norm(hv - lam * v))
        if residual <= tol * max(1.0, abs(lam)):
            return CurvatureEstimate(lam, k, residual, True)
        norm_hv = np.linalg.norm(hv)
        if norm_hv == 0.0:
            # v is annihilated; for the zero operator this is exact
            return CurvatureEstimate(0.0, k, 0.0, True)
        v = hv / norm_hv
    return CurvatureEstimate(lam, iters, residual, False)


@dataclass
class BoundReport:
    """How a parameter move relates to the quadratic model of the first loss."""

    lhs: float
    quadratic_term: float
    bound: float
    lambda_max: float
    quadratic_within_bound: bool
    abs_gap: float


def verify_forgetting_bound(
    loss_at,
    w1: ParamVector,
    w2: ParamVector,
    hvp,
    lambda_max: float | None = None,
    power_iters: int = 200,
    power_tol: float = 1e-8,
    seed: int = 0,
    tol: float = 1e-9,
) -> BoundReport:
    """Compare L(w2) - L(w1) against its second-order model and the spectral cap.

    The increase of a (locally quadratic) loss after moving by dw is
    0.5 * dw^T H dw, which can never exceed 0.5 * lambda_max * ||dw||^2. The
    dw^T H dw term costs a single Hessian-vector product. ``lambda_max`` may be
    supplied; otherwise power iteration estimates it.
    """
    if w1.layout != w2.layout:
        raise ValueError("endpoints have different layouts")
    dw = w2.values - w1.values
    lhs = float(loss_at(w2) - loss_at(w1))
    if np.all(dw == 0.0):
        quad = 0.0
    else:
        quad = 0.5 * float(np.dot(dw, hvp(dw)))
    if lambda_max is None:
        est = max_eigenvalue(hvp, dim=dw.size, iters=power_iters, tol=power_tol, rng=RngStream(seed, "power"))
        lambda_max = est.lambda_max
    bound = 0.5 * float(lambda_max) * float(np.dot(dw, dw))
    return BoundReport(
        lhs=lhs,
        quadratic_term=float(quad),
        bound=float(bound),
        lambda_max=float(lambda_max),
        quadratic_within_bound=bool(quad <= bound + tol),
        abs_gap=abs(lhs - quad),
    )
