"""High-gain sampled-data observer for triangular globally Lipschitz delay systems.

The plant is a chain of integrators perturbed by delay functionals f_i that
feed forward only (f_i sees the first i state histories).  The observer copies
the dynamics and injects the predictor innovation through a gain vector K
scaled by powers of a single parameter theta; theta is pushed up until a
small-gain constant Omega built from the Lyapunov matrix P drops below 1.
Because the delay enters Omega through exp(phi * r) while theta helps only
polynomially, feasibility is a window in theta, not a half-line.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .history import HistoryBuffer
from .observer import ObservedSystem, ReoSpec, run_sampled_observer

__all__ = [
    "TriangularSystem",
    "HighGainDesign",
    "ThetaSelection",
    "companion_pair",
    "place_K",
    "spectral_norm",
    "solve_lyapunov_P",
    "select_theta",
    "design_highgain",
    "triangular_observed_system",
    "highgain_reo",
    "run_highgain_observer",
    "example_triangular_system",
    "sat",
]


def companion_pair(n):
    """Shift matrix (ones on the superdiagonal) and first-basis output vector."""
    if n < 1:
        raise ValueError(f"order must be >= 1, got {n}")
    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i + 1] = 1.0
    c = np.zeros(n)
    c[0] = 1.0
    return A, c


def place_K(n, pole):
    """Output-injection gains putting all eigenvalues of A + K c^T at ``pole``.

    For the shift/first-basis pair the characteristic polynomial of A + K c^T
    is s^n - K_1 s^(n-1) - ... - K_n, so matching (s - pole)^n gives
    K_i = -binom(n, i) * (-pole)^i.
    """
    if pole >= 0:
        raise ValueError(f"pole must be negative, got {pole}")
    return np.asarray([-math.comb(n, i) * (-pole) ** i for i in range(1, n + 1)])


def spectral_norm(P, tol=1e-10, max_iter=100000):
    """Induced Euclidean norm of a symmetric matrix by power iteration."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    v = np.ones(n) / math.sqrt(n)
    lam = 0.0
    for _ in range(max_iter):
        w = P @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v_new = w / nw
        lam_new = abs(float(v_new @ (P @ v_new)))
        if abs(lam_new - lam) <= tol * max(1.0, lam_new):
            return lam_new
        lam, v = lam_new, v_new
    return lam


def solve_lyapunov_P(Acl, mu):
    """Solve P Acl + Acl^T P = -2 mu I for symmetric positive definite P.

    Dense Kronecker-sum formulation (the orders here are tiny); the result is
    symmetrized and its positive definiteness verified by Cholesky.
    """
    Acl = np.asarray(Acl, dtype=float)
    n = Acl.shape[0]
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    eig = np.linalg.eigvals(Acl)
    if eig.real.max() >= -1e-12:
        raise ValueError(f"matrix is not Hurwitz: max Re(eig) = {eig.real.max():.3g}")
    I = np.eye(n)
    # vec(P Acl + Acl^T P) = (Acl^T kron I + I kron Acl^T) vec(P)
    Kmat = np.kron(Acl.T, I) + np.kron(I, Acl.T)
    vecP = np.linalg.solve(Kmat, (-2.0 * mu * I).reshape(-1))
    P = vecP.reshape(n, n)
    P = 0.5 * (P + P.T)
    try:
        np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Lyapunov solution is not positive definite") from exc
    return P


@dataclass(frozen=True)
class ThetaSelection:
    """Outcome of the gain-parameter scan: chosen theta with its small-gain
    constant, and the feasible window the scan saw (grid endpoints)."""

    theta: float
    omega_sg: float
    feasible: bool
    window: Optional[tuple] = None


def _omega_sg(theta, norm_P, c1, mu, Ltilde, r, n):
    phi = theta * mu / (2.0 * norm_P)
    val = 3.0 * n**3 * norm_P**2 * Ltilde**2 * math.exp(min(phi * r, 700.0)) / (
        theta * mu * c1 * phi
    )
    return math.sqrt(val)


def select_theta(P, mu, Ltilde, r, n, search_max=1e6, ratio=1.05):
    """Scan theta over a geometric grid in [1, search_max] and return the
    feasible point minimizing the small-gain constant Omega.

    Omega is not monotone in theta (exp(phi r) grows while theta phi grows
    polynomially), so feasibility is a window; the scan reports its observed
    endpoints.  Ltilde = 0 means no delay coupling at all: theta = 1, Omega = 0.
    """
    if mu <= 0 or r <= 0 or n < 1 or search_max < 1:
        raise ValueError("need mu > 0, r > 0, n >= 1, search_max >= 1")
    if Ltilde < 0:
        raise ValueError(f"Ltilde must be nonnegative, got {Ltilde}")
    norm_P = spectral_norm(P)
    c1 = float(np.linalg.eigvalsh(np.asarray(P, dtype=float))[0])
    if Ltilde == 0.0:
        return ThetaSelection(theta=1.0, omega_sg=0.0, feasible=True, window=(1.0, math.inf))
    best = None
    lo = hi = None
    theta = 1.0
    while theta <= search_max * (1 + 1e-12):
        om = _omega_sg(theta, norm_P, c1, mu, Ltilde, r, n)
        if om < 1.0:
            lo = theta if lo is None else lo
            hi = theta
            if best is None or om < best[1]:
                best = (theta, om)
        theta *= ratio
    if best is None:
        return ThetaSelection(theta=math.nan, omega_sg=math.inf, feasible=False, window=None)
    return ThetaSelection(theta=best[0], omega_sg=best[1], feasible=True, window=(lo, hi))


@dataclass
class HighGainDesign:
    """Everything the observer needs: the injection structure (A, c, K), the
    Lyapunov certificate (P, mu), the gain parameter theta with its derived
    rates, and the certified input gains of the error estimate."""

    n: int
    A: np.ndarray
    c: np.ndarray
    K: np.ndarray
    P: np.ndarray
    mu: float
    theta: float
    omega_sg: float  # the small-gain constant (must be < 1)
    norm_P: float
    c1: float
    phi: float
    sigma: float
    Ltilde: float
    r: float
    Q1: float
    Q2: float
    Q3: float
    window: Optional[tuple] = None

    @property
    def delta_theta(self):
        """diag(theta, theta^2, ..., theta^n)."""
        return np.diag(self.theta ** np.arange(1, self.n + 1))


def design_highgain(n, Ltilde, r, pole=-1.0, mu=1.0, search_max=1e6, theta=None):
    """Full constructive design: pole placement, Lyapunov solve, theta scan,
    and the explicit error-estimate coefficients Q1 (initial condition),
    Q2 (measurement noise) and Q3 (disturbance).

    Pass ``theta`` to override the scan with a fixed gain parameter; the
    small-gain constant is still evaluated there and must stay below 1.
    """
    A, c = companion_pair(n)
    K = place_K(n, pole)
    Acl = A + np.outer(K, c)
    P = solve_lyapunov_P(Acl, mu)
    if theta is not None:
        if theta < 1.0:
            raise ValueError(f"theta must be >= 1, got {theta}")
        norm_P0 = spectral_norm(P)
        c10 = float(np.linalg.eigvalsh(P)[0])
        om0 = _omega_sg(theta, norm_P0, c10, mu, Ltilde, r, n) if Ltilde > 0 else 0.0
        if om0 >= 1.0:
            raise ValueError(
                f"theta override {theta} is not certified: small-gain constant "
                f"{om0:.4g} >= 1"
            )
        sel = ThetaSelection(theta=float(theta), omega_sg=om0, feasible=True)
    else:
        sel = select_theta(P, mu, Ltilde, r, n, search_max=search_max)
    if not sel.feasible:
        raise ValueError(
            f"no feasible theta in [1, {search_max}]: the delay r = {r} closes "
            f"the small-gain window for Ltilde = {Ltilde}"
        )
    theta = sel.theta
    norm_P = spectral_norm(P)
    c1 = float(np.linalg.eigvalsh(P)[0])
    phi = theta * mu / (2.0 * norm_P)
    sigma = phi / 2.0
    om = sel.omega_sg
    amp = 1.0 / (1.0 - om)
    PK = P @ K
    root = math.sqrt(3.0 / (theta * mu * c1 * phi))
    e_sr = math.exp(sigma * r)
    Q1 = amp * (math.sqrt(norm_P / c1) + om) * theta ** (n - 2) * e_sr
    Q2 = amp * theta**n * float(np.linalg.norm(PK)) * root * e_sr
    Q3 = amp * theta ** (n - 1) * norm_P * root * e_sr
    return HighGainDesign(
        n=n, A=A, c=c, K=K, P=P, mu=mu, theta=theta, omega_sg=om,
        norm_P=norm_P, c1=c1, phi=phi, sigma=sigma, Ltilde=Ltilde, r=r,
        Q1=Q1, Q2=Q2, Q3=Q3, window=sel.window,
    )


# -- system objects -----------------------------------------------------------


@dataclass
class TriangularSystem:
    """Triangular delay plant: dx_i = f_i(x_{1..i} histories, u) + x_{i+1} + d_i.

    ``f`` is a sequence of callables f_i(t, hist, u) -> scalar, where hist is
    a view of the first i components.  Ltilde is the certified global
    Lipschitz constant of the family.
    """

    n: int
    f: Sequence[Callable]
    Ltilde: float
    r: float
    m: int = 1

    def __post_init__(self):
        if len(self.f) != self.n:
            raise ValueError(f"need {self.n} functionals, got {len(self.f)}")
        zero = HistoryBuffer(self.n, self.r, retain_full=True)
        for t in (-self.r, 0.0):
            zero.append(t, np.zeros(self.n), np.zeros(self.n))
        for i, fi in enumerate(self.f):
            val = float(fi(0.0, zero.view_at(0.0, lo=0, hi=i + 1), np.zeros(self.m)))
            if abs(val) > 1e-9:
                raise ValueError(f"f_{i + 1} does not vanish on the zero history: {val}")


def triangular_observed_system(sys):
    """Wrap a :class:`TriangularSystem` as an :class:`ObservedSystem` with
    output y = x_1.  The disturbance channel is the full vector d."""
    n = sys.n

    def f(t, hx, u, d):
        d = np.broadcast_to(np.asarray(d, dtype=float).reshape(-1), (n,))
        x = hx.now()
        dx = np.empty(n)
        for i in range(n):
            dx[i] = float(sys.f[i](t, hx.slice(0, i + 1), u)) + d[i]
            if i < n - 1:
                dx[i] += x[i + 1]
        return dx

    def h(hx):
        return np.asarray([hx.now()[0]])

    def R(hx, u, d):
        d = np.broadcast_to(np.asarray(d, dtype=float).reshape(-1), (n,))
        val = float(sys.f[0](t_ref := hx.t_ref, hx.slice(0, 1), u)) + hx.now()[1] + d[0]
        del t_ref
        return np.asarray([val])

    return ObservedSystem(plant_rhs=f, output_map=h, output_derivative_map=R,
                          r=sys.r, n=n, k=1, m=sys.m, q=n)


def highgain_reo(sys, design):
    """The high-gain injection observer as a :class:`ReoSpec`.

    dz_i = f_i(z_{1..i}, u) + z_{i+1} + theta^i K_i (z_1 - y), the last row
    without the chain term.  Certified constants come from the design.
    """
    n = sys.n
    gains = design.theta ** np.arange(1, n + 1) * design.K

    def F(t, hz, y, u):
        z = hz.now()
        innov = z[0] - float(np.asarray(y).reshape(-1)[0])
        dz = np.empty(n)
        for i in range(n):
            dz[i] = float(sys.f[i](t, hz.slice(0, i + 1), u)) + gains[i] * innov
            if i < n - 1:
                dz[i] += z[i + 1]
        return dz

    return ReoSpec(
        observer_rhs=F,
        l=n,
        gamma=design.Q2,
        sigma=design.sigma,
        a=lambda s: design.Q1 * s,
        g=lambda s: design.Q3 * s,
    )


def run_highgain_observer(sys, design, sched, init_x, init_z, u=None, d=None,
                          xi=None, h=0.01, horizon=None):
    """Sampled-data high-gain observer run.

    ``d`` is a scalar signal applied to the last disturbance channel d_n (the
    deepest integrator), so |d(t)| is the signal magnitude.  The trace gains a
    Lyapunov channel V = eps^T P eps with eps = diag(theta^-i) (z - x).
    """
    obs_sys = triangular_observed_system(sys)
    reo = highgain_reo(sys, design)
    d_vec = None
    if d is not None:
        zeros = np.zeros(sys.n)

        def d_vec(t):
            v = zeros.copy()
            v[-1] = float(d(t))
            return v

    trace = run_sampled_observer(obs_sys, reo, sched, init_x, init_z, u=u,
                                 d=d_vec, xi=xi, h=h, horizon=horizon)
    dinv = 1.0 / design.theta ** np.arange(1, sys.n + 1)
    eps = (trace.observer_state - trace.plant_state) * dinv
    trace.aux["V"] = np.einsum("ij,jk,ik->i", eps, design.P, eps)
    trace.aux["eps_norm"] = np.linalg.norm(eps, axis=1)
    return trace


def sat(x, limit=1.0):
    """Unit saturation (clip to [-limit, limit])."""
    return float(np.clip(x, -limit, limit))


def example_triangular_system(Ltilde=0.1, r=0.1):
    """The shipped order-2 example: a lagged linear term feeding the first
    state and a saturated self-term plus input on the second."""
    f1 = lambda t, h1, u: 0.05 * h1.at(-r)[0]
    f2 = lambda t, h2, u: 0.05 * sat(h2.now()[1]) + float(np.asarray(u).reshape(-1)[0])
    return TriangularSystem(n=2, f=[f1, f2], Ltilde=Ltilde, r=r, m=1)
