"""Exact solver for KL-regularized feature matching on an enumerable outcome space.

Problem (squared form), for a base distribution q, data mean mu_p = E_p[phi]
and alignment bias alpha:

    min_rho  ||E_rho[phi] - v||^2 + (1/beta) KL(rho || q),   v = mu_p / alpha.

Its optimizer also solves the unsquared problem

    min_rho  ||E_rho[phi] - v|| + (1/beta~) KL(rho || q),   beta~ = 2 beta ||E_rho*[phi] - v||,

whose dual is max_{||h|| <= 1} -v^T h - (1/beta~) log E_q exp(-beta~ phi^T h).
The optimizer is the exponential tilt rho*(y) = q(y) exp(-chi^T phi(y)) / Z with
chi = beta~ h*. Each piece is solved by its own method so they cross-check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from .whitening import kl_divergence


class OracleError(RuntimeError):
    pass


@dataclass
class TiltResult:
    rho: np.ndarray
    chi: np.ndarray
    h: np.ndarray
    beta: float
    beta_tilde: float
    alpha: float
    v: np.ndarray
    primal_value: float        # squared form at rho*
    norm_primal_value: float   # unsquared form at rho*
    dual_value: float
    gap: float
    tilt_residual: float       # max_y |log rho*(y) - log rho_chi(y)|
    iterations: int
    converged: bool

    def row(self) -> dict:
        return {
            "alpha": self.alpha, "beta": self.beta, "beta_tilde": self.beta_tilde,
            "chi_norm": float(np.linalg.norm(self.chi)), "primal": self.norm_primal_value,
            "dual": self.dual_value, "gap": self.gap, "tilt_residual": self.tilt_residual,
            "iterations": self.iterations,
        }


def tilt(q, features, chi) -> np.ndarray:
    """log of q(y) exp(-chi^T phi(y)) / Z."""
    s = np.log(q) - features @ chi
    return s - logsumexp(s)


def _kl_log(logr, logq) -> float:
    r = np.exp(logr)
    return float(np.sum(r * (logr - logq)))


def solve_fm_kl(q, features, v, beta: float = 1.0, tol: float = 1e-13,
                max_iter: int = 3000) -> tuple[np.ndarray, int, bool]:
    """Minimize ||Phi^T rho - v||^2 + KL(rho||q)/beta over the simplex.

    Entropic mirror descent with backtracking gets close; a damped Newton
    iteration on the simplex (steps written relative to rho so outcomes with
    vanishing mass stay representable) finishes. Returns log rho*.
    """
    q = np.asarray(q, dtype=np.float64)
    Phi = np.asarray(features, dtype=np.float64)
    logq = np.log(q)
    N = q.size

    def F(logr):
        m = np.exp(logr) @ Phi
        return float(np.sum((m - v) ** 2) + _kl_log(logr, logq) / beta)

    def grad(logr):
        return 2 * Phi @ (np.exp(logr) @ Phi - v) + (logr - logq + 1) / beta

    logr = logq.copy()
    f = F(logr)
    eta = beta
    it = 0
    for it in range(1, max_iter + 1):
        r = np.exp(logr)
        g = grad(logr)
        while True:
            cand = logr - eta * g
            cand -= logsumexp(cand)
            fc = F(cand)
            # relative-smoothness sufficient decrease
            bound = f + g @ (np.exp(cand) - r) + _kl_log(cand, logr) / eta
            if fc <= bound + 1e-15 * max(1.0, abs(f)) or eta < 1e-12:
                break
            eta *= 0.5
        step = np.max(np.abs(cand - logr))
        logr, f = cand, fc
        if step < 1e-10 * max(1.0, np.max(np.abs(logr - logq))):
            break
        eta = min(eta * 1.5, beta)

    for k in range(100):
        r = np.exp(logr)
        g = grad(logr)
        # KKT system in delta = d rho / rho:  (2 Phi Phi^T diag(rho) + I/beta) delta + nu 1 = -g,  rho^T delta = 0
        A = np.zeros((N + 1, N + 1))
        A[:N, :N] = 2 * Phi @ (Phi * r[:, None]).T + np.eye(N) / beta
        A[:N, N] = 1.0
        A[N, :N] = r
        sol = np.linalg.lstsq(A, np.concatenate([-g, [0.0]]), rcond=None)[0]
        delta = sol[:N]
        t = 1.0
        lo = delta.min()
        if lo < -0.99:
            t = 0.99 / -lo
        while True:
            cand = logr + np.log1p(t * delta)
            cand -= logsumexp(cand)
            fc = F(cand)
            if fc <= f + 1e-15 * max(1.0, abs(f)) or t < 1e-10:
                break
            t *= 0.5
        step = np.max(np.abs(cand - logr))
        logr, f = cand, fc
        it += 1
        if step < tol * max(1.0, np.max(np.abs(logr - logq))):
            return logr, it, True
    return logr, it, False


def _dual_parts(h, q, Phi, v, bt):
    logw = np.log(q) - bt * (Phi @ h)
    lz = logsumexp(logw)
    w = np.exp(logw - lz)
    mean = w @ Phi
    val = -v @ h - lz / bt
    grad = -v + mean
    C = (Phi * w[:, None]).T @ Phi - np.outer(mean, mean)
    return val, grad, -bt * C


def solve_norm_dual(q, features, v, beta_tilde: float, max_iter: int = 20_000,
                    tol: float = 1e-14) -> tuple[np.ndarray, float, int]:
    """max_{||h|| <= 1} -v^T h - (1/beta~) log E_q exp(-beta~ phi^T h).

    Projected gradient ascent to get close, then Newton on the KKT system
    (boundary or interior, whichever the iterate sits on)."""
    q = np.asarray(q, dtype=np.float64)
    Phi = np.asarray(features, dtype=np.float64)
    d = Phi.shape[1]

    def proj(h):
        nrm = np.linalg.norm(h)
        return h / nrm if nrm > 1 else h

    h = proj(-(v - q @ Phi))
    if not np.any(h):
        h = np.zeros(d)
    val, grad, _ = _dual_parts(h, q, Phi, v, beta_tilde)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            cand = proj(h + step * grad)
            cv, cg, _ = _dual_parts(cand, q, Phi, v, beta_tilde)
            if cv >= val + 0.5 * grad @ (cand - h) - 1e-16 * max(1.0, abs(val)) or step < 1e-14:
                break
            step *= 0.5
        moved = np.linalg.norm(cand - h)
        h, val, grad = cand, cv, cg
        step *= 2.0
        if moved < 1e-10:
            break

    for _ in range(50):
        val, grad, H = _dual_parts(h, q, Phi, v, beta_tilde)
        nrm = np.linalg.norm(h)
        on_boundary = nrm > 1 - 1e-8 and grad @ h > 0
        if on_boundary:
            mu = (grad @ h) / (h @ h)
            r = np.concatenate([grad - mu * h, [(h @ h - 1) / 2]])
            J = np.zeros((d + 1, d + 1))
            J[:d, :d] = H - mu * np.eye(d)
            J[:d, d] = -h
            J[d, :d] = h
            delta = np.linalg.lstsq(J, -r, rcond=None)[0]
            h = h + delta[:d]
        else:
            r = grad
            delta = np.linalg.lstsq(H, -r, rcond=None)[0]
            h = proj(h + delta)
        if np.max(np.abs(r)) < tol:
            break
    val, _, _ = _dual_parts(h, q, Phi, v, beta_tilde)
    return h, float(val), it


def constrained_mle(p, q, features, radius: float) -> np.ndarray:
    """argmax_{||chi|| <= radius} E_p[log rho_chi] for the tilt family, by SLSQP."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    Phi = np.asarray(features, dtype=np.float64)
    mu_p = p @ Phi
    d = Phi.shape[1]

    def negll(chi):
        s = np.log(q) - Phi @ chi
        lz = logsumexp(s)
        w = np.exp(s - lz)
        return mu_p @ chi + lz, mu_p - w @ Phi

    cons = {"type": "ineq", "fun": lambda c: radius**2 - c @ c, "jac": lambda c: -2 * c}
    x0 = -mu_p / max(np.linalg.norm(mu_p), 1e-300) * radius * 0.5
    res = minimize(negll, x0, jac=True, method="SLSQP", constraints=[cons],
                   options={"ftol": 1e-16, "maxiter": 1000})
    chi = res.x
    # Newton polish on the active-constraint KKT system
    for _ in range(30):
        s = np.log(q) - Phi @ chi
        w = np.exp(s - logsumexp(s))
        mean = w @ Phi
        g = mu_p - mean
        H = (Phi * w[:, None]).T @ Phi - np.outer(mean, mean)
        if chi @ chi < radius**2 * (1 - 1e-8):
            delta = np.linalg.lstsq(H, -g, rcond=None)[0]
            chi = chi + delta
            r = g
        else:
            lam = -(g @ chi) / (2 * chi @ chi)
            r = np.concatenate([g + 2 * lam * chi, [(chi @ chi - radius**2) / 2]])
            J = np.zeros((d + 1, d + 1))
            J[:d, :d] = H + 2 * lam * np.eye(d)
            J[:d, d] = 2 * chi
            J[d, :d] = chi
            delta = np.linalg.lstsq(J, -r, rcond=None)[0]
            chi = chi + delta[:d]
        if np.max(np.abs(r)) < 1e-14:
            break
    return chi


def ebm_tilt_oracle(q, p, features, beta: float = 1.0, alpha: float = 1.0,
                    strict: bool = False) -> TiltResult:
    """Solve the primal over the simplex and the norm-constrained dual separately.

    ``strict`` raises OracleError when the gap or tilt residual exceeds 1e-6 / 1e-5.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    Phi = np.asarray(features, dtype=np.float64)
    if Phi.shape[0] > 1024:
        raise ValueError(f"outcome space of size {Phi.shape[0]} is too large to enumerate")
    if np.any(q <= 0):
        raise ValueError("base distribution must have full support")
    if not 0 < alpha:
        raise ValueError("alpha must be positive")
    v = (p @ Phi) / alpha
    logr, iters, ok = solve_fm_kl(q, Phi, v, beta)
    rho = np.exp(logr)
    m = rho @ Phi
    resid = float(np.linalg.norm(m - v))
    primal = resid**2 + kl_divergence(rho, q) / beta
    bt = 2 * beta * resid
    if bt < 1e-12:
        h, dual, norm_primal, chi = np.zeros(Phi.shape[1]), 0.0, resid, np.zeros(Phi.shape[1])
    else:
        h, dual, _ = solve_norm_dual(q, Phi, v, bt)
        norm_primal = kl_divergence(rho, q) / bt + resid
        chi = bt * h
    tilt_res = float(np.max(np.abs(logr - tilt(q, Phi, chi))))
    gap = abs(norm_primal - dual)
    out = TiltResult(rho, chi, h, beta, bt, alpha, v, primal, norm_primal, dual, gap, tilt_res,
                     iters, ok)
    if strict and (gap > 1e-6 or tilt_res > 1e-5 or not ok):
        raise OracleError(f"oracle did not converge: gap={gap:.3e} tilt residual={tilt_res:.3e} "
                          f"iterations={iters}")
    return out


def solve_norm_primal(q, features, v, beta_tilde: float, max_iter: int = 200_000) -> np.ndarray:
    """Minimize ||E_rho[phi] - v|| + KL(rho||q)/beta~ directly (mirror descent).
    Used only to check that the two primal forms share their optimizer."""
    q = np.asarray(q, dtype=np.float64)
    Phi = np.asarray(features, dtype=np.float64)
    logq = np.log(q)

    def F(logr):
        return float(np.linalg.norm(np.exp(logr) @ Phi - v) + _kl_log(logr, logq) / beta_tilde)

    logr = logq.copy()
    f = F(logr)
    eta = beta_tilde
    for _ in range(max_iter):
        r = np.exp(logr)
        diff = r @ Phi - v
        g = Phi @ diff / np.linalg.norm(diff) + (logr - logq + 1) / beta_tilde
        while True:
            cand = logr - eta * g
            cand -= logsumexp(cand)
            fc = F(cand)
            if fc <= f + g @ (np.exp(cand) - r) + _kl_log(cand, logr) / eta + 1e-15 or eta < 1e-12:
                break
            eta *= 0.5
        step = np.max(np.abs(cand - logr))
        logr, f = cand, fc
        if step < 1e-15 * max(1.0, eta):
            break
        eta = min(eta * 1.5, beta_tilde)
    return np.exp(logr)
