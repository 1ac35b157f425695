"""Closed-form contraction quantities and error-bound machinery.

The reverse map of each sampler, evaluated with the exact conditional score,
is affine with a scalar Jacobian; its per-step contraction factor lambda_i
has a closed form per sampler kind.  Coupled trajectories driven by
independent noise then satisfy the recursion

    err_{j-1} <= lambda_j^2 err_j + 2 C_j tau,

whose unrolled form is the tight ("recursive") bound; relaxing lambda_j and
C_j to their maxima gives the simple geometric bound
2 C tau / (1 - lambda^2) + lambda^(2 N') err_{N'}.

DDIM quantities live in reparameterized coordinates x / sqrt(alpha_bar),
where the sampler becomes a noise-free variance-exploding recursion with
noise scale sigma_i = sqrt(1 - alpha_bar_i) / sqrt(alpha_bar_i); the
coordinates coincide with the plain ones at step 0, so end-to-end error
statements transfer unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .consistency import hutchinson_tau
from .errors import ValidationError
from .schedules import SamplerKind, Schedule, check_step_index


def _sigma_view(schedule: Schedule, kind: SamplerKind) -> np.ndarray:
    """The sigma array driving the contraction algebra for a sampler kind."""
    if kind is SamplerKind.SMLD:
        if schedule.is_vp:
            raise ValidationError("SMLD analysis requires a VE schedule")
        return schedule.sigma
    if kind is SamplerKind.DDIM:
        return schedule.ddim_sigma if schedule.is_vp else schedule.sigma
    raise ValidationError(f"no sigma view for kind {kind.value}")


def contraction_rate(schedule: Schedule, kind: SamplerKind,
                     n_prime: int) -> tuple[float, np.ndarray]:
    """Per-step contraction factors lambda_i for i = 1..N' and their maximum.

    DDPM: lambda_i = sqrt(alpha_i) (1 - alpha_bar_{i-1}) / (1 - alpha_bar_i)
    SMLD: lambda_i = (sigma_{i-1}^2 - sigma_0^2) / (sigma_i^2 - sigma_0^2)
    DDIM: lambda_i = sigma_{i-1} / sigma_i   (reparameterized sigma)
    """
    n_prime = check_step_index(schedule, n_prime)
    i = np.arange(1, n_prime + 1)
    if kind is SamplerKind.DDPM:
        if not schedule.is_vp:
            raise ValidationError("DDPM analysis requires a VP schedule")
        lam = (np.sqrt(schedule.alpha[i])
               * (1.0 - schedule.alpha_bar[i - 1]) / (1.0 - schedule.alpha_bar[i]))
    elif kind is SamplerKind.SMLD:
        s = _sigma_view(schedule, kind)
        s0sq = s[0] ** 2
        lam = (s[i - 1] ** 2 - s0sq) / (s[i] ** 2 - s0sq)
    else:
        s = _sigma_view(schedule, kind)
        lam = s[i - 1] / s[i]
    lam = np.ascontiguousarray(lam, dtype=np.float64)
    return float(lam.max()), lam


def noise_constant_per_step(schedule: Schedule, kind: SamplerKind,
                            n_prime: int, n: int) -> np.ndarray:
    """Per-step noise constants C_j = n g_j^2 for j = 1..N'.

    DDPM: g_j^2 = 1 - alpha_j = beta_j; SMLD: sigma_j^2 - sigma_{j-1}^2;
    DDIM: 0 (no noise term).
    """
    n_prime = check_step_index(schedule, n_prime)
    j = np.arange(1, n_prime + 1)
    if kind is SamplerKind.DDPM:
        if not schedule.is_vp:
            raise ValidationError("DDPM analysis requires a VP schedule")
        g2 = schedule.beta[j]
    elif kind is SamplerKind.SMLD:
        s = _sigma_view(schedule, kind)
        g2 = s[j] ** 2 - s[j - 1] ** 2
    else:
        g2 = np.zeros(n_prime)
    return np.ascontiguousarray(n * g2, dtype=np.float64)


def noise_constant(schedule: Schedule, kind: SamplerKind, n_prime: int,
                   n: int) -> float:
    """C = n max_{i in [1, N']} g_i^2 (0 for the deterministic sampler)."""
    return float(noise_constant_per_step(schedule, kind, n_prime, n).max(initial=0.0))


def noise_constant_candidates(schedule: Schedule, kind: SamplerKind,
                              n_prime: int, n: int) -> dict[str, float]:
    """Alternative printed forms of C, surfaced for comparison.

    The source algebra prints several non-equivalent expressions for the
    DDPM constant; the primary value used in bounds is the g-derived
    n max_{i<=N'}(1 - alpha_i).  For SMLD the geometric-schedule form
    n sigma_{N'}^2 (1 - (sigma_1/sigma_N)^{2/(N-1)}) is reported alongside
    the direct maximum.
    """
    out = {"primary": noise_constant(schedule, kind, n_prime, n)}
    if kind is SamplerKind.DDPM:
        out["n_one_minus_alpha_N"] = float(n * (1.0 - schedule.alpha[schedule.N]))
        out["n_one_minus_alpha_bar_N"] = float(n * (1.0 - schedule.alpha_bar[schedule.N]))
    elif kind is SamplerKind.SMLD:
        s = schedule.sigma
        ratio = (s[1] / s[schedule.N]) ** (2.0 / (schedule.N - 1.0))
        out["geometric_form"] = float(n * s[n_prime] ** 2 * (1.0 - ratio))
    return out


def contraction_forward_coeffs(schedule: Schedule, kind: SamplerKind,
                               i: int) -> tuple[float, float]:
    """Forward coefficients (a_i, b_i) in the coordinates of the contraction.

    DDPM: (sqrt(alpha_bar_i), sqrt(1 - alpha_bar_i)); SMLD: (1,
    sqrt(sigma_i^2 - sigma_0^2)); DDIM: (1, sigma_i) in the reparameterized
    coordinates (the forward kernel there is x_bar_i = x_bar_0 + sigma_i z).
    """
    i = check_step_index(schedule, i)
    if kind is SamplerKind.DDPM:
        if not schedule.is_vp:
            raise ValidationError("DDPM analysis requires a VP schedule")
        ab = schedule.alpha_bar[i]
        return float(np.sqrt(ab)), float(np.sqrt(1.0 - ab))
    if kind is SamplerKind.SMLD:
        s = _sigma_view(schedule, kind)
        return 1.0, float(np.sqrt(s[i] ** 2 - s[0] ** 2))
    s = _sigma_view(schedule, kind)
    return 1.0, float(s[i])


def forward_error(eps0: float, schedule: Schedule, kind: SamplerKind,
                  n_prime: int, n: int) -> float:
    """Expected squared distance after forward-diffusing both trajectories.

    With independent noise draws, err_{N'} = a_{N'}^2 eps0 + 2 b_{N'}^2 n for
    the contraction-coordinate coefficients (a, b).
    """
    if eps0 < 0.0:
        raise ValidationError("eps0 is a squared distance and must be >= 0")
    a, b = contraction_forward_coeffs(schedule, kind, n_prime)
    return float(a * a * eps0 + 2.0 * b * b * n)


def bound_traces(lambda_per_step: np.ndarray, c_per_step: np.ndarray,
                 tau: float, fwd_err: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-step bound traces B_j for j = 0..N' (entry j bounds err at step j).

    recursive: B_{N'} = err_{N'}; B_{j-1} = lambda_j^2 B_j + 2 C_j tau.
    simple:    B_j = 2 C tau / (1 - lambda^2) + lambda^(2 (N'-j)) err_{N'}
               with lambda, C the maxima over the window (a relaxation of
               the recursion, hence recursive <= simple entrywise).
    """
    lam = np.asarray(lambda_per_step, dtype=np.float64)
    cs = np.asarray(c_per_step, dtype=np.float64)
    if lam.shape != cs.shape or lam.ndim != 1:
        raise ValidationError("lambda and C traces must be 1D arrays of equal length")
    if tau < 0.0:
        raise ValidationError("tau must be nonnegative")
    n_prime = lam.size
    lam_max = float(lam.max(initial=0.0))
    if lam_max >= 1.0:
        raise ValidationError(f"contraction requires lambda < 1, got {lam_max}")
    rec = np.empty(n_prime + 1)
    rec[n_prime] = fwd_err
    for j in range(n_prime, 0, -1):
        rec[j - 1] = lam[j - 1] ** 2 * rec[j] + 2.0 * cs[j - 1] * tau
    c_max = float(cs.max(initial=0.0))
    steps_left = n_prime - np.arange(n_prime + 1)
    simple = (2.0 * c_max * tau / (1.0 - lam_max ** 2)
              + lam_max ** (2.0 * steps_left) * fwd_err)
    return simple, rec


def error_bound(lambda_per_step: np.ndarray, c_per_step: np.ndarray,
                tau: float, fwd_err: float) -> tuple[float, float]:
    """End-to-end bounds on the reverse-path error at step 0.

    Returns (bound_simple, bound_recursive); the recursive product-form
    bound never exceeds the simple geometric one.
    """
    simple, rec = bound_traces(lambda_per_step, c_per_step, tau, fwd_err)
    return float(simple[0]), float(rec[0])


@dataclass(frozen=True)
class TauEstimate:
    value: float
    stderr: float
    exact: bool


def tau_of(op, n_probes: int = 256, seed: int = 0) -> TauEstimate:
    """Trace ratio Tr(A^T A)/n: exact when the operator provides it, else
    the Hutchinson estimate with its standard error."""
    tau = getattr(op, "tau", None)
    if tau is not None:
        return TauEstimate(value=float(tau), stderr=0.0, exact=True)
    est, se = hutchinson_tau(op.apply_linear, op.shape, n_probes=n_probes, seed=seed)
    return TauEstimate(value=est, stderr=se, exact=False)


@dataclass(frozen=True)
class ContractionReport:
    """Everything needed to state and check the end-to-end error bound."""

    kind: SamplerKind
    n_prime: int
    n: int
    lam: float
    lambda_per_step: np.ndarray
    C: float
    c_candidates: dict
    tau: float
    eps0: float
    forward_error: float
    bound_simple: float
    bound_recursive: float

    def rows(self):
        yield ("kind", self.kind.value)
        yield ("n_prime", self.n_prime)
        yield ("n", self.n)
        yield ("lambda", repr(self.lam))
        yield ("C", repr(self.C))
        for name, val in sorted(self.c_candidates.items()):
            if name != "primary":
                yield (f"C[{name}]", repr(val))
        yield ("tau", repr(self.tau))
        yield ("eps0", repr(self.eps0))
        yield ("forward_error", repr(self.forward_error))
        yield ("bound_simple", repr(self.bound_simple))
        yield ("bound_recursive", repr(self.bound_recursive))


def contraction_report(schedule: Schedule, kind: SamplerKind, n_prime: int,
                       n: int, tau: float, eps0: float) -> ContractionReport:
    """Assemble lambda, C, tau, the forward error and both bounds."""
    lam, lam_steps = contraction_rate(schedule, kind, n_prime)
    c_steps = noise_constant_per_step(schedule, kind, n_prime, n)
    fwd = forward_error(eps0, schedule, kind, n_prime, n)
    simple, recursive = error_bound(lam_steps, c_steps, tau, fwd)
    return ContractionReport(
        kind=kind, n_prime=n_prime, n=n, lam=lam, lambda_per_step=lam_steps,
        C=noise_constant(schedule, kind, n_prime, n),
        c_candidates=noise_constant_candidates(schedule, kind, n_prime, n),
        tau=float(tau), eps0=float(eps0), forward_error=fwd,
        bound_simple=simple, bound_recursive=recursive,
    )


@dataclass(frozen=True)
class ShortcutResult:
    """Outcome of the minimal-shortcut search.

    ``n_prime`` is the smallest step index satisfying the kind-specific
    sufficient conditions, or None with ``reason`` naming the violated
    condition.  ``checks`` records the numeric thresholds that were tested.
    """

    feasible: bool
    n_prime: int | None
    reason: str | None
    checks: dict = field(default_factory=dict)


def minimal_shortcut(eps0: float, mu: float, schedule: Schedule,
                     kind: SamplerKind, tau: float, n: int) -> ShortcutResult:
    """Smallest N' whose sufficient conditions guarantee err_{0,r} <= mu eps0.

    DDPM: N' beta_{N'} >= 2 log(4n / (mu eps0))  and
          N' beta_{N'} <= mu eps0 / (4 n tau).
    SMLD: sigma_min^2 < mu^(3/2) eps0 / (8n), sigma_max^2 > mu eps0 / (4n),
          and (N'-1)/(N-1) inside
          [log(2/sqrt(mu)), log(mu eps0 / (4 n sigma_min^2))] / log(sigma_max^2/sigma_min^2).
    DDIM: sigma_0^2 <= mu eps0 / (4n), then the smallest N' with
          sigma_{N'}^2 >= eps0 / (2n).

    The search scans N' = 1..N, so the returned index satisfies the stated
    inequalities by construction; infeasibility is reported, never guessed.
    """
    if eps0 <= 0.0:
        raise ValidationError("eps0 must be positive")
    if not 0.0 < mu <= 1.0:
        raise ValidationError("mu must lie in (0, 1]")
    if tau < 0.0:
        raise ValidationError("tau must be nonnegative")
    N = schedule.N

    if kind is SamplerKind.DDPM:
        if not schedule.is_vp:
            raise ValidationError("DDPM shortcut search requires a VP schedule")
        lower = 2.0 * math.log(4.0 * n / (mu * eps0))
        upper = mu * eps0 / (4.0 * n * tau) if tau > 0 else math.inf
        checks = {"lower_threshold": lower, "upper_threshold": upper}
        for np_ in range(1, N + 1):
            v = np_ * float(schedule.beta[np_])
            if v >= lower and v <= upper:
                return ShortcutResult(True, np_, None, checks)
        v_max = N * float(schedule.beta[N])
        if v_max < lower:
            reason = (f"lower condition unsatisfiable: N' beta_N' <= {v_max:.6g} "
                      f"< 2 log(4n/(mu eps0)) = {lower:.6g} for every N'")
        else:
            reason = (f"empty window: the smallest N' with N' beta_N' >= {lower:.6g} "
                      f"already violates N' beta_N' <= mu eps0/(4 n tau) = {upper:.6g}")
        return ShortcutResult(False, None, reason, checks)

    if kind is SamplerKind.SMLD:
        s = _sigma_view(schedule, kind)
        smin2, smax2 = float(s[1] ** 2), float(s[N] ** 2)
        pre_min = mu ** 1.5 * eps0 / (8.0 * n)
        pre_max = mu * eps0 / (4.0 * n)
        checks = {"sigma_min_sq": smin2, "sigma_min_cap": pre_min,
                  "sigma_max_sq": smax2, "sigma_max_floor": pre_max}
        if not smin2 < pre_min:
            return ShortcutResult(False, None,
                                  f"sigma_min^2 = {smin2:.6g} is not < "
                                  f"mu^(3/2) eps0/(8n) = {pre_min:.6g}", checks)
        if not smax2 > pre_max:
            return ShortcutResult(False, None,
                                  f"sigma_max^2 = {smax2:.6g} is not > "
                                  f"mu eps0/(4n) = {pre_max:.6g}", checks)
        log_ratio = math.log(smax2 / smin2)
        lo = math.log(2.0 / math.sqrt(mu)) / log_ratio
        hi = math.log(mu * eps0 / (4.0 * n * smin2)) / log_ratio
        checks.update({"ratio_lower": lo, "ratio_upper": hi})
        for np_ in range(1, N + 1):
            r = (np_ - 1.0) / (N - 1.0)
            if lo <= r <= hi:
                return ShortcutResult(True, np_, None, checks)
        return ShortcutResult(False, None,
                              f"no integer N' puts (N'-1)/(N-1) inside "
                              f"[{lo:.6g}, {hi:.6g}]", checks)

    # DDIM
    s = _sigma_view(schedule, kind)
    s0sq = float(s[0] ** 2)
    cap = mu * eps0 / (4.0 * n)
    floor = eps0 / (2.0 * n)
    checks = {"sigma0_sq": s0sq, "sigma0_cap": cap, "sigma_floor_sq": floor}
    if not s0sq <= cap:
        return ShortcutResult(False, None,
                              f"sigma_0^2 = {s0sq:.6g} exceeds mu eps0/(4n) = {cap:.6g}",
                              checks)
    for np_ in range(1, N + 1):
        if s[np_] ** 2 >= floor:
            return ShortcutResult(True, np_, None, checks)
    return ShortcutResult(False, None,
                          f"sigma_N^2 = {float(s[N] ** 2):.6g} never reaches "
                          f"eps0/(2n) = {floor:.6g}", checks)
