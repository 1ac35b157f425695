"""Forward diffusion, reverse-diffusion steps, and the shortcut sampling loop.

The shortcut loop forward-diffuses an initial estimate to an intermediate
step N' = round(t0 * N), then alternates the kind-appropriate reverse step
with the affine data-consistency map x <- A x' + b.  VE sampling interleaves
predictor, consistency, Langevin corrector, consistency.

All steps accept an optional pre-drawn noise array ``z``; when ``z`` is given
the RNG is not consulted, which is how coupled-trajectory experiments share
or withhold noise.  Passing ``rng=None, z=None`` to a stochastic step is an
error except for DDIM, which has no noise term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rng import (RngStream, STREAM_CONSISTENCY, STREAM_CORRECTOR,
                  STREAM_FORWARD, STREAM_REVERSE)
from .schedules import (SamplerKind, Schedule, check_step_index,
                        forward_coeffs, step_index_of_time, tilde_beta)
from .score import ScoreOracle

logger = logging.getLogger(__name__)

DEFAULT_CORRECTOR_R = 0.16


@dataclass(frozen=True)
class CcdfConfig:
    """Shortcut-sampling configuration.

    t0 is the fraction of the full reverse path to run: the loop starts at
    N' = round(t0 * N), clamped to [1, N].  ``corrector_r`` is the Langevin
    step-size ratio and applies to VE sampling only; r = 0 disables the
    corrector displacement entirely.  When ``consistency_every_step`` is
    False the consistency map is applied once, after the final reverse step,
    instead of after every step.
    """

    t0: float
    N: int
    kind: SamplerKind
    corrector_r: float = DEFAULT_CORRECTOR_R
    consistency_every_step: bool = True
    corrector_squared_step: bool = False

    def __post_init__(self):
        if not 0.0 < self.t0 <= 1.0:
            raise ValidationError(f"t0 must lie in (0, 1], got {self.t0}")
        if self.N < 2:
            raise ValidationError(f"N must be >= 2, got {self.N}")
        if self.corrector_r < 0.0:
            raise ValidationError("corrector_r must be nonnegative")

    @property
    def n_prime(self) -> int:
        return step_index_of_time(self.t0, self.N)


def _draw(rng: RngStream | None, z: np.ndarray | None, shape) -> np.ndarray:
    if z is not None:
        return np.asarray(z, dtype=np.float64)
    if rng is None:
        raise ValidationError("a stochastic step needs either rng or a pre-drawn z")
    return rng.normal(shape)


def forward_diffuse(x0: np.ndarray, n_prime: int, schedule: Schedule,
                    rng: RngStream | None, z: np.ndarray | None = None) -> np.ndarray:
    """Single-step forward diffusion x_{N'} = a_{N'} x0 + b_{N'} z.

    Draws z exactly once; no score evaluations are performed.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    c = forward_coeffs(schedule, n_prime)
    return c.a * x0 + c.b * _draw(rng, z, x0.shape)


def reverse_step_ddpm(x: np.ndarray, i: int, schedule: Schedule,
                      oracle: ScoreOracle, rng: RngStream | None,
                      z: np.ndarray | None = None,
                      use_tilde_variance: bool = False) -> np.ndarray:
    """One ancestral reverse step of the variance-preserving sampler.

    x_{i-1} = (x_i + (1 - alpha_i) s(x_i, i)) / sqrt(alpha_i) + sqrt(var_i) z,
    with var_i = beta_i by default or the posterior variance when
    ``use_tilde_variance`` is set.
    """
    i = check_step_index(schedule, i)
    if not schedule.is_vp:
        raise ValidationError("DDPM steps require a VP schedule")
    x = np.asarray(x, dtype=np.float64)
    s = oracle.score(x, i, schedule)
    alpha_i = schedule.alpha[i]
    mean = (x + (1.0 - alpha_i) * s) / np.sqrt(alpha_i)
    var = tilde_beta(schedule, i) if use_tilde_variance else float(schedule.beta[i])
    return mean + np.sqrt(var) * _draw(rng, z, x.shape)


def reverse_step_smld(x: np.ndarray, i: int, schedule: Schedule,
                      oracle: ScoreOracle, rng: RngStream | None,
                      z: np.ndarray | None = None) -> np.ndarray:
    """One reverse step of the variance-exploding sampler.

    x_{i-1} = x_i + (sigma_i^2 - sigma_{i-1}^2) s(x_i, i)
              + sqrt(sigma_i^2 - sigma_{i-1}^2) z.
    """
    i = check_step_index(schedule, i)
    if schedule.is_vp:
        raise ValidationError("SMLD steps require a VE schedule")
    x = np.asarray(x, dtype=np.float64)
    dv = float(schedule.sigma[i] ** 2 - schedule.sigma[i - 1] ** 2)
    s = oracle.score(x, i, schedule)
    return x + dv * s + np.sqrt(dv) * _draw(rng, z, x.shape)


def reverse_step_ddim(x: np.ndarray, i: int, schedule: Schedule,
                      oracle: ScoreOracle) -> np.ndarray:
    """One deterministic reverse step (no additive noise term).

    With z_hat = -s(x_i, i) sqrt(1 - alpha_bar_i):

    x_{i-1} = sqrt(alpha_bar_{i-1}) (x_i - sqrt(1-alpha_bar_i) z_hat)
              / sqrt(alpha_bar_i) + sqrt(1 - alpha_bar_{i-1}) z_hat.
    """
    i = check_step_index(schedule, i)
    if not schedule.is_vp:
        raise ValidationError("DDIM steps require a VP schedule")
    x = np.asarray(x, dtype=np.float64)
    ab_i = schedule.alpha_bar[i]
    ab_prev = schedule.alpha_bar[i - 1]
    z_hat = -oracle.score(x, i, schedule) * np.sqrt(1.0 - ab_i)
    x0_hat = (x - np.sqrt(1.0 - ab_i) * z_hat) / np.sqrt(ab_i)
    return np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * z_hat


def langevin_corrector(x: np.ndarray, i: int, schedule: Schedule,
                       oracle: ScoreOracle, r: float, rng: RngStream | None,
                       z: np.ndarray | None = None,
                       batch_axes: int = 0,
                       squared_step: bool = False) -> np.ndarray:
    """One Langevin refinement step x + eps s + sqrt(2 eps) z (VE schedules only).

    The step size eps = 2 r ||z|| / ||s(x, i)|| is set from the same fresh
    draw z that supplies the additive noise.  A zero score norm makes the
    step undefined; it is skipped with a warning.  ``batch_axes`` leading
    axes are treated as independent samples when computing the norms.

    With ``squared_step`` the signal-to-noise form eps = 2 (r ||z||/||s||)^2
    is used instead.  The default rule moves the state by exactly 2 r ||z||
    along the score direction irrespective of how close it already is, which
    floors the achievable error near r * sqrt(n); the squared form anneals
    the displacement with the noise level and matches the behaviour of
    predictor-corrector reconstruction in practice.

    Both rules send eps to infinity as the score norm vanishes (the state
    sits at the target), so eps is clamped at the Langevin stability limit
    1/max|ds/dx|, keeping the drift multiplier 1 - eps |J| nonnegative.
    """
    i = check_step_index(schedule, i)
    if schedule.is_vp:
        raise ValidationError("the Langevin corrector applies to VE schedules only")
    if r < 0.0:
        raise ValidationError("corrector step-size ratio r must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if r == 0.0:
        return x
    s = oracle.score(x, i, schedule)
    zz = _draw(rng, z, x.shape)
    data_axes = tuple(range(batch_axes, x.ndim))
    s_norm = np.sqrt(np.sum(s * s, axis=data_axes, keepdims=True))
    z_norm = np.sqrt(np.sum(zz * zz, axis=data_axes, keepdims=True))
    if np.any(s_norm == 0.0):
        logger.warning("corrector skipped at step %d: zero score norm", i)
        if np.all(s_norm == 0.0):
            return x
        s_norm = np.where(s_norm == 0.0, np.inf, s_norm)  # eps -> 0 on those rows
    if squared_step:
        eps = 2.0 * (r * z_norm / s_norm) ** 2
    else:
        eps = 2.0 * r * z_norm / s_norm
    j_max = np.max(np.abs(oracle.jacobian_diag(x, i, schedule)),
                   axis=data_axes, keepdims=True)
    eps = np.where(j_max > 0.0, np.minimum(eps, 1.0 / np.maximum(j_max, 1e-300)),
                   eps)
    return x + eps * s + np.sqrt(2.0 * eps) * zz


def _check_op(op, shape) -> None:
    for attr in ("apply", "apply_linear", "offset"):
        if not hasattr(op, attr):
            raise ValidationError(
                f"consistency operator lacks required method {attr!r}"
            )
    op_shape = getattr(op, "shape", None)
    if op_shape is not None and tuple(shape)[-len(op_shape):] != tuple(op_shape):
        raise ValidationError(
            f"input shape {tuple(shape)} does not end with operator shape {tuple(op_shape)}"
        )


def ccdf_sample(x0_init: np.ndarray, op, cfg: CcdfConfig, schedule: Schedule,
                oracle: ScoreOracle, rng: RngStream) -> np.ndarray:
    """Run the shortcut sampler: forward-diffuse to N', then reverse to 0.

    The reverse loop runs i = N'..1.  After each reverse step the data
    consistency map is applied; VE sampling additionally runs one Langevin
    corrector step followed by a second consistency application.  The
    consistency offsets draw from a dedicated RNG stream so that coupled
    runs can reproduce or share them independently of the reverse noise.
    """
    x0_init = np.asarray(x0_init, dtype=np.float64)
    if cfg.N != schedule.N:
        raise ValidationError(f"config N={cfg.N} does not match schedule N={schedule.N}")
    if cfg.kind is SamplerKind.SMLD and schedule.is_vp:
        raise ValidationError("SMLD sampling requires a VE schedule")
    if cfg.kind is not SamplerKind.SMLD and not schedule.is_vp:
        raise ValidationError(f"{cfg.kind.value} sampling requires a VP schedule")
    _check_op(op, x0_init.shape)

    rng_fwd = rng.substream(STREAM_FORWARD)
    rng_rev = rng.substream(STREAM_REVERSE)
    rng_con = rng.substream(STREAM_CONSISTENCY)
    rng_cor = rng.substream(STREAM_CORRECTOR)

    n_prime = cfg.n_prime
    x = forward_diffuse(x0_init, n_prime, schedule, rng_fwd)
    for i in range(n_prime, 0, -1):
        if cfg.kind is SamplerKind.DDPM:
            x = reverse_step_ddpm(x, i, schedule, oracle, rng_rev)
        elif cfg.kind is SamplerKind.DDIM:
            x = reverse_step_ddim(x, i, schedule, oracle)
        else:
            x = reverse_step_smld(x, i, schedule, oracle, rng_rev)
        if cfg.consistency_every_step:
            x = op.apply(x, i, rng_con)
            if cfg.kind is SamplerKind.SMLD:
                x = langevin_corrector(x, i, schedule, oracle, cfg.corrector_r,
                                       rng_cor, squared_step=cfg.corrector_squared_step)
                x = op.apply(x, i, rng_con)
    if not cfg.consistency_every_step:
        x = op.apply(x, 1, rng_con)
    return x
