"""Non-expansive affine data-consistency operators.

Each operator implements x = A x' + b_i where A = I - P for an orthogonal
projection P onto the measured subspace, so A itself is an orthogonal
projection: A^2 = A, A^T = A, and sigma_max(A) <= 1 with equality unless the
measurement is complete.  The offset b_i re-injects the measurement, either
as a forward-diffused copy (super-resolution, inpainting) or as the constant
zero-filled reconstruction (MRI k-space).

Operators are immutable after construction and their ``apply`` is reentrant;
the per-step randomness for b_i comes from the caller's RNG stream, keeping
the operators themselves stateless.
"""

from __future__ import annotations

import numpy as np

try:  # scipy's pocketfft releases the GIL and threads across the batch
    from scipy import fft as _fft_backend
    _FFT_WORKERS = {"workers": -1}
except ImportError:  # pragma: no cover - numpy fallback
    _fft_backend = np.fft
    _FFT_WORKERS = {}

from .errors import NumericFailure, ValidationError
from .rng import RngStream
from .schedules import SamplerKind, Schedule, check_step_index, forward_coeffs


def _fft2(x):
    return _fft_backend.fft2(x, axes=(-2, -1), norm="ortho", **_FFT_WORKERS)


def _ifft2(x):
    return _fft_backend.ifft2(x, axes=(-2, -1), norm="ortho", **_FFT_WORKERS)


class ConsistencyOp:
    """Affine map x -> A x' + b_i with a non-expansive linear part.

    Subclasses provide ``apply_linear`` (the action of A) and ``offset``
    (the vector b_i, possibly drawn from the supplied RNG).  ``tau`` is the
    exact trace ratio Tr(A^T A)/n when a closed form exists, else None and
    ``hutchinson_tau`` can estimate it.
    """

    def __init__(self, shape, tau, description):
        self.shape = tuple(int(s) for s in shape)
        self.n = int(np.prod(self.shape))
        self.tau = None if tau is None else float(tau)
        self.description = str(description)
        self.sigma_max_cert = None

    def apply_linear(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def offset(self, i: int, rng: RngStream | None, batch_shape: tuple = ()):
        """The offset b_i; deterministic operators ignore the RNG."""
        raise NotImplementedError

    def apply(self, x: np.ndarray, i: int, rng: RngStream | None) -> np.ndarray:
        return self.apply_linear(np.asarray(x, dtype=np.float64)) + self.offset(i, rng)

    def vanilla_init(self) -> np.ndarray:
        """The corrupted measurement embedded in image space (used as x0)."""
        raise NotImplementedError

    def __repr__(self):
        return f"<{type(self).__name__} {self.description} shape={self.shape}>"


class IdentityOp(ConsistencyOp):
    """A = I, b = 0: no measurement is enforced (tau = 1)."""

    def __init__(self, shape, measurement=None):
        super().__init__(shape, tau=1.0, description="identity")
        self.measurement = None if measurement is None else \
            np.asarray(measurement, dtype=np.float64)

    def apply_linear(self, x):
        return np.asarray(x, dtype=np.float64)

    def offset(self, i, rng, batch_shape=()):
        return 0.0

    def apply(self, x, i, rng):
        return np.asarray(x, dtype=np.float64)

    def vanilla_init(self):
        if self.measurement is None:
            raise ValidationError("identity operator was built without a measurement")
        return self.measurement


class _DiffusedAnchorOp(ConsistencyOp):
    """Shared machinery for operators whose b_i is a forward-diffused measurement."""

    def __init__(self, shape, tau, description, measurement, schedule, kind):
        super().__init__(shape, tau, description)
        self.measurement = np.asarray(measurement, dtype=np.float64)
        if self.measurement.shape != self.shape:
            raise ValidationError(
                f"measurement shape {self.measurement.shape} != operator shape {self.shape}"
            )
        if kind is SamplerKind.SMLD and schedule.is_vp:
            raise ValidationError("SMLD anchors need a VE schedule")
        if kind is not SamplerKind.SMLD and not schedule.is_vp:
            raise ValidationError(f"{kind.value} anchors need a VP schedule")
        self.schedule = schedule
        self.kind = kind

    def diffused_measurement(self, i, rng, batch_shape=()):
        """x_hat_i = a_i x_hat_0 + b_i z with z drawn once from rng."""
        check_step_index(self.schedule, i)
        c = forward_coeffs(self.schedule, i)
        if rng is None:
            z = 0.0
        else:
            z = rng.normal(tuple(batch_shape) + self.shape)
        return c.a * self.measurement + c.b * z


class SrOp(_DiffusedAnchorOp):
    """Super-resolution consistency: A = I - P with P = block-mean then replicate.

    P averages each D x D block and broadcasts the mean back, which is an
    exact orthogonal projection (idempotent and symmetric), so tau has the
    closed form 1 - 1/D^2.  The offset is the forward-diffused measurement
    itself; block-constant measurements are fixed points of P.
    """

    def __init__(self, factor, measurement, schedule, kind):
        measurement = np.asarray(measurement, dtype=np.float64)
        if measurement.ndim != 2:
            raise ValidationError("super-resolution expects a 2D image")
        D = int(factor)
        if D < 1:
            raise ValidationError(f"downsampling factor must be >= 1, got {factor}")
        H, W = measurement.shape
        if H % D or W % D:
            raise ValidationError(
                f"image sides {(H, W)} must be divisible by the factor {D}"
            )
        super().__init__(measurement.shape, 1.0 - 1.0 / (D * D),
                         f"sr factor={D}", measurement, schedule, kind)
        self.factor = D

    def project(self, x):
        """Apply P: per-block mean, replicated back to full resolution."""
        x = np.asarray(x, dtype=np.float64)
        D = self.factor
        H, W = self.shape
        lead = x.shape[:-2]
        xv = x.reshape(lead + (H // D, D, W // D, D))
        m = xv.mean(axis=(-3, -1), keepdims=True)
        return np.broadcast_to(m, xv.shape).reshape(x.shape)

    def apply_linear(self, x):
        x = np.asarray(x, dtype=np.float64)
        return x - self.project(x)

    def offset(self, i, rng, batch_shape=()):
        return self.diffused_measurement(i, rng, batch_shape)

    def vanilla_init(self):
        return self.measurement


class InpaintOp(_DiffusedAnchorOp):
    """Inpainting consistency: P is diagonal 0/1 on the measured pixels.

    b_i = P x_hat_i replaces the measured pixels by a forward-diffused copy
    of the measurement; unmeasured pixels pass through untouched.
    """

    def __init__(self, mask, measurement, schedule, kind):
        mask = np.asarray(mask, dtype=bool)
        measurement = np.asarray(measurement, dtype=np.float64)
        if mask.shape != measurement.shape:
            raise ValidationError(
                f"mask shape {mask.shape} != measurement shape {measurement.shape}"
            )
        m = int(mask.sum())
        if m == 0:
            raise ValidationError(
                "empty mask: nothing is measured (that would be unconditional sampling)"
            )
        n = mask.size
        super().__init__(mask.shape, (n - m) / n, f"inpaint kept={m}/{n}",
                         measurement, schedule, kind)
        self.mask = mask
        self.kept = m

    def apply_linear(self, x):
        return np.where(self.mask, 0.0, np.asarray(x, dtype=np.float64))

    def offset(self, i, rng, batch_shape=()):
        return np.where(self.mask, self.diffused_measurement(i, rng, batch_shape), 0.0)

    def vanilla_init(self):
        return np.where(self.mask, self.measurement, 0.0)


class MriOp(ConsistencyOp):
    """Compressed-sensing MRI consistency: A = I - F^-1 D F, b = F^-1 D y.

    F is the unitary 2D DFT, D keeps the sampled k-space locations, and y is
    the measured k-space (zero off the mask support).  The internal
    arithmetic is complex; the sampler state is real, so ``apply`` returns
    the real part.  For conjugate-symmetric masks and y from a real image
    the imaginary residual is at roundoff level and A restricted to real
    images is an orthogonal projection with tau = (n - m)/n.
    """

    def __init__(self, mask, y):
        mask = np.asarray(mask, dtype=bool)
        y = np.asarray(y, dtype=np.complex128)
        if mask.ndim != 2:
            raise ValidationError("MRI sampling mask must be 2D")
        if y.shape != mask.shape:
            raise ValidationError(f"k-space shape {y.shape} != mask shape {mask.shape}")
        m = int(mask.sum())
        if m == 0:
            raise ValidationError("empty k-space mask")
        n = mask.size
        super().__init__(mask.shape, (n - m) / n, f"mri kept={m}/{n}")
        self.mask = mask
        self.y = np.where(mask, y, 0.0)
        self._zero_filled = np.fft.ifft2(self.y, norm="ortho")  # one-off, any backend

    def apply_linear_complex(self, x):
        x = np.asarray(x)
        k = _fft2(x)
        return x - _ifft2(np.where(self.mask, k, 0.0))

    def apply_linear(self, x):
        x = np.asarray(x, dtype=np.float64)
        # Real input: Re(x - F^-1 D F x) = x - Re(F^-1 D F x).
        return x - _ifft2(np.where(self.mask, _fft2(x), 0.0)).real

    def offset(self, i, rng, batch_shape=()):
        return self._zero_filled.real

    def apply_complex(self, x, i, rng):
        return self.apply_linear_complex(x) + self._zero_filled

    def residual(self, x) -> float:
        """Relative consistency residual ||D F x - y|| / ||y|| on the mask support."""
        k = _fft2(np.asarray(x))
        num = np.linalg.norm(np.where(self.mask, k - self.y, 0.0))
        den = np.linalg.norm(self.y)
        return float(num / den) if den > 0 else float(num)

    def vanilla_init(self):
        return self._zero_filled.real


def mri_measure(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Sample the unitary-DFT k-space of a real image: y = D F(image)."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if image.shape != mask.shape:
        raise ValidationError(f"image shape {image.shape} != mask shape {mask.shape}")
    return np.where(mask, np.fft.fft2(image, norm="ortho"), 0.0)


def sr_projection(factor: int, measurement: np.ndarray, schedule: Schedule,
                  kind: SamplerKind) -> SrOp:
    """Build the super-resolution consistency operator (see SrOp)."""
    return SrOp(factor, measurement, schedule, kind)


def inpaint_projection(mask: np.ndarray, measurement: np.ndarray,
                       schedule: Schedule, kind: SamplerKind) -> InpaintOp:
    """Build the inpainting consistency operator (see InpaintOp)."""
    return InpaintOp(mask, measurement, schedule, kind)


def mri_projection(mask: np.ndarray, y: np.ndarray) -> MriOp:
    """Build the MRI k-space consistency operator (see MriOp)."""
    return MriOp(mask, y)


def gaussian1d_mask(shape, accel: float, acs_fraction: float,
                    seed: int) -> np.ndarray:
    """Gaussian-1D k-space sampling mask over phase-encode columns.

    A centered band of round(acs_fraction * W) columns is always kept (the
    auto-calibrating region); the remaining budget of ~W/accel total columns
    is drawn without replacement, in mirrored (+k, -k) pairs so the mask is
    symmetric under frequency negation, with probability decaying as a
    Gaussian in the column frequency.  Returned in unshifted FFT ordering.
    """
    H, W = (int(s) for s in shape)
    if H < 1 or W < 2:
        raise ValidationError(f"mask shape must be at least (1, 2), got {(H, W)}")
    if accel < 1.0:
        raise ValidationError("acceleration factor must be >= 1")
    if not 0.0 < acs_fraction <= 1.0:
        raise ValidationError("acs fraction must lie in (0, 1]")
    target = max(1, int(round(W / accel)))
    # The ACS band is forced to an odd column count so it stays symmetric
    # under frequency negation (required for real-output reconstruction).
    n_acs = min(W, max(1, int(round(acs_fraction * W))))
    if n_acs % 2 == 0:
        n_acs = min(W - 1 if W % 2 == 0 else W, n_acs + 1)
    half_acs = (n_acs - 1) // 2
    # Centered (shifted) column frequencies: k = -(W//2) .. W - W//2 - 1.
    k = np.arange(W) - W // 2
    keep = np.abs(k) <= half_acs
    n_random = max(0, target - int(keep.sum()))
    # Candidate mirrored pairs (+k, -k) outside the ACS band; the Nyquist
    # column of an even grid is self-conjugate and is left unsampled.
    pair_k = np.arange(half_acs + 1, (W - 1) // 2 + 1)
    if pair_k.size and n_random > 0:
        gen = RngStream(int(seed), (0x6D61736B,)).generator()
        sigma_cols = W / 6.0
        weights = np.exp(-(pair_k.astype(np.float64) ** 2) / (2.0 * sigma_cols ** 2))
        weights = weights / weights.sum()
        n_pairs = min(pair_k.size, int(round(n_random / 2.0)))
        if n_pairs > 0:
            chosen = gen.choice(pair_k, size=n_pairs, replace=False, p=weights)
            center = W // 2
            keep[center + chosen] = True
            keep[center - chosen] = True
    cols = np.fft.ifftshift(keep)
    return np.broadcast_to(cols[None, :], (H, W)).copy()


def is_conjugate_symmetric(mask: np.ndarray) -> bool:
    """True when mask[i, j] == mask[-i mod H, -j mod W] for all entries."""
    mask = np.asarray(mask, dtype=bool)
    flipped = np.roll(np.flip(mask, axis=tuple(range(mask.ndim))), 1,
                      axis=tuple(range(mask.ndim)))
    return bool(np.array_equal(mask, flipped))


def hutchinson_tau(apply_linear, shape, n_probes: int = 256,
                   rng: RngStream | None = None, seed: int = 0):
    """Randomized estimate of Tr(A^T A)/n via Rademacher probes.

    Uses the identity v^T A^T A v = ||A v||^2, so only forward applications
    of A are needed.  Returns (estimate, standard error).
    """
    if n_probes < 2:
        raise ValidationError("need at least 2 probes for a standard error")
    if rng is None:
        rng = RngStream(seed, (0x74726163,))
    n = int(np.prod(shape))
    gen = rng.generator()
    samples = np.empty(n_probes)
    for j in range(n_probes):
        v = gen.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
        av = np.asarray(apply_linear(v))
        samples[j] = np.vdot(av, av).real / n
    est = float(np.mean(samples))
    se = float(np.std(samples, ddof=1) / np.sqrt(n_probes))
    return est, se


NONEXPANSIVE_SLACK = 1e-6


def certify_nonexpansive(op: ConsistencyOp, trials: int = 64,
                         rng: RngStream | None = None) -> float:
    """Certify sigma_max(A) <= 1 + 1e-6 by power iteration plus pair checks.

    Power iteration (>= 50 iterations, a few random restarts) estimates the
    spectral norm of the linear part; ``trials`` random pairs additionally
    verify ||A x - A x'|| <= ||x - x'|| directly.  The estimate is cached on
    ``op.sigma_max_cert``.  Raises NumericFailure when the certificate fails.
    """
    if rng is None:
        rng = RngStream(0, (0x63657274,))
    gen = rng.generator()
    shape = op.shape
    best = 0.0
    for _ in range(3):  # restarts guard against unlucky starting vectors
        v = gen.standard_normal(shape)
        nv = np.linalg.norm(v)
        if nv == 0.0:
            continue
        v = v / nv
        est = 0.0
        for _ in range(50):
            av = np.asarray(op.apply_linear(v), dtype=np.float64)
            nav = np.linalg.norm(av)
            if nav < 1e-300:
                est = 0.0
                break
            est = nav
            v = av / nav
        best = max(best, est)
    for _ in range(max(0, int(trials))):
        x = gen.standard_normal(shape)
        xp = gen.standard_normal(shape)
        lhs = np.linalg.norm(np.asarray(op.apply_linear(x - xp)))
        rhs = np.linalg.norm(x - xp)
        if lhs > rhs * (1.0 + NONEXPANSIVE_SLACK):
            raise NumericFailure(
                f"operator {op.description} is expansive on a random pair: "
                f"{lhs:.12g} > {rhs:.12g}"
            )
        if rhs > 0:
            best = max(best, lhs / rhs)
    if best > 1.0 + NONEXPANSIVE_SLACK:
        raise NumericFailure(
            f"operator {op.description} failed the non-expansiveness certificate: "
            f"sigma_max estimate {best:.12g} > 1 + {NONEXPANSIVE_SLACK}"
        )
    op.sigma_max_cert = float(best)
    return float(best)
