"""Empirical Koopman predictors fitted from snapshot data.

Three interchangeable backends share one estimator:

``dmd``
    Exact DMD on a truncated SVD of the snapshot pairs.
``arnoldi``
    Companion-matrix (Krylov) DMD: the newest snapshot is expressed as a
    least-squares combination of the ``r`` snapshots before it.
``hankel``
    Exact DMD on a delay-embedded (Hankel) snapshot matrix; modes are read
    off the first block row, i.e. the physical coordinates.

Estimators follow the scikit-learn convention: ``X`` has shape
``(n_steps, n_sensors)``.
"""

import csv

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_positive_float, check_positive_int, check_snapshots

BACKENDS = ("dmd", "arnoldi", "hankel")
_BACKEND_ALIASES = {"hankel_dmd": "hankel"}

# eigenvalues this small are treated as numerical noise and dropped
_EIG_FLOOR = 1e-12


def normalize_backend(backend):
    backend = _BACKEND_ALIASES.get(backend, backend)
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    return backend


def hankel_embed(D, delay):
    """Stack ``delay`` time-shifted copies of ``D`` (sensors x time).

    Returns a ``(delay * p, m - delay + 1)`` matrix whose block row ``i`` is
    ``D[:, i : i + m - delay + 1]``.
    """
    p, m = D.shape
    n_cols = m - delay + 1
    if n_cols < 1:
        raise ValueError(f"delay {delay} exceeds the {m} available time steps")
    return np.vstack([D[:, i:i + n_cols] for i in range(delay)])


def select_rank(s, rank_energy, max_rank, atol=0.0):
    """Smallest rank whose cumulative singular-value energy reaches ``rank_energy``.

    Singular values at or below the machine-scaled floor (or ``atol``) never
    count.  Returns 0 when nothing survives the floor.
    """
    if s.size == 0 or s[0] == 0:
        return 0
    floor = max(s[0] * max(s.size, 1) * np.finfo(float).eps, atol)
    s = s[s > floor]
    if s.size == 0:
        return 0
    energy = np.cumsum(s ** 2) / np.sum(s ** 2)
    # rank_energy=1.0 must still select the full numerical rank despite roundoff
    r = int(np.searchsorted(energy, rank_energy - 1e-12)) + 1
    return min(r, s.size, max_rank)


def _exact_dmd(D, rank_energy, max_rank, atol):
    X0, X1 = D[:, :-1], D[:, 1:]
    U, s, Vh = np.linalg.svd(X0, full_matrices=False)
    r = select_rank(s, rank_energy, max_rank, atol)
    if r == 0:
        return None
    Ur, sr, Vr = U[:, :r], s[:r], Vh[:r].conj().T
    B = X1 @ Vr / sr
    A_tilde = Ur.conj().T @ B
    eigenvalues, W = np.linalg.eig(A_tilde)
    modes = B @ W
    return eigenvalues, modes, r


def _companion_dmd(D, rank_energy, max_rank, atol):
    p, m = D.shape
    s = np.linalg.svd(D[:, :-1], compute_uv=False)
    r = select_rank(s, rank_energy, max_rank, atol)
    if r == 0:
        return None
    r = min(r, m - 1)
    K = D[:, m - r - 1:]
    basis, target = K[:, :r], K[:, r]
    coeffs = np.linalg.lstsq(basis, target, rcond=None)[0]
    companion = np.zeros((r, r))
    companion[1:, :-1] = np.eye(r - 1)
    companion[:, -1] = coeffs
    eigenvalues, Y = np.linalg.eig(companion)
    # columns of Y are proportional to the columns of the inverse Vandermonde
    # matrix, so these are the Vandermonde-weighted snapshot combinations
    modes = basis @ Y
    return eigenvalues, modes, r


class KoopmanDMD(BaseEstimator):
    """Linear Koopman predictor with modes, eigenvalues and amplitudes.

    Parameters
    ----------
    backend : {"dmd", "arnoldi", "hankel"}, default="dmd"
        Fitting algorithm. ``"hankel_dmd"`` is accepted as an alias.
    rank_energy : float, default=0.999
        Fraction of singular-value energy the truncation must retain.
    max_rank : int, default=30
        Upper bound on the truncation rank.
    delay : int, default=10
        Embedding depth for the hankel backend; ignored otherwise.
    svd_atol : float, default=0.0
        Absolute floor below which singular values are discarded. When no
        singular value survives, the fit yields a zero-dynamics model.
    sample_period : float, default=1.0
        Time between snapshots, only used for continuous-time frequencies.

    Attributes
    ----------
    eigenvalues_ : ndarray of shape (r,)
    modes_ : ndarray of shape (n_sensors, r)
        Koopman modes in the physical coordinates.
    amplitudes_ : ndarray of shape (r,)
        Mode amplitudes at the first fitted snapshot.
    rank_ : int
    zero_dynamics_ : bool
        True when the data carried no resolvable dynamics (rank collapse).
    """

    def __init__(self, backend="dmd", rank_energy=0.999, max_rank=30, delay=10,
                 svd_atol=0.0, sample_period=1.0):
        self.backend = backend
        self.rank_energy = rank_energy
        self.max_rank = max_rank
        self.delay = delay
        self.svd_atol = svd_atol
        self.sample_period = sample_period

    def _validate_params(self):
        backend = normalize_backend(self.backend)
        if not 0 < self.rank_energy <= 1:
            raise ValueError(f"rank_energy must lie in (0, 1], got {self.rank_energy}")
        check_positive_int(self.max_rank, "max_rank")
        if backend == "hankel":
            check_positive_int(self.delay, "delay")
        check_positive_float(self.svd_atol, "svd_atol", strict=False)
        check_positive_float(self.sample_period, "sample_period")
        return backend

    def fit(self, X, y=None):
        backend = self._validate_params()
        min_steps = self.delay + 2 if backend == "hankel" else 2
        X = check_snapshots(X, min_steps=min_steps)
        D = X.T
        self.n_features_in_ = D.shape[0]
        self.n_snapshots_ = D.shape[1]
        self.backend_ = backend

        if backend == "hankel":
            lifted = hankel_embed(D, self.delay)
        else:
            lifted = D
        if backend == "arnoldi":
            result = _companion_dmd(lifted, self.rank_energy, self.max_rank, self.svd_atol)
        else:
            result = _exact_dmd(lifted, self.rank_energy, self.max_rank, self.svd_atol)

        if result is None:
            self._set_zero_dynamics()
            return self
        eigenvalues, lifted_modes, rank = result
        keep = np.abs(eigenvalues) > _EIG_FLOOR
        eigenvalues, lifted_modes = eigenvalues[keep], lifted_modes[:, keep]
        if eigenvalues.size == 0:
            self._set_zero_dynamics()
            return self

        norms = np.linalg.norm(lifted_modes, axis=0)
        lifted_modes = lifted_modes / np.where(norms > 0, norms, 1.0)
        self.zero_dynamics_ = False
        self.rank_ = rank
        self.eigenvalues_ = eigenvalues
        self.modes_ = lifted_modes[:self.n_features_in_]
        self.amplitudes_ = np.linalg.lstsq(lifted_modes, lifted[:, 0], rcond=None)[0]
        # amplitudes re-anchored at the newest lifted snapshot, for forecasting;
        # its first block row lags the final time step by delay - 1
        self._anchor_amplitudes = np.linalg.lstsq(lifted_modes, lifted[:, -1],
                                                  rcond=None)[0]
        self._anchor_offset = self.delay - 1 if backend == "hankel" else 0
        return self

    def _set_zero_dynamics(self):
        self.zero_dynamics_ = True
        self.rank_ = 0
        self.eigenvalues_ = np.zeros(0, dtype=complex)
        self.modes_ = np.zeros((self.n_features_in_, 0), dtype=complex)
        self.amplitudes_ = np.zeros(0, dtype=complex)
        self._anchor_amplitudes = np.zeros(0, dtype=complex)
        self._anchor_offset = 0

    @classmethod
    def from_components(cls, eigenvalues, modes, amplitudes, **params):
        """Build a fitted model directly from its spectral triplet."""
        model = cls(**params)
        eigenvalues = np.atleast_1d(np.asarray(eigenvalues, dtype=complex))
        modes = np.asarray(modes, dtype=complex)
        if modes.ndim == 1:
            modes = modes[:, None]
        amplitudes = np.atleast_1d(np.asarray(amplitudes, dtype=complex))
        if not modes.shape[1] == eigenvalues.size == amplitudes.size:
            raise ValueError("eigenvalues, mode columns and amplitudes must agree in count")
        model.backend_ = normalize_backend(model.backend)
        model.n_features_in_ = modes.shape[0]
        model.n_snapshots_ = 1
        model.zero_dynamics_ = eigenvalues.size == 0
        model.rank_ = eigenvalues.size
        model.eigenvalues_ = eigenvalues
        model.modes_ = modes
        model.amplitudes_ = amplitudes
        model._anchor_amplitudes = amplitudes
        model._anchor_offset = 0
        return model

    def _check_fitted(self):
        if not hasattr(self, "eigenvalues_"):
            raise NotFittedError("KoopmanDMD instance is not fitted yet; call fit first")

    def _evolve(self, amplitudes, steps, coherent=True):
        if self.zero_dynamics_:
            return np.zeros((steps.size, self.n_features_in_))
        with np.errstate(over="raise", invalid="raise"):
            try:
                powers = self.eigenvalues_[None, :] ** steps[:, None]
                if coherent:
                    out = (powers * amplitudes) @ self.modes_.T
                else:
                    out = (np.abs(powers) * np.abs(amplitudes)) @ np.abs(self.modes_).T
            except FloatingPointError as exc:
                raise FloatingPointError(
                    f"mode evolution overflowed within {int(steps.max())} steps "
                    f"(max |eigenvalue| = {np.abs(self.eigenvalues_).max():.6g})"
                ) from exc
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("mode evolution produced non-finite values")
        return out

    def predict(self, horizon):
        """Steps ``k = 1..horizon`` evolved from the first fitted snapshot.

        Returns an array of shape ``(horizon, n_sensors)``.
        """
        self._check_fitted()
        horizon = check_positive_int(horizon, "horizon")
        steps = np.arange(1, horizon + 1)
        return self._evolve(self.amplitudes_, steps).real

    def forecast(self, horizon):
        """The ``horizon`` steps following the last fitted snapshot."""
        self._check_fitted()
        horizon = check_positive_int(horizon, "horizon")
        steps = np.arange(1, horizon + 1) + self._anchor_offset
        return self._evolve(self._anchor_amplitudes, steps).real

    def reconstruct(self):
        """Model trajectory over the fitted snapshots, shape ``(n_snapshots, n_sensors)``."""
        self._check_fitted()
        steps = np.arange(self.n_snapshots_)
        return self._evolve(self.amplitudes_, steps).real

    def mode_amplitude_matrix(self, horizon, coherent=False):
        """Per-sensor modal magnitude over ``k = 1..horizon``.

        The default incoherent form sums ``|mode_i| * |eigenvalue|**k * |amplitude|``
        over modes and is non-negative by construction. ``coherent=True``
        returns the modulus of the complex reconstruction instead.
        Shape ``(horizon, n_sensors)``.
        """
        self._check_fitted()
        horizon = check_positive_int(horizon, "horizon")
        steps = np.arange(1, horizon + 1)
        if coherent:
            return np.abs(self._evolve(self.amplitudes_, steps))
        return self._evolve(self.amplitudes_, steps, coherent=False).real

    @property
    def frequencies_(self):
        """Continuous-time frequencies in Hz."""
        self._check_fitted()
        return np.angle(self.eigenvalues_) / (2 * np.pi * self.sample_period)

    @property
    def growth_rates_(self):
        self._check_fitted()
        return np.log(np.abs(self.eigenvalues_)) / self.sample_period

    def to_csv(self, path):
        """Debug dump of the spectral triplet, one row per mode."""
        self._check_fitted()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["eig_real", "eig_imag", "amp_real", "amp_imag",
                             *(f"mode_{i}_{part}" for i in range(self.n_features_in_)
                               for part in ("real", "imag"))])
            for j, lam in enumerate(self.eigenvalues_):
                amp = self.amplitudes_[j]
                mode = self.modes_[:, j]
                writer.writerow(["%.17g" % v for v in
                                 (lam.real, lam.imag, amp.real, amp.imag,
                                  *np.column_stack([mode.real, mode.imag]).ravel())])
