"""
perturbation.py
Orthogonal and statistically orthogonal perturbation generators.

Every scheme emits one vector of P perturbations per step through
next_perturbation(); no emitted value exceeds delta_theta in magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.linalg import hadamard

DEFAULT_DELTA_THETA = 0.01
DEFAULT_BANDWIDTH = 0.3


class PerturbationKind(Enum):
    SINUSOIDAL = "sinusoidal"
    SEQUENTIAL = "sequential"
    WALSH = "walsh"
    RANDOM = "random"


@dataclass(frozen=True, eq=False)
class PerturbationScheme:
    kind: PerturbationKind
    n_params: int
    delta_theta: float = DEFAULT_DELTA_THETA
    tau_p: float = 1                        # steps per refresh; 1/bandwidth for sinusoidal
    frequencies: np.ndarray | None = None   # sinusoidal only
    dt: float = 1.0
    codes: np.ndarray | None = None         # walsh only, shape (P, L)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if self.n_params < 1:
            raise ValueError(f"need at least one parameter, got {self.n_params}")
        if not self.delta_theta > 0:
            raise ValueError(f"delta_theta must be positive, got {self.delta_theta}")
        if not self.tau_p > 0:
            raise ValueError(f"tau_p must be positive, got {self.tau_p}")

        if self.kind is PerturbationKind.SINUSOIDAL:
            if self.frequencies is None:
                raise ValueError("sinusoidal scheme needs frequencies")
            freqs = np.asarray(self.frequencies, dtype=float)
            if freqs.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} frequencies, got {freqs.shape}")
            if np.unique(freqs).size != freqs.size:
                raise ValueError("sinusoidal frequencies must be distinct")
            object.__setattr__(self, "frequencies", freqs)
        else:
            if float(self.tau_p) != int(self.tau_p):
                raise ValueError(f"tau_p must be a whole number of steps, got {self.tau_p}")
            object.__setattr__(self, "tau_p", int(self.tau_p))

        if self.kind is PerturbationKind.WALSH:
            codes = walsh_codes(self.n_params) if self.codes is None else np.asarray(self.codes, dtype=float)
            if codes.ndim != 2 or codes.shape[0] != self.n_params:
                raise ValueError(f"walsh codes must have {self.n_params} rows, got shape {codes.shape}")
            object.__setattr__(self, "codes", codes)

    @property
    def bandwidth(self) -> float | None:
        if self.kind is not PerturbationKind.SINUSOIDAL:
            return None
        return float(self.frequencies.max() - self.frequencies.min())

    @property
    def period(self) -> int | None:
        """Steps after which the emitted sequence repeats (None when it never does)."""
        if self.kind is PerturbationKind.SEQUENTIAL:
            return self.n_params * self.tau_p
        if self.kind is PerturbationKind.WALSH:
            return self.codes.shape[1] * self.tau_p
        return None


@dataclass
class PerturbationState:
    n: int = 0
    index: int = 0                           # sequential: parameter currently perturbed
    phase: np.ndarray | None = None          # sinusoidal: 2*pi*f*n*dt
    current: np.ndarray | None = None
    rng: np.random.Generator | None = field(default=None, repr=False)


# ── Construction ─────────────────────────────────────────────────────────────

def walsh_codes(n_params: int) -> np.ndarray:
    """Rows 1..P of a Sylvester Hadamard matrix of order L, the smallest power of two >= P+1.

    Row 0 (all ones) is skipped so every code has zero mean over L steps.
    """
    if n_params < 1:
        raise ValueError(f"need at least one parameter, got {n_params}")
    length = 1 << n_params.bit_length()
    return hadamard(length)[1:n_params + 1].astype(float)


def assign_frequencies(n_params: int, bandwidth: float, dt: float = 1.0) -> np.ndarray:
    """P equally spaced tones in (0, bandwidth], spacing bandwidth/P."""
    if n_params < 1:
        raise ValueError(f"need at least one parameter, got {n_params}")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    nyquist = 1.0 / (2.0 * dt)
    if bandwidth >= nyquist:
        raise ValueError(f"bandwidth {bandwidth} reaches the Nyquist limit {nyquist} for dt={dt}")
    return bandwidth * np.arange(1, n_params + 1) / n_params


def sinusoidal_scheme(n_params: int, bandwidth: float = DEFAULT_BANDWIDTH, dt: float = 1.0,
                      delta_theta: float = DEFAULT_DELTA_THETA) -> PerturbationScheme:
    freqs = assign_frequencies(n_params, bandwidth, dt)
    return PerturbationScheme(PerturbationKind.SINUSOIDAL, n_params, delta_theta,
                              tau_p=1.0 / bandwidth, frequencies=freqs, dt=dt)


def sequential_scheme(n_params: int, delta_theta: float = DEFAULT_DELTA_THETA,
                      tau_p: int = 1) -> PerturbationScheme:
    return PerturbationScheme(PerturbationKind.SEQUENTIAL, n_params, delta_theta, tau_p)


def walsh_scheme(n_params: int, delta_theta: float = DEFAULT_DELTA_THETA,
                 tau_p: int = 1) -> PerturbationScheme:
    return PerturbationScheme(PerturbationKind.WALSH, n_params, delta_theta, tau_p,
                              codes=walsh_codes(n_params))


def random_scheme(n_params: int, delta_theta: float = DEFAULT_DELTA_THETA,
                  tau_p: int = 1, seed: int = 0) -> PerturbationScheme:
    return PerturbationScheme(PerturbationKind.RANDOM, n_params, delta_theta, tau_p, seed=seed)


def make_scheme(kind: PerturbationKind | str, n_params: int, *, delta_theta: float = DEFAULT_DELTA_THETA,
                tau_p: int = 1, bandwidth: float = DEFAULT_BANDWIDTH, dt: float = 1.0,
                seed: int = 0) -> PerturbationScheme:
    kind = PerturbationKind(kind)
    if kind is PerturbationKind.SINUSOIDAL:
        return sinusoidal_scheme(n_params, bandwidth, dt, delta_theta)
    if kind is PerturbationKind.SEQUENTIAL:
        return sequential_scheme(n_params, delta_theta, tau_p)
    if kind is PerturbationKind.WALSH:
        return walsh_scheme(n_params, delta_theta, tau_p)
    return random_scheme(n_params, delta_theta, tau_p, seed)


# ── Stepping ─────────────────────────────────────────────────────────────────

def new_state(scheme: PerturbationScheme, seed: int | None = None) -> PerturbationState:
    """Fresh state at n = 0. The run seed is mixed with the scheme seed for random codes."""
    rng = None
    if scheme.kind is PerturbationKind.RANDOM:
        entropy = scheme.seed if seed is None else [scheme.seed, seed]
        rng = np.random.default_rng(entropy)
    return PerturbationState(current=np.zeros(scheme.n_params), rng=rng)


def next_perturbation(scheme: PerturbationScheme, state: PerturbationState,
                      n_params: int | None = None) -> np.ndarray:
    """Perturbation vector for step state.n, then advance the state by one step."""
    if n_params is not None and n_params != scheme.n_params:
        raise ValueError(f"scheme perturbs {scheme.n_params} parameters, caller has {n_params}")
    n = state.n
    dtheta = scheme.delta_theta

    if scheme.kind is PerturbationKind.SINUSOIDAL:
        state.phase = 2.0 * math.pi * scheme.frequencies * (n * scheme.dt)
        state.current = dtheta * np.sin(state.phase)
    elif n % scheme.tau_p == 0:
        block = n // scheme.tau_p
        if scheme.kind is PerturbationKind.SEQUENTIAL:
            state.index = block % scheme.n_params
            current = np.zeros(scheme.n_params)
            current[state.index] = dtheta
            state.current = current
        elif scheme.kind is PerturbationKind.WALSH:
            state.current = dtheta * scheme.codes[:, block % scheme.codes.shape[1]]
        else:
            signs = state.rng.integers(0, 2, size=scheme.n_params) * 2 - 1
            state.current = dtheta * signs.astype(float)

    state.n = n + 1
    return state.current.copy()


def perturbation_matrix(scheme: PerturbationScheme, steps: int, seed: int | None = None) -> np.ndarray:
    """The first `steps` emitted vectors stacked as rows, shape (steps, P)."""
    state = new_state(scheme, seed)
    return np.stack([next_perturbation(scheme, state) for _ in range(steps)])


class OrthogonalityReport(NamedTuple):
    max_correlation: float
    max_mean: float


def orthogonality_report(scheme: PerturbationScheme, n_params: int, window: int,
                         seed: int | None = None) -> OrthogonalityReport:
    """Largest |normalized pairwise correlation| and largest |time mean|/delta_theta over `window` steps."""
    if window < 1:
        raise ValueError(f"window must be at least one step, got {window}")
    if n_params != scheme.n_params:
        raise ValueError(f"scheme perturbs {scheme.n_params} parameters, caller has {n_params}")
    # Code schemes become exact +-1 here, so their sums are exact integers.
    signals = perturbation_matrix(scheme, window, seed) / scheme.delta_theta

    gram = signals.T @ signals
    norms = np.sqrt(np.diag(gram))
    scale = np.outer(norms, norms)
    corr = np.divide(gram, scale, out=np.zeros_like(gram), where=scale > 0)
    np.fill_diagonal(corr, 0.0)
    max_corr = float(np.max(np.abs(corr))) if n_params > 1 else 0.0
    max_mean = float(np.max(np.abs(signals.mean(axis=0))))
    return OrthogonalityReport(max_corr, max_mean)
