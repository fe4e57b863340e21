"""Differentially private gradient machinery and the privacy accountant.

The private update on a batch of sensitive sequences is the classic recipe:
clip each per-example gradient to L2 norm C, sum, add one spherical Gaussian
draw with per-coordinate std sigma*C, divide by the batch size, and take an
SGD step. Noise comes from a dedicated seeded stream, independent of data
shuffling, so runs are bit-reproducible.

Accounting: a single private step is (alpha, alpha/(2*sigma^2))-RDP. The
selective training budget composes this linearly over epochs and the
sensitive-set size and converts to (eps, delta)-DP by adding
log(1/delta)/(alpha-1); delta must exceed one minus the detector's
true-positive rate, because undetected sensitive sequences receive no
protection at all. A standard sequential-composition figure (per-step
epsilon times the number of private steps, then converted) is reported
alongside as a sanity reference; it is a different quantity, not a
replacement.

Natural logarithms throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lm
from .corpus import TokenSequence
from .lm import Gradient, LMParameters


class PrivacyError(ValueError):
    """Raised for invalid privacy parameters or misuse of the private step."""


@dataclass(frozen=True)
class PrivacySpec:
    """Noise multiplier, clipping bound, DP failure probability, RDP order, lr."""

    sigma: float
    clip_bound: float
    delta: float
    alpha: float
    eta: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise PrivacyError(f"sigma must be > 0, got {self.sigma}")
        if self.clip_bound <= 0:
            raise PrivacyError(f"clip_bound must be > 0, got {self.clip_bound}")
        if not (0.0 < self.delta < 1.0):
            raise PrivacyError(f"delta must be in (0, 1), got {self.delta}")
        if self.alpha <= 1:
            raise PrivacyError(f"alpha must be > 1, got {self.alpha}")


@dataclass
class AccountantState:
    """Inputs of the selective composition bound.

    ``epochs`` is the iteration count T of the training loop (counted in
    epochs, matching how the bound is stated), ``sensitive_count`` the number
    of training sequences routed to private updates, ``per_step_epsilon`` the
    order-``alpha`` RDP cost of one private step, and ``gamma`` the detector's
    measured true-positive rate.
    """

    epochs: int
    sensitive_count: int
    batch_size: int
    per_step_epsilon: float
    gamma: float
    alpha: float

    def __post_init__(self):
        if min(self.epochs, self.sensitive_count, self.batch_size) < 0:
            raise PrivacyError("accountant counts must be >= 0")
        if self.batch_size == 0:
            raise PrivacyError("batch_size must be > 0")
        if self.per_step_epsilon < 0:
            raise PrivacyError("per_step_epsilon must be >= 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise PrivacyError(f"gamma must be in [0, 1], got {self.gamma}")


def clip(g: Gradient, clip_bound: float) -> Gradient:
    """Scale ``g`` to L2 norm at most ``clip_bound``, preserving direction.

    The scaled norm is re-verified and the factor nudged down by ulps if
    rounding pushed it past the bound, so the norm contract holds exactly in
    float arithmetic and clipping is exactly idempotent.
    """
    if clip_bound <= 0:
        raise PrivacyError(f"clip bound must be > 0, got {clip_bound}")
    flat = g.flat()
    if not np.all(np.isfinite(flat)):
        raise PrivacyError("gradient contains non-finite entries")
    norm = float(np.linalg.norm(flat))
    if norm <= clip_bound:
        return g
    scale = clip_bound / norm
    while float(np.linalg.norm(flat * scale)) > clip_bound:
        scale = np.nextafter(scale, 0.0)
    return Gradient(*[a * scale for a in g.arrays()])


def clip_scales(stacked: np.ndarray, clip_bound: float) -> np.ndarray:
    """Per-example factors min(1, C/||g_i||) for stacked flat gradients (B, P).

    Like :func:`clip`, factors are nudged down by ulps where rounding would
    leave a scaled norm above the bound.
    """
    norms = np.linalg.norm(stacked, axis=1)
    # A non-finite entry anywhere makes its row norm inf or nan.
    if not np.all(np.isfinite(norms)):
        raise PrivacyError("gradient contains non-finite entries")
    with np.errstate(divide="ignore"):
        scales = np.minimum(1.0, np.where(norms > 0, clip_bound / norms, 1.0))
    clipped = scales < 1.0
    while clipped.any():
        over = np.zeros_like(clipped)
        over[clipped] = (
            np.linalg.norm(stacked[clipped] * scales[clipped, None], axis=1) > clip_bound
        )
        if not over.any():
            break
        scales[over] = np.nextafter(scales[over], 0.0)
        clipped = over
    return scales


def noisy_clipped_mean(
    stacked: np.ndarray, clip_bound: float, sigma: float, rng: np.random.Generator
) -> np.ndarray:
    """(sum of clipped gradients + one Gaussian draw) / batch size.

    The noise has per-coordinate std sigma*clip_bound and is drawn exactly
    once, so the result is an unbiased estimate of the clipped mean.
    """
    scales = clip_scales(stacked, clip_bound)
    total = scales @ stacked
    noise = rng.normal(0.0, sigma * clip_bound, size=stacked.shape[1])
    return (total + noise) / stacked.shape[0]


def _as_rng(noise: int | np.random.Generator) -> np.random.Generator:
    if isinstance(noise, np.random.Generator):
        return noise
    return np.random.default_rng(np.random.SeedSequence([int(noise)]))


def dp_sgd_step(
    params: LMParameters,
    batch_S: list[TokenSequence],
    spec: PrivacySpec,
    noise: int | np.random.Generator,
) -> LMParameters:
    """One private update on a batch of sensitive sequences.

    ``noise`` may be an integer seed or a live generator; passing the same
    generator across steps realizes one independent draw per step from a
    single stream.
    """
    if not batch_S:
        raise PrivacyError("dp_sgd_step requires a non-empty batch; skip the step instead")
    _, stacked = lm.batch_gradients(params, batch_S)
    update_flat = noisy_clipped_mean(stacked, spec.clip_bound, spec.sigma, _as_rng(noise))
    return lm.apply_update(params, Gradient.from_flat(update_flat, params), spec.eta)


def plain_sgd_step(params: LMParameters, batch: list[TokenSequence], eta: float) -> LMParameters:
    """Ordinary SGD on the batch mean gradient.

    Shares the reduction path of the private step (unit weights, no noise
    term), so the two coincide bit-for-bit when clipping is inactive and
    sigma is zero.
    """
    if not batch:
        raise PrivacyError("plain_sgd_step requires a non-empty batch")
    _, stacked = lm.batch_gradients(params, batch)
    scales = np.ones(stacked.shape[0])
    update_flat = (scales @ stacked) / stacked.shape[0]
    return lm.apply_update(params, Gradient.from_flat(update_flat, params), eta)


def gaussian_rdp_epsilon(sigma: float, alpha: float) -> float:
    """Order-alpha RDP of one clipped-and-noised step: alpha / (2 * sigma^2).

    This is the Renyi divergence of order alpha between unit-separated
    Gaussians with std sigma; the clipping bound cancels because the noise
    std is sigma times the bound.
    """
    if sigma <= 0:
        raise PrivacyError(f"sigma must be > 0, got {sigma}")
    if alpha <= 1:
        raise PrivacyError(f"alpha must be > 1, got {alpha}")
    return alpha / (2.0 * sigma * sigma)


def rdp_to_dp(eps_rdp: float, alpha: float, delta: float) -> float:
    """Convert (alpha, eps_rdp)-RDP to (eps, delta)-DP: add ln(1/delta)/(alpha-1)."""
    if alpha <= 1:
        raise PrivacyError(f"alpha must be > 1, got {alpha}")
    if not (0.0 < delta < 1.0):
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    if eps_rdp < 0:
        raise PrivacyError(f"eps_rdp must be >= 0, got {eps_rdp}")
    return eps_rdp + math.log(1.0 / delta) / (alpha - 1.0)


def selective_dp_budget(
    state: AccountantState, delta: float, audit_log: list | None = None
) -> tuple[float, float]:
    """Total (eps, delta)-DP of selective training, per the composition bound.

    eps = T * N_S * eps_step / |B| + ln(1/delta)/(alpha - 1), valid for any
    delta in (1 - gamma, 1): the detector misses a sensitive sequence with
    probability 1 - gamma, and a missed sequence is trained without noise, so
    no smaller failure probability can be honoured.

    If ``audit_log`` is given, the full input/output record is appended to it.
    """
    if delta >= 1.0 or delta <= 0.0:
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    floor = 1.0 - state.gamma
    if delta <= floor:
        raise PrivacyError(
            f"delta={delta} violates the detector true-positive-rate constraint: "
            f"delta must exceed 1 - gamma = {floor} (gamma={state.gamma})"
        )
    eps_total = (
        state.epochs * state.sensitive_count * state.per_step_epsilon / state.batch_size
        + math.log(1.0 / delta) / (state.alpha - 1.0)
    )
    if audit_log is not None:
        audit_log.append(
            {
                "epochs": state.epochs,
                "sensitive_count": state.sensitive_count,
                "batch_size": state.batch_size,
                "per_step_epsilon": state.per_step_epsilon,
                "gamma": state.gamma,
                "alpha": state.alpha,
                "delta": delta,
                "eps_total": eps_total,
            }
        )
    return eps_total, delta


def sequential_composition_budget(
    per_step_epsilon: float, num_private_steps: int, alpha: float, delta: float
) -> float:
    """Reference figure: plain sequential RDP composition over the private steps.

    Not the selective bound above; emitted alongside it so the unusual
    T*N_S/|B| scaling can be compared against the textbook composition.
    """
    if num_private_steps < 0:
        raise PrivacyError("num_private_steps must be >= 0")
    return rdp_to_dp(per_step_epsilon * num_private_steps, alpha, delta)
