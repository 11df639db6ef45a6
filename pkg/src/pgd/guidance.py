"""Observation/physics likelihoods, guidance gradients, and particle potentials.

The log-likelihood of a clean state is the weighted sum of three mean-square
terms: solution-observation misfit (weight beta), coefficient-observation
misfit (weight gamma), and the PDE residual (weight omega). Additive
constants are dropped throughout; only differences of log-likelihoods enter
the particle weights, so the dropped constant can never affect them.

At a noisy state the likelihood is evaluated at the denoiser's reconstruction.
Its gradient either chains through the denoiser's exact vjp
(jacobian_mode="exact") or treats the denoiser Jacobian as the identity
(jacobian_mode="identity", the convention of earlier guided-ODE solvers).

Two weighting schemes turn proposals into a particle system:

- "pbs": potentials are tempered likelihood ratios only; usable with any
  proposal, including ones without a point-evaluable density.
- "tds": adds the log-ratio of the unguided to the guided transition density,
  available only for proposals whose transition is an explicit Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field
from .priors import Denoiser
from .residuals import PdeSystem, StateLayout, residual_sq_grad, residual
from .solvers import Observations

JACOBIAN_MODES = ("exact", "identity")
SCHEMES = ("tds", "pbs")


@dataclass(frozen=True)
class GuidanceWeights:
    """Nonnegative weights of the likelihood terms plus the tempering exponent."""

    beta: float = 1.0
    gamma: float = 1.0
    omega: float = 1.0
    temper_rho: float = 1.0
    jacobian_mode: str = "exact"

    def __post_init__(self):
        for name in ("beta", "gamma", "omega", "temper_rho"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and nonnegative")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise ValueError(f"jacobian_mode must be one of {JACOBIAN_MODES}")


@dataclass(frozen=True)
class GuidanceContext:
    """Bundle of everything a guided step needs besides the state itself."""

    obs: Observations
    system: PdeSystem | None
    layout: StateLayout
    weights: GuidanceWeights


def _group_misfit(x: Field, mask, values, channels) -> tuple[float, int]:
    """Sum of squared observation errors over a channel group and the entry count."""
    idx = mask.flat_indices()
    if len(channels) == 0 or idx.size == 0:
        return 0.0, 0
    if values.shape != (len(channels), idx.size):
        raise ValueError("observation values do not match mask count and channel group")
    total = 0.0
    for row, c in enumerate(channels):
        diff = values[row] - x.values[c].reshape(-1)[idx]
        total += float(diff @ diff)
    return total, values.size


def log_likelihood(
    x0: Field,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
    w: GuidanceWeights,
) -> float:
    """Weighted negative mean-square misfits of a clean state (constant dropped)."""
    total = 0.0
    if w.beta > 0:
        sq, n = _group_misfit(x0, obs.mask_u, obs.values_u, layout.solution_channels)
        if n:
            total -= w.beta * sq / n
    if w.gamma > 0:
        sq, n = _group_misfit(x0, obs.mask_a, obs.values_a, layout.coeff_channels)
        if n:
            total -= w.gamma * sq / n
    if w.omega > 0:
        if system is None:
            raise ValueError("omega > 0 requires a PDE system")
        r = residual(system, layout, x0)
        total -= w.omega * float(np.mean(r.values**2))
    return total


def data_log_likelihood_grad(
    x0: Field,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
    w: GuidanceWeights,
) -> Field:
    """Gradient of :func:`log_likelihood` with respect to the clean state."""
    grad = np.zeros_like(x0.values)
    if w.beta > 0 and layout.solution_channels and obs.mask_u.count:
        idx = obs.mask_u.flat_indices()
        n = obs.values_u.size
        for row, c in enumerate(layout.solution_channels):
            g = grad[c].reshape(-1)
            g[idx] += 2.0 * w.beta / n * (obs.values_u[row] - x0.values[c].reshape(-1)[idx])
    if w.gamma > 0 and layout.coeff_channels and obs.mask_a.count:
        idx = obs.mask_a.flat_indices()
        n = obs.values_a.size
        for row, c in enumerate(layout.coeff_channels):
            g = grad[c].reshape(-1)
            g[idx] += 2.0 * w.gamma / n * (obs.values_a[row] - x0.values[c].reshape(-1)[idx])
    if w.omega > 0:
        if system is None:
            raise ValueError("omega > 0 requires a PDE system")
        grad -= w.omega * residual_sq_grad(system, layout, x0).values
    return Field(x0.spec, grad)


def intermediate_log_likelihood(
    x_k: Field,
    sigma_k: float,
    denoiser: Denoiser,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
    w: GuidanceWeights,
) -> float:
    """Likelihood of the denoiser's reconstruction of a noisy state."""
    if sigma_k < 0:
        raise ValueError("sigma must be nonnegative")
    x_hat = Field.from_flat(x_k.spec, denoiser.denoise(x_k.flat(), sigma_k))
    return log_likelihood(x_hat, obs, system, layout, w)


def guidance_grad(
    x_k: Field,
    sigma_k: float,
    denoiser: Denoiser,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
    w: GuidanceWeights,
) -> Field:
    """Gradient of the intermediate log-likelihood at a noisy state.

    In exact mode the data-space gradient at the reconstruction is pulled back
    through the denoiser's vjp; in identity mode it is returned as-is.
    """
    if sigma_k < 0:
        raise ValueError("sigma must be nonnegative")
    flat = x_k.flat()
    x_hat = Field.from_flat(x_k.spec, denoiser.denoise(flat, sigma_k))
    g = data_log_likelihood_grad(x_hat, obs, system, layout, w)
    if w.jacobian_mode == "identity":
        return g
    pulled = denoiser.vjp(flat, sigma_k, g.flat())
    return Field.from_flat(x_k.spec, pulled)


# ---------------------------------------------------------------------------
# Particle potentials.
# ---------------------------------------------------------------------------


def pbs_potential(loglik_old: float, loglik_new: float, temper_rho: float) -> float:
    """Tempered likelihood-ratio potential between consecutive states."""
    return temper_rho * (loglik_new - loglik_old)


def tds_transition_term(
    x_new: np.ndarray,
    mean_unguided: np.ndarray,
    mean_guided: np.ndarray,
    step_var: float,
) -> float:
    """log N(x; mean_unguided, v I) - log N(x; mean_guided, v I) in closed form.

    Both Gaussians share the covariance, so normalization constants cancel and
    the ratio is the quadratic-form difference.
    """
    if step_var <= 0:
        raise ValueError("step variance must be positive")
    x_new = np.asarray(x_new, dtype=float)
    d_un = x_new - np.asarray(mean_unguided, dtype=float)
    d_gd = x_new - np.asarray(mean_guided, dtype=float)
    return float((d_gd @ d_gd - d_un @ d_un) / (2.0 * step_var))


def potential_log(
    x_k: Field,
    x_new: Field,
    sigma_k: float,
    sigma_new: float,
    denoiser: Denoiser,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
    w: GuidanceWeights,
    scheme: str,
    proposal_means: tuple[np.ndarray, np.ndarray] | None = None,
    loglik_old: float | None = None,
    loglik_new: float | None = None,
) -> float:
    """Incremental log-potential of the move x_k -> x_new.

    ``proposal_means`` must carry the (unguided, guided) transition means for
    the tds scheme; proposals without a point-evaluable transition density
    (the churned second-order step) are rejected there. Cached intermediate
    log-likelihoods may be supplied to avoid recomputation.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}")
    if loglik_old is None:
        loglik_old = intermediate_log_likelihood(x_k, sigma_k, denoiser, obs, system, layout, w)
    if loglik_new is None:
        loglik_new = intermediate_log_likelihood(x_new, sigma_new, denoiser, obs, system, layout, w)
    pot = pbs_potential(loglik_old, loglik_new, w.temper_rho)
    if scheme == "tds":
        if proposal_means is None:
            raise ValueError(
                "tds weights need the proposal's Gaussian transition means; "
                "use pbs for proposals without a point-evaluable density"
            )
        step_var = sigma_k**2 - sigma_new**2
        pot += tds_transition_term(x_new.flat(), proposal_means[0], proposal_means[1], step_var)
    return pot
