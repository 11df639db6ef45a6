"""Particle system over reverse-time proposals: weighting, resampling, diagnostics.

The engine propagates N particles with the guided Euler-Maruyama or churned
second-order proposal, accumulates log-potentials under the tds or pbs
weighting scheme, resamples multinomially when the effective sample size
falls below a threshold fraction of N, and tracks a running log-evidence
estimate (the normalizer of the underlying Feynman-Kac model).

Particles evolve as rows of an (N, d) array drawn from per-particle streams
keyed by (seed, particle index); resampling uses its own stream. With N = 1
the engine walks exactly the same arithmetic as the single-chain driver, so
the two are bit-identical under a shared seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowUpError, NumericalError
from .grid import Field, GridSpec
from .guidance import (
    GuidanceContext,
    GuidanceWeights,
    log_likelihood,
    tds_transition_term,
)
from .priors import Denoiser, NoiseSchedule
from .residuals import PdeSystem, StateLayout
from .samplers import churn_gamma, gem_core, heun_core, particle_stream, state_spec
from .solvers import Observations

PROPOSALS = ("gem", "sosag")
SCHEMES = ("tds", "pbs")
ESTIMATE_MODES = ("best", "weighted_mean", "random")


@dataclass(frozen=True)
class SmcConfig:
    particle_count: int
    schedule: NoiseSchedule
    weights: GuidanceWeights = field(default_factory=GuidanceWeights)
    proposal: str = "gem"
    scheme: str = "pbs"
    resample_threshold: float = 0.5
    s_churn: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.particle_count < 1:
            raise ValueError("particle_count must be >= 1")
        if self.proposal not in PROPOSALS:
            raise ValueError(f"proposal must be one of {PROPOSALS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}")
        if self.scheme == "tds" and self.proposal != "gem":
            raise ValueError(
                "tds weighting needs a point-evaluable proposal density; "
                "the churned second-order proposal only supports pbs"
            )
        if not 0.0 < self.resample_threshold <= 1.0:
            raise ValueError("resample_threshold must lie in (0, 1]")
        if self.s_churn < 0:
            raise ValueError("s_churn must be nonnegative")


@dataclass
class ParticlePopulation:
    """Weighted particles plus the cached intermediate log-likelihoods."""

    spec: GridSpec
    states: np.ndarray  # (N, d)
    log_weights: np.ndarray  # (N,), unnormalized
    cached_loglik: np.ndarray  # (N,), at the current (state, sigma)
    step_index: int
    ancestors: np.ndarray | None = None  # from the most recent resampling

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def normalized_weights(self) -> np.ndarray:
        lw = self.log_weights - np.max(self.log_weights)
        w = np.exp(lw)
        return w / w.sum()

    def ess(self) -> float:
        return ess(self.log_weights)

    def fields(self) -> list[Field]:
        return [Field.from_flat(self.spec, row) for row in self.states]


def ess(log_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2) of the normalized weights, in log space."""
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        raise ValueError("effective sample size undefined: all weights vanish")
    w = np.exp(lw - m)
    s = w.sum()
    return float(s * s / (w @ w))


def multinomial_resample(
    population: ParticlePopulation, rng: np.random.Generator
) -> ParticlePopulation:
    """N categorical draws from the normalized weights; weights reset to uniform."""
    probs = population.normalized_weights()
    if not np.all(np.isfinite(probs)):
        raise ValueError("cannot resample degenerate weights")
    n = population.count
    ancestors = rng.choice(n, size=n, p=probs)
    return ParticlePopulation(
        spec=population.spec,
        states=population.states[ancestors].copy(),
        log_weights=np.zeros(n),
        cached_loglik=population.cached_loglik[ancestors].copy(),
        step_index=population.step_index,
        ancestors=ancestors,
    )


@dataclass
class SmcDiagnostics:
    """Per-iteration trace: state-level step index, pre-resampling ESS,
    whether resampling fired, and the running log-evidence estimate."""

    steps: list[int] = field(default_factory=list)
    ess_trace: list[float] = field(default_factory=list)
    resampled: list[bool] = field(default_factory=list)
    log_evidence_trace: list[float] = field(default_factory=list)
    log_evidence: float = 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "ess", "resampled_flag", "log_evidence_running"])
            for s, e, r, z in zip(self.steps, self.ess_trace, self.resampled, self.log_evidence_trace):
                writer.writerow([s, repr(float(e)), int(r), repr(float(z))])

    def write_json(self, path) -> None:
        summary = {
            "iterations": len(self.steps),
            "resample_count": int(sum(self.resampled)),
            "final_ess": self.ess_trace[-1] if self.ess_trace else None,
            "log_evidence": self.log_evidence,
        }
        with open(path, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _log_mean_increment(log_norm_w: np.ndarray, potentials: np.ndarray) -> float:
    both = log_norm_w + potentials
    m = np.max(both)
    return float(m + math.log(np.exp(both - m).sum()))


def smc_run(
    config: SmcConfig,
    denoiser: Denoiser,
    obs: Observations,
    system: PdeSystem | None,
    layout: StateLayout,
) -> tuple[ParticlePopulation, SmcDiagnostics]:
    """Run the full particle system from k = K down to 0.

    Initialization draws particles from N(0, sigma_max^2 I) and applies the
    tempered likelihood of the initial reconstructions as the initial weight.
    Each iteration propagates with the configured proposal, adds the scheme's
    incremental log-potential, refreshes the cached log-likelihoods, and
    resamples when ESS <= threshold * N (recorded ESS is pre-resampling).
    """
    ctx = GuidanceContext(obs=obs, system=system, layout=layout, weights=config.weights)
    spec = state_spec(ctx)
    d = spec.size
    n = config.particle_count
    sched = config.schedule
    rho = config.weights.temper_rho
    gamma = churn_gamma(config.s_churn, sched.steps)

    streams = [particle_stream(config.seed, i) for i in range(n)]
    resample_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(config.seed), spawn_key=(1,))
    )

    states = np.stack([sched.sigma_max * s.standard_normal(d) for s in streams])
    denoised = denoiser.denoise(states, sched.sigma_max)
    cached_ll = np.array(
        [
            log_likelihood(Field.from_flat(spec, row), obs, system, layout, config.weights)
            for row in denoised
        ]
    )
    log_w = rho * cached_ll
    log_evidence = _log_mean_increment(np.full(n, -math.log(n)), log_w)

    pop = ParticlePopulation(
        spec=spec, states=states, log_weights=log_w, cached_loglik=cached_ll, step_index=sched.steps
    )
    diag = SmcDiagnostics()

    for k in range(sched.steps, 0, -1):
        sigma_k, sigma_next = sched.sigma_at(k), sched.sigma_at(k - 1)
        z = np.stack([s.standard_normal(d) for s in streams])

        if config.proposal == "gem":
            samples, mean_em, mean_gd = gem_core(
                pop.states, z, sigma_k, sigma_next, denoiser, ctx, denoised=denoised
            )
        else:
            samples = heun_core(pop.states, z, sigma_k, sigma_next, denoiser, gamma, ctx)
            mean_em = mean_gd = None
        if not np.all(np.isfinite(samples)):
            bad = int(np.where(~np.isfinite(samples).all(axis=1))[0][0])
            raise BlowUpError(f"non-finite state for particle {bad} at step {k}", step=k)

        denoised = denoiser.denoise(samples, sigma_next)
        ll_new = np.array(
            [
                log_likelihood(Field.from_flat(spec, row), obs, system, layout, config.weights)
                for row in denoised
            ]
        )
        potentials = rho * (ll_new - pop.cached_loglik)
        if config.scheme == "tds":
            step_var = sigma_k**2 - sigma_next**2
            potentials = potentials + np.array(
                [
                    tds_transition_term(samples[i], mean_em[i], mean_gd[i], step_var)
                    for i in range(n)
                ]
            )
        if not np.all(np.isfinite(potentials)):
            bad = int(np.where(~np.isfinite(potentials))[0][0])
            raise NumericalError(f"non-finite weight for particle {bad} at step {k}")

        norm_lw = np.log(pop.normalized_weights())
        log_evidence += _log_mean_increment(norm_lw, potentials)

        pop = ParticlePopulation(
            spec=spec,
            states=samples,
            log_weights=pop.log_weights + potentials,
            cached_loglik=ll_new,
            step_index=k - 1,
        )

        current_ess = pop.ess()
        fire = current_ess <= config.resample_threshold * n
        diag.steps.append(k - 1)
        diag.ess_trace.append(current_ess)
        diag.resampled.append(bool(fire))
        diag.log_evidence_trace.append(log_evidence)
        if fire:
            pop = multinomial_resample(pop, resample_rng)
            denoised = denoised[pop.ancestors].copy()

    diag.log_evidence = log_evidence
    return pop, diag


def weighted_estimate(population: ParticlePopulation, statistic) -> np.ndarray | float:
    """Self-normalized importance estimate sum_i w_i * statistic(x_i)."""
    w = population.normalized_weights()
    vals = [statistic(f) for f in population.fields()]
    return sum(wi * np.asarray(vi, dtype=float) for wi, vi in zip(w, vals))


def point_estimate(
    population: ParticlePopulation,
    mode: str = "best",
    rng: np.random.Generator | None = None,
) -> Field:
    """Single-field summary of the population.

    ``best`` returns the highest-weight particle, ``weighted_mean`` the
    self-normalized mean, ``random`` a draw proportional to the weights.
    """
    if mode not in ESTIMATE_MODES:
        raise ValueError(f"mode must be one of {ESTIMATE_MODES}")
    if mode == "best":
        idx = int(np.argmax(population.log_weights))
        return Field.from_flat(population.spec, population.states[idx])
    if mode == "weighted_mean":
        w = population.normalized_weights()
        return Field.from_flat(population.spec, w @ population.states)
    if rng is None:
        raise ValueError("random point estimate needs a generator")
    w = population.normalized_weights()
    idx = int(rng.choice(population.count, p=w))
    return Field.from_flat(population.spec, population.states[idx])
