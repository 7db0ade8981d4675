"""Reverse sampling of the residual and assembly of probabilistic imputations.

Two samplers share the same checkpoint and denoiser:

  * ancestral: full-length reverse chain; each step takes the posterior mean
    parameterized by the noise estimate and adds noise with the posterior
    std (zero at the last step).
  * accelerated: non-Markovian jumps over an evenly spaced descending
    subsequence of steps ending at 1.  The jump noise std defaults to the
    generalized posterior std between consecutive subsequence elements,
    scaled by eta in [0, 1] (eta = 0 gives the deterministic limit).

Each sample chain owns an RNG stream derived from (root seed, sample index),
so results are independent of batching and chunk sizes.  Non-visible cells
are initialized from standard normal noise on target cells only; visible
cells pass through untouched in every sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as dt
from . import denoiser as dn
from . import initial as ini
from .errors import ConfigError
from .forward import posterior_mean_eps, posterior_mean_z0
from .schedule import NoiseSchedule

__all__ = [
    "DdimCoeffs",
    "ImputationResult",
    "ancestral_step",
    "ancestral_impute",
    "initial_only_impute",
    "ddim_coeffs",
    "substep_schedule",
    "substep_noise_std",
    "accelerated_step",
    "accelerated_impute",
]


@dataclass(frozen=True)
class DdimCoeffs:
    """Coefficients of the non-Markovian jump z_{t-1} = a z_t + b (z0 + cond) + d eps."""

    a: float
    b: float
    d: float


def ddim_coeffs(t: int, d: float, sched: NoiseSchedule) -> DdimCoeffs:
    """Solve the jump coefficients for noise std d at step t.

    a^2 (1 - alpha_cum_t) + d^2 = 1 - alpha_cum_{t-1} holds exactly by
    construction; d^2 may not exceed 1 - alpha_cum_{t-1}.
    """
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside 1..{sched.T}")
    acum_prev = float(sched.alpha_cum[t - 1])
    acum = float(sched.alpha_cum[t])
    radicand = 1.0 - acum_prev - d * d
    if radicand < 0:
        raise ValueError(f"noise std {d} too large at step {t}: negative radicand")
    a = np.sqrt(radicand / (1.0 - acum))
    b = np.sqrt(acum_prev) - a * np.sqrt(acum)
    return DdimCoeffs(a=float(a), b=float(b), d=float(d))


def substep_schedule(T: int, K: int) -> list[int]:
    """Evenly spaced descending steps, always including T and 1."""
    if not 1 <= K <= T:
        raise ConfigError(f"substep count {K} outside 1..{T}")
    steps = np.unique(np.round(np.linspace(T, 1, K)).astype(int))
    return [int(s) for s in steps[::-1]]


def substep_noise_std(sched: NoiseSchedule, t: int, t_prev: int, eta: float = 1.0) -> float:
    """Generalized posterior std for a jump t -> t_prev, scaled by eta.

    Treating the effective single step as alpha_cum_t / alpha_cum_prev, the
    posterior variance is (1 - alpha_cum_prev)(1 - a_eff)/(1 - alpha_cum_t);
    at t_prev = t - 1 and eta = 1 this is exactly beta_tilde_t, and it
    vanishes at t_prev = 0.
    """
    acum = float(sched.alpha_cum[t])
    acum_prev = float(sched.alpha_cum[t_prev])
    a_eff = acum / acum_prev
    var = (1.0 - acum_prev) * (1.0 - a_eff) / (1.0 - acum)
    return float(eta) * float(np.sqrt(var))


def ancestral_step(z_t, z0c, t: int, eps_hat, sched: NoiseSchedule,
                   rng: np.random.Generator | None = None,
                   target_mask=None, noise=None):
    """One reverse transition; adds posterior-std noise except at t = 1."""
    mean = posterior_mean_eps(z_t, z0c, eps_hat, t, sched, target_mask)
    if t == 1:
        return mean
    sigma = float(np.sqrt(sched.beta_tilde[t - 1]))
    if noise is None:
        noise = rng.standard_normal(np.shape(mean))
    if target_mask is not None:
        noise = noise * np.asarray(target_mask, dtype=np.float64)
    return mean + sigma * noise


def accelerated_step(z_t, eps_hat, t: int, t_prev: int, d: float,
                     sched: NoiseSchedule, noise=None, target_mask=None):
    """Non-Markovian jump t -> t_prev expressed through the noise estimate.

    z_prev = sqrt(acum_prev/acum) z_t
             + (sqrt(1 - acum_prev - d^2) - sqrt(acum_prev (1 - acum)/acum)) eps_hat
             + d * noise
    """
    acum = float(sched.alpha_cum[t])
    acum_prev = float(sched.alpha_cum[t_prev])
    radicand = 1.0 - acum_prev - d * d
    if radicand < 0:
        raise ValueError(f"noise std {d} too large for jump {t}->{t_prev}")
    c_eps = np.sqrt(radicand) - np.sqrt(acum_prev * (1.0 - acum) / acum)
    out = np.sqrt(acum_prev / acum) * np.asarray(z_t) + c_eps * np.asarray(eps_hat)
    if d > 0 and noise is not None:
        n = np.asarray(noise)
        if target_mask is not None:
            n = n * np.asarray(target_mask, dtype=np.float64)
        out = out + d * n
    if target_mask is not None:
        out = out * np.asarray(target_mask, dtype=np.float64)
    return out


@dataclass
class ImputationResult:
    """Per-sample imputations with median, quantile band, and metrics."""

    samples: np.ndarray  # (S, L, N), data units
    median: np.ndarray
    q_low: np.ndarray
    q_high: np.ndarray
    q_levels: tuple[float, float]
    metrics: dict | None


class _SamplerSetup:
    """Shared preprocessing for both samplers."""

    def __init__(self, checkpoint, x: dt.MaskedGrid, graph):
        cfg = checkpoint.config
        self.sched = checkpoint.sched
        self.params = checkpoint.denoiser
        self.flags = cfg
        stats = checkpoint.stats
        values_norm = (x.values - stats.mean[None, :]) / stats.std[None, :]
        values_norm = np.where(x.observed_mask, values_norm, 0.0)
        self.grid_norm = dt.MaskedGrid(
            values=values_norm,
            observed_mask=x.observed_mask,
            eval_mask=x.eval_mask,
            timestamps=x.timestamps,
            window_index=x.window_index,
            node_ids=list(x.node_ids),
        )
        self.x = x
        self.stats = stats
        self.visible = x.visible_mask
        self.target = ~self.visible
        self.targetf = self.target.astype(np.float64)
        self.sign = -1.0 if bool(cfg.flip_residual_sign) != bool(cfg.no_residual) else 1.0
        self.a_hat = dn.normalized_adjacency(getattr(graph, "adjacency", graph))

        L = x.shape[0]
        n_window = self.params.config.n_window
        self.slices = [slice(i, min(i + n_window, L)) for i in range(0, L, n_window)]
        self.time_index = x.window_index

        # the rough fill is computed per window, exactly as during training,
        # so the condition follows the distribution the denoiser was fit on
        x_init = np.empty_like(self.grid_norm.values)
        for sl in self.slices:
            win = dt.MaskedGrid(
                values=self.grid_norm.values[sl],
                observed_mask=x.observed_mask[sl],
                eval_mask=x.eval_mask[sl],
                timestamps=x.timestamps[sl],
                window_index=x.window_index[sl],
                node_ids=list(x.node_ids),
            )
            x_init[sl] = ini.impute_initial(win, graph, checkpoint.initial)
        self.x_init_eff = np.zeros_like(x_init) if cfg.no_residual else x_init
        _, z0c = ini.residual_and_condition(
            x_init, None, self.target, training=False, sign=self.sign
        )
        self.z0c = np.asarray(z0c.values)
        self.z0c_chain = np.zeros_like(self.z0c) if cfg.no_cond_forward else self.z0c

    def predict(self, z_full: np.ndarray, t: int, chunk: int = 128) -> np.ndarray:
        """Denoiser output for a whole (S, L, N) state, windowed and chunked."""
        s_count = z_full.shape[0]
        out = np.empty_like(z_full)
        by_len: dict[int, list[slice]] = {}
        for sl in self.slices:
            by_len.setdefault(sl.stop - sl.start, []).append(sl)
        for length, sls in by_len.items():
            z_batch = np.concatenate(
                [z_full[:, sl, :] for sl in sls], axis=0
            )  # (S*W, Lw, N)
            cond = np.concatenate(
                [np.broadcast_to(self.z0c_chain[sl], (s_count,) + self.z0c_chain[sl].shape)
                 for sl in sls],
                axis=0,
            )
            tidx = np.concatenate(
                [np.broadcast_to(self.time_index[sl], (s_count, length)) for sl in sls],
                axis=0,
            )
            preds = np.empty_like(z_batch)
            for lo in range(0, z_batch.shape[0], chunk):
                hi = min(lo + chunk, z_batch.shape[0])
                preds[lo:hi] = dn.forward(
                    self.params, self.params.config,
                    z_batch[lo:hi], cond[lo:hi], t, self.a_hat, tidx[lo:hi],
                )
            for w, sl in enumerate(sls):
                out[:, sl, :] = preds[w * s_count : (w + 1) * s_count]
        return out

    def eps_from_output(self, net_out: np.ndarray, z: np.ndarray, t: int) -> np.ndarray:
        """Map the network output to a noise estimate (handles x0 prediction)."""
        if not self.flags.predict_x0:
            return net_out
        acum = float(self.sched.alpha_cum[t])
        return (z - np.sqrt(acum) * (net_out + self.z0c_chain)) / np.sqrt(1.0 - acum)

    def finalize(self, residuals: np.ndarray, q_levels=(0.05, 0.95)) -> ImputationResult:
        """Combine sampled residuals with the rough fill and score."""
        s_count = residuals.shape[0]
        samples = np.empty_like(residuals)
        for s in range(s_count):
            imput_norm = self.x_init_eff - self.sign * residuals[s]
            full = np.where(self.visible, self.grid_norm.values, imput_norm)
            denorm = dt.denormalize(full, self.stats)
            samples[s] = np.where(self.visible, self.x.values, denorm)
        median = np.median(samples, axis=0)
        q_low = np.quantile(samples, q_levels[0], axis=0)
        q_high = np.quantile(samples, q_levels[1], axis=0)
        scores = None
        if self.x.eval_mask.any():
            scores = dt.metrics(median, self.x.values, self.x.eval_mask)
        return ImputationResult(
            samples=samples, median=median, q_low=q_low, q_high=q_high,
            q_levels=tuple(q_levels), metrics=scores,
        )


def initial_only_impute(checkpoint, x: dt.MaskedGrid, graph) -> np.ndarray:
    """Rough-fill-only imputation in data units (stage-one baseline).

    Uses the same windowed fill as the samplers, so comparisons against the
    refined imputations are like for like.
    """
    setup = _SamplerSetup(checkpoint, x, graph)
    # under no_residual there is no stage-one estimate; fall back to the fill
    x_init = setup.x_init_eff if not checkpoint.config.no_residual else setup.z0c
    full = np.where(setup.visible, setup.grid_norm.values, x_init)
    denorm = dt.denormalize(full, setup.stats)
    return np.where(setup.visible, x.values, denorm)


def _sample_rngs(rng: np.random.Generator, s_count: int) -> list[np.random.Generator]:
    seq = rng.bit_generator.seed_seq.spawn(s_count)
    return [np.random.default_rng(s) for s in seq]


def ancestral_impute(checkpoint, x: dt.MaskedGrid, graph, S: int,
                     rng: np.random.Generator, chunk: int = 128) -> ImputationResult:
    """Full-length reverse sampling of S imputations (Alg-style ancestral)."""
    if S < 1:
        raise ConfigError("sample count must be >= 1")
    setup = _SamplerSetup(checkpoint, x, graph)
    sched = setup.sched
    rngs = _sample_rngs(rng, S)
    shape = x.shape
    z = np.stack([r.standard_normal(shape) * setup.targetf for r in rngs])
    for t in range(sched.T, 0, -1):
        net_out = setup.predict(z, t, chunk)
        eps_hat = setup.eps_from_output(net_out, z, t)
        if setup.flags.predict_x0:
            mean = posterior_mean_z0(z, net_out * setup.targetf, setup.z0c_chain,
                                     t, sched, setup.target)
        else:
            mean = posterior_mean_eps(z, setup.z0c_chain, eps_hat, t, sched,
                                      setup.target)
        if t > 1:
            sigma = float(np.sqrt(sched.beta_tilde[t - 1]))
            noise = np.stack([r.standard_normal(shape) * setup.targetf for r in rngs])
            z = mean + sigma * noise
        else:
            z = mean
    return setup.finalize(z)


def accelerated_impute(checkpoint, x: dt.MaskedGrid, graph, K: int,
                       S: int, rng: np.random.Generator, eta: float = 1.0,
                       chunk: int = 128) -> ImputationResult:
    """Accelerated sampling over K evenly spaced sub-steps."""
    if S < 1:
        raise ConfigError("sample count must be >= 1")
    setup = _SamplerSetup(checkpoint, x, graph)
    sched = setup.sched
    steps = substep_schedule(sched.T, K)
    rngs = _sample_rngs(rng, S)
    shape = x.shape
    z = np.stack([r.standard_normal(shape) * setup.targetf for r in rngs])
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        d = substep_noise_std(sched, t, t_prev, eta)
        net_out = setup.predict(z, t, chunk)
        eps_hat = setup.eps_from_output(net_out, z, t)
        if d > 0:
            noise = np.stack([r.standard_normal(shape) * setup.targetf for r in rngs])
        else:
            noise = None
        z = accelerated_step(z, eps_hat, t, t_prev, d, sched, noise, setup.target)
    return setup.finalize(z)
