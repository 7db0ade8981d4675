"""Exact linear-Gaussian reference computations for auditing the diffusion math.

Every chain in this package is affine-Gaussian: any state is an affine
function of the residual z0m and the condition z0c plus zero-mean Gaussian
noise.  :class:`AffineGaussianState` captures that law exactly (per cell;
the chains are elementwise), which lets each closed-form formula elsewhere
be checked against an independent recursion instead of against itself.

Independence rule: nothing here reuses arithmetic helpers from the modules
under audit.  The only shared object is the schedule, which is data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import NoiseSchedule

__all__ = [
    "AffineGaussianState",
    "compound_marginal_coeffs",
    "gaussian_condition",
    "affine_oracle_predictor",
    "accel_substep_sigma",
    "sampler_pushforward_coeffs",
    "finite_diff_check",
    "ddpm_q_sample",
    "ddpm_posterior_mean_z0",
    "ddpm_posterior_mean_eps",
]


@dataclass(frozen=True)
class AffineGaussianState:
    """Exact law of a chain state: coef_residual*z0m + coef_condition*z0c + N(0, noise_var)."""

    coef_residual: float
    coef_condition: float
    noise_var: float

    def __post_init__(self):
        if self.noise_var < 0:
            raise ValueError("variance must be nonnegative")

    def mean(self, z0m: float, z0c: float) -> float:
        return self.coef_residual * z0m + self.coef_condition * z0c


def compound_marginal_coeffs(sched: NoiseSchedule, t: int) -> AffineGaussianState:
    """Exact marginal of the single-step chain compounded from step 1 to t.

    Recursion from (1, 0, 0):
        c_z0  <- sqrt(alpha_step_t) * c_z0
        c_z0c <- sqrt(alpha_step_t) * (c_z0c + 1)
        v     <- alpha_step_t * v + beta_t

    By induction c_z0(t) = sqrt(alpha_cum_t) and v(t) = 1 - alpha_cum_t match
    the closed-form marginal, while c_z0c(t) exceeds sqrt(alpha_cum_t) for
    t >= 2: the two forward definitions in use disagree on the condition
    coefficient, and this function quantifies the gap.
    """
    if not 1 <= t <= sched.T:
        raise IndexError(f"step {t} outside 1..{sched.T}")
    c_res, c_cond, var = 1.0, 0.0, 0.0
    for s in range(1, t + 1):
        astep = float(sched.alpha_step[s - 1])
        beta = float(sched.beta[s - 1])
        root = np.sqrt(astep)
        c_res = root * c_res
        c_cond = root * (c_cond + 1.0)
        var = astep * var + beta
    return AffineGaussianState(c_res, c_cond, var)


def gaussian_condition(
    prior_mean: float,
    prior_var: float,
    lik_coef: float,
    lik_offset: float,
    lik_var: float,
    obs: float,
) -> tuple[float, float]:
    """One-dimensional linear-Gaussian conditioning.

    For x ~ N(m, v) and y | x ~ N(k x + c, w), the posterior of x given
    y = obs is Gaussian with
        var  = (1/v + k^2/w)^-1
        mean = var * (m/v + k (y - c)/w)
    """
    if prior_var <= 0 or lik_var <= 0:
        raise ValueError("variances must be positive")
    post_var = 1.0 / (1.0 / prior_var + lik_coef**2 / lik_var)
    post_mean = post_var * (
        prior_mean / prior_var + lik_coef * (obs - lik_offset) / lik_var
    )
    return post_mean, post_var


def affine_oracle_predictor(z0m, z0c, sched: NoiseSchedule):
    """The exact noise model for marginal-consistent states.

    eps*(z, t) = (z - sqrt(alpha_cum_t) * (z0m + z0c)) / sqrt(1 - alpha_cum_t)

    Applied to z = sqrt(alpha_cum_t)(z0m + z0c) + sqrt(1 - alpha_cum_t) * eps
    it recovers eps exactly; applied to any other affine-Gaussian state it
    stays affine, so sampler chains driven by it admit exact push-forwards.
    """
    z0m = np.asarray(z0m, dtype=np.float64)
    z0c = np.asarray(z0c, dtype=np.float64)

    def predictor(z, cond, t):
        acum = float(sched.alpha_cum[int(t)])
        return (np.asarray(z) - np.sqrt(acum) * (z0m + z0c)) / np.sqrt(1.0 - acum)

    return predictor


def accel_substep_sigma(sched: NoiseSchedule, t: int, t_prev: int, eta: float = 1.0) -> float:
    """Noise std for an accelerated jump t -> t_prev.

    Generalizes the adjacent-step posterior std: with a_eff = alpha_cum_t /
    alpha_cum_prev, sigma^2 = eta^2 (1 - alpha_cum_prev)(1 - a_eff)/(1 - alpha_cum_t).
    Reduces to sqrt(beta_tilde_t) at t_prev = t - 1, eta = 1; is 0 at t_prev = 0.
    """
    acum = float(sched.alpha_cum[t])
    acum_prev = float(sched.alpha_cum[t_prev])
    var = (1.0 - acum_prev) * (1.0 - acum / acum_prev) / (1.0 - acum)
    return eta * np.sqrt(var)


def sampler_pushforward_coeffs(
    sched: NoiseSchedule,
    variant: str,
    steps=None,
    eta: float = 1.0,
    init: AffineGaussianState | None = None,
) -> list[AffineGaussianState]:
    """Exact per-step law of a sampler chain under the affine oracle predictor.

    variant "ancestral": full-length reverse updates with posterior noise
    (none at t = 1).  variant "accelerated": non-Markovian jumps over
    ``steps`` (descending, ending at 1) with noise std scaled by ``eta``.

    Returns len(steps) + 1 states: the initial law followed by the law after
    each update; the terminal state is the analytic prediction acceptance
    tests compare against.
    """
    state = init if init is not None else AffineGaussianState(0.0, 0.0, 1.0)
    out = [state]
    if variant == "ancestral":
        steps = list(range(sched.T, 0, -1)) if steps is None else list(steps)
        for t in steps:
            beta = float(sched.beta[t - 1])
            astep = float(sched.alpha_step[t - 1])
            acum_prev = float(sched.alpha_cum[t - 1])
            acum = float(sched.alpha_cum[t])
            denom = 1.0 - acum
            gain = np.sqrt(astep) * (1.0 - acum_prev) / denom
            add_res = np.sqrt(acum_prev) * beta / denom
            add_cond = (np.sqrt(acum_prev) * beta - astep * (1.0 - acum_prev)) / denom
            sigma2 = float(sched.beta_tilde[t - 1]) if t > 1 else 0.0
            state = AffineGaussianState(
                gain * state.coef_residual + add_res,
                gain * state.coef_condition + add_cond,
                gain * gain * state.noise_var + sigma2,
            )
            out.append(state)
    elif variant == "accelerated":
        if steps is None:
            steps = list(range(sched.T, 0, -1))
        steps = list(steps)
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else 0
            acum = float(sched.alpha_cum[t])
            acum_prev = float(sched.alpha_cum[t_prev])
            d = accel_substep_sigma(sched, t, t_prev, eta)
            a = np.sqrt((1.0 - acum_prev - d * d) / (1.0 - acum))
            b = np.sqrt(acum_prev) - a * np.sqrt(acum)
            state = AffineGaussianState(
                a * state.coef_residual + b,
                a * state.coef_condition + b,
                a * a * state.noise_var + d * d,
            )
            out.append(state)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return out


def finite_diff_check(params, graph, batch, step: float = 1e-3) -> dict:
    """Central-difference audit of the denoiser's analytic gradients.

    ``batch`` is (z_t, z0c, t, eps, target_mask).  For every parameter
    element, the loss is evaluated at +/- step and the centered difference is
    compared to the taped gradient.  Relative error uses a per-tensor scale
    floor so exactly-zero gradients (unused embedding rows) do not blow up
    the ratio.  Intended for small instances only.
    """
    from . import denoiser as dn

    loss, grads = dn.loss_and_grads(params, graph, *batch)
    report: dict[str, float] = {}
    worst = 0.0
    for name in params.tensor_names():
        arr = getattr(params, name)
        analytic = grads[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = dn.batch_loss(params, graph, *batch)
            flat[i] = orig - step
            down = dn.batch_loss(params, graph, *batch)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * step)
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        report[name] = err
        worst = max(worst, err)
    return {"max_rel_err": worst, "per_tensor": report, "loss": float(loss)}


# --- independent plain-DDPM reference (condition identically zero) ---------
#
# Written directly from the standard unconditional formulas so the package's
# conditioned operations can be cross-checked in their z0c = 0 reduction.


def ddpm_q_sample(x0, t: int, eps, sched: NoiseSchedule):
    acum = float(sched.alpha_cum[t])
    return np.sqrt(acum) * np.asarray(x0) + np.sqrt(1.0 - acum) * np.asarray(eps)


def ddpm_posterior_mean_z0(x_t, x0, t: int, sched: NoiseSchedule):
    beta = float(sched.beta[t - 1])
    astep = float(sched.alpha_step[t - 1])
    acum_prev = float(sched.alpha_cum[t - 1])
    acum = float(sched.alpha_cum[t])
    return (
        np.sqrt(astep) * (1.0 - acum_prev) / (1.0 - acum) * np.asarray(x_t)
        + np.sqrt(acum_prev) * beta / (1.0 - acum) * np.asarray(x0)
    )


def ddpm_posterior_mean_eps(x_t, eps_hat, t: int, sched: NoiseSchedule):
    astep = float(sched.alpha_step[t - 1])
    acum = float(sched.alpha_cum[t])
    return (
        np.asarray(x_t) - (1.0 - astep) / np.sqrt(1.0 - acum) * np.asarray(eps_hat)
    ) / np.sqrt(astep)
