"""Diffusion mathematics: schedules, forward noising, loss, DDIM both ways.

Everything here is denoiser-agnostic: a model is any callable
`model(x, t, cond) -> eps_pred` with `t` a per-batch LongTensor. Schedules
are kept in float64 so coefficient products stay exact to ~1e-16 even at a
thousand steps.
"""

from dataclasses import dataclass

import torch

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: per-step beta and the cumulative alpha_bar."""

    T: int
    beta: torch.Tensor
    alpha_bar: torch.Tensor

    def validate(self) -> None:
        if self.beta.shape != (self.T,) or self.alpha_bar.shape != (self.T,):
            raise ValueError("schedule arrays must have length T")
        b = self.beta
        if not (b[0] > 0 and b[-1] < 1 and torch.all(b[1:] >= b[:-1])):
            raise ValueError("beta must be non-decreasing within (0, 1)")
        ab = self.alpha_bar
        if not (torch.all(ab > 0) and torch.all(ab < 1) and torch.all(ab[1:] < ab[:-1])):
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1)")
        ref = torch.cumprod(1.0 - b, dim=0)
        if not torch.allclose(ab, ref, atol=1e-12, rtol=0):
            raise ValueError("alpha_bar inconsistent with beta")


@dataclass
class DiffusionSample:
    """One training example: clean latent, its noised version, and the noise."""

    x0: torch.Tensor
    xt: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor

    def validate(self, schedule: NoiseSchedule) -> None:
        if not (self.x0.shape == self.xt.shape == self.eps.shape):
            raise ValueError("x0, xt, eps must share a shape")
        if torch.any(self.t < 0) or torch.any(self.t >= schedule.T):
            raise ValueError("t out of range")


def make_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
    kind: str = "linear",
) -> NoiseSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ValueError("T must be >= 2")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    schedule = NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)
    schedule.validate()
    return schedule


def _gather_ab(schedule: NoiseSchedule, t, like: torch.Tensor) -> torch.Tensor:
    """alpha_bar at t, shaped to broadcast over `like` and cast to its dtype."""
    t = torch.as_tensor(t, dtype=torch.long)
    ab = schedule.alpha_bar[t].to(like.dtype)
    if ab.ndim == 0:
        return ab
    return ab.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward noising: xt = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    t_check = torch.as_tensor(t)
    if torch.any(t_check < 0) or torch.any(t_check >= schedule.T):
        raise ValueError(f"t out of range [0, {schedule.T})")
    ab = _gather_ab(schedule, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def draw_diffusion_sample(
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    generator: torch.Generator = None,
) -> DiffusionSample:
    """Sample (t, eps) and build the noised training example for x0."""
    b = x0.shape[0]
    t = torch.randint(0, schedule.T, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = q_sample(x0, t, eps, schedule)
    return DiffusionSample(x0=x0, xt=xt, t=t, eps=eps)


def loss_simple(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise, over everything."""
    if eps_pred.shape != eps.shape:
        raise ValueError("eps_pred and eps shapes differ")
    return torch.mean(torch.square(eps_pred - eps))


def ddim_timesteps(T: int, steps: int) -> list:
    """Uniformly strided timestep indices, ascending, always ending at T-1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    if steps == 1:
        return [T - 1]
    return [round(i * (T - 1) / (steps - 1)) for i in range(steps)]


def _batched_t(t: int, x: torch.Tensor) -> torch.Tensor:
    return torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)


def _predict_eps(model, x, t, cond, guidance_scale, uncond):
    eps = model(x, _batched_t(t, x), cond)
    if guidance_scale and guidance_scale > 0.0:
        if uncond is None:
            raise ValueError("guidance requires an unconditional embedding")
        eps_u = model(x, _batched_t(t, x), uncond)
        eps = eps_u + guidance_scale * (eps - eps_u)
    return eps


@torch.no_grad()
def ddim_sample(
    model,
    x_T: torch.Tensor,
    cond,
    schedule: NoiseSchedule,
    steps: int,
    eta: float = 0.0,
    guidance_scale: float = 0.0,
    uncond=None,
    generator: torch.Generator = None,
    clip_x0: float = None,
) -> torch.Tensor:
    """Run DDIM from pure noise down to an x0 prediction.

    With eta=0 the path is deterministic; with a zero predictor the result
    collapses to x_T / sqrt(alpha_bar[T-1]), which tests use as an oracle.

    clip_x0, when set, clamps the per-step x0 estimate to [-clip_x0, clip_x0].
    At high t the estimate divides a small prediction error by a tiny
    sqrt(alpha_bar), so an imperfect predictor can push the trajectory far
    outside the data range; clamping to the known latent range keeps sampling
    stable without touching the epsilon prediction itself.
    """
    ts = ddim_timesteps(schedule.T, steps)
    x = x_T
    for i in range(len(ts) - 1, -1, -1):
        t = ts[i]
        ab_t = float(schedule.alpha_bar[t])
        ab_prev = float(schedule.alpha_bar[ts[i - 1]]) if i > 0 else 1.0
        eps = _predict_eps(model, x, t, cond, guidance_scale, uncond)
        x0_est = (x - (1.0 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
        if clip_x0 is not None:
            x0_est = x0_est.clamp(-clip_x0, clip_x0)
        if eta > 0.0 and i > 0:
            sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)) ** 0.5
            dir_coeff = max(1.0 - ab_prev - sigma ** 2, 0.0) ** 0.5
            noise = torch.randn(x.shape, generator=generator, dtype=x.dtype,
                                device=x.device)
            x = ab_prev ** 0.5 * x0_est + dir_coeff * eps + sigma * noise
        else:
            x = ab_prev ** 0.5 * x0_est + (1.0 - ab_prev) ** 0.5 * eps
    return x


@torch.no_grad()
def ddim_invert(
    model,
    x0: torch.Tensor,
    cond,
    schedule: NoiseSchedule,
    steps: int,
    guidance_scale: float = 0.0,
    uncond=None,
    t_stop: int = None,
) -> torch.Tensor:
    """Reverse DDIM: push a clean latent back up to the x_T it came from.

    Each update targets the next noisier timestep and queries the model at
    that target, mirroring how the sampler pairs epsilons with timesteps;
    ddim_sample(ddim_invert(x0)) then reconstructs x0 closely, and exactly
    for a zero predictor.

    t_stop, when set, halts the climb at the last grid timestep <= t_stop,
    returning a partially inverted latent. Each inversion step compounds the
    predictor's own error, and the high-t segment amplifies it most, so a
    partial inversion preserves far more of x0 than a full one when the
    predictor is imperfect; the sampler can re-enter the trajectory at the
    same grid point.
    """
    ts = ddim_timesteps(schedule.T, steps)
    x = x0
    ab_from = 1.0
    for t in ts:
        if t_stop is not None and t > t_stop:
            break
        ab_to = float(schedule.alpha_bar[t])
        eps = _predict_eps(model, x, t, cond, guidance_scale, uncond)
        x0_est = (x - (1.0 - ab_from) ** 0.5 * eps) / ab_from ** 0.5
        x = ab_to ** 0.5 * x0_est + (1.0 - ab_to) ** 0.5 * eps
        ab_from = ab_to
    return x
