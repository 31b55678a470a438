"""Flow-matching core: optimal-transport paths, the conditional matching
loss, logit-normal timesteps, guidance extrapolation, and Euler integration."""

from __future__ import annotations

import torch


class NumericsError(RuntimeError):
    pass


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def ot_interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """Straight-line interpolant (1-t)*x0 + t*x1."""
    _check_shapes(x0, x1)
    t = torch.as_tensor(t, dtype=x0.dtype, device=x0.device)
    while t.dim() < x0.dim():
        t = t.unsqueeze(-1)
    return (1.0 - t) * x0 + t * x1


def target_field(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Target velocity along the straight path; independent of t."""
    _check_shapes(x0, x1)
    return x1 - x0


def cfm_loss(field_model, x1: torch.Tensor, condition, x0: torch.Tensor, t,
             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean squared error between (x1 - x0) and the model field evaluated
    on the interpolant. `field_model(phi_t, condition, t)` must return a
    tensor of x1's shape. `mask` selects valid elements (1 = keep)."""
    phi_t = ot_interpolate(x0, x1, t)
    v = field_model(phi_t, condition, t)
    if not torch.isfinite(v).all():
        raise NumericsError("field model produced non-finite output")
    u = target_field(x0, x1)
    sq = (u - v) ** 2
    if mask is not None:
        while mask.dim() < sq.dim():
            mask = mask.unsqueeze(-1)
        mask = mask.to(sq.dtype).expand_as(sq)
        return (sq * mask).sum() / mask.sum().clamp_min(1.0)
    return sq.mean()


def sample_timestep_logitnormal(generator: torch.Generator, shape=(),
                                mean: float = 0.0, std: float = 1.0,
                                dtype=torch.float32) -> torch.Tensor:
    """t = sigmoid(z), z ~ Normal(mean, std); strictly inside (0, 1)."""
    if std <= 0:
        raise ValueError(f"std must be > 0, got {std}")
    z = torch.randn(shape, generator=generator, dtype=dtype) * std + mean
    t = torch.sigmoid(z)
    eps = torch.finfo(dtype).tiny
    return t.clamp(eps, 1.0 - torch.finfo(dtype).eps)


def cfg_field(v_cond: torch.Tensor, v_uncond: torch.Tensor, alpha: float) -> torch.Tensor:
    """Guidance extrapolation (1+alpha)*v_cond - alpha*v_uncond."""
    _check_shapes(v_cond, v_uncond)
    if alpha == 0.0:
        return v_cond
    return (1.0 + alpha) * v_cond - alpha * v_uncond


def euler_integrate(field_fn, x_init: torch.Tensor, steps: int) -> torch.Tensor:
    """Fixed-step forward Euler from t=0 to t=1.

    `field_fn(x, t)` with scalar t; raises NumericsError naming the step
    at which the state stopped being finite."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    x = x_init
    dt = 1.0 / steps
    for i in range(steps):
        t = i * dt
        x = x + dt * field_fn(x, t)
        if not torch.isfinite(x).all():
            raise NumericsError(f"non-finite state at Euler step {i}")
    return x
