"""Forward noising, the flow-matching loss, and a matching Euler sampler.

Noising follows ``x_t = (1 - t) x0 + t eps``. The default regression target
is ``x0 - x_t`` taken literally; since that equals ``t (x0 - eps)``, each Euler
step is scaled by ``1 / t_k`` so that an exact predictor lands on ``x0``. The
``"velocity"`` target regresses ``x0 - eps`` and steps without the rescale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .tensorgrad import Tensor


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FlowSchedule:
    steps: int = 50
    t_min: float = 0.02

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        if not 0 < self.t_min <= 1:
            raise ValueError(f"t_min must lie in (0, 1], got {self.t_min}")

    def times(self) -> np.ndarray:
        """``t_k`` from 1 down to ``t_min``, uniform, strictly decreasing."""
        if self.steps == 1:
            return np.array([1.0])
        return np.linspace(1.0, self.t_min, self.steps)

    def deltas(self) -> np.ndarray:
        """Step sizes; the last step runs from ``t_min`` to 0."""
        t = self.times()
        return t - np.append(t[1:], 0.0)


def noise(x0, t, eps):
    """``(1 - t) x0 + t eps``; ``t`` is a scalar or broadcasts against the leading axis."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise tg.ShapeError("noise", x0.shape, eps.shape)
    t = np.asarray(t, dtype=x0.dtype)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("flow time must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1 - t) * x0 + t * eps


def flow_target(x0, x_t, eps, kind: str = "literal") -> np.ndarray:
    if kind == "literal":
        return np.asarray(x0) - np.asarray(x_t)
    if kind == "velocity":
        return np.asarray(x0) - np.asarray(eps)
    raise ValueError(f"unknown flow target {kind!r}")


def fm_loss(v_pred: Tensor, x0, x_t, eps=None, kind: str = "literal") -> Tensor:
    """Mean squared error of ``v_pred`` against the flow target (default ``x0 - x_t``)."""
    target = flow_target(x0, x_t, eps, kind)
    if v_pred.shape != target.shape:
        raise tg.ShapeError("fm_loss", v_pred.shape, target.shape)
    diff = tg.sub(v_pred, Tensor(target.astype(v_pred.dtype)))
    return tg.mean_all(tg.mul(diff, diff))


def euler_step(x: np.ndarray, v: np.ndarray, t: float, dt: float, kind: str = "literal") -> np.ndarray:
    if kind == "literal":
        return x + (dt / t) * v
    return x + dt * v


def sample(model, caption_tokens, schedule: FlowSchedule | None = None, seed: int = 0,
           predictor=None, return_latents: bool = False):
    """Integrate from standard-normal latents at ``t = 1`` down to 0 and decode.

    ``predictor(x, t, captions) -> v`` overrides the model's velocity head
    (used for oracle checks). Returns images ``(B, S, S)``.
    """
    schedule = schedule or FlowSchedule()
    cap = np.asarray(caption_tokens)
    if cap.ndim == 1:
        cap = cap[None]
    b = cap.shape[0]
    cfg = model.config
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, cfg.n_gen_tokens, cfg.latent_channels)).astype(model.dtype)
    if predictor is None:
        def predictor(xx, tt, cc):
            return model.gen_forward(xx, np.full(b, tt), cc).velocity.data
    for k, (t, dt) in enumerate(zip(schedule.times(), schedule.deltas())):
        v = np.asarray(predictor(x, float(t), cap))
        x = euler_step(x, v, float(t), float(dt), cfg.flow_target).astype(model.dtype)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite sampler state at step {k} (t={t:.4f})")
    lat = model.destandardize(x)
    images = np.clip(model.decode_gen(lat), 0.0, 1.0)
    return (images, lat) if return_latents else images
