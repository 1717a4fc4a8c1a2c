"""Latent optimization: find ``w*`` whose render matches a target image.

The objective is ``mean((render(w) - target)**2) + reg * ||w - w_avg||**2`` with
pixels in [0, 1] and the norm taken over all 18x512 entries.  The optimized
variable is a single 512-vector broadcast to every row.

Two optimizers share that objective:

* the generic path probes the loss with central differences over the 512
  coordinates and takes gradient steps, halving the step whenever the loss
  would increase;
* the toy path knows the generator's linear map from the latent to its 18
  rendered projections, so it probes only those 18 coordinates and takes
  damped Gauss-Newton steps on the pixel residual.  Early passes compare
  blurred copies of both images, which widens the basin around small
  features (eyes, mouth); the last pass is the unblurred objective.

A run that ends with pixel MSE above ``restart_mse`` is repeated from up to
``restarts`` random starting latents (seeded from ``seed``), keeping the
lowest loss.  Either way the returned latent is the best one seen on the unblurred
objective, so the reported best-so-far loss never increases.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .generator import GeneratorBackend, RenderedImage
from .latent import NUM_LAYERS, LatentSource, LatentW, SemanticDirection, apply_direction, sample_z
from .seeding import derive_seed

log = logging.getLogger(__name__)


class InversionError(RuntimeError):
    pass


class Init(str, enum.Enum):
    W_AVG = "w_avg"
    RANDOM = "random"


@dataclass(frozen=True)
class InversionConfig:
    """Optimizer settings.

    ``step_size`` is the gradient step on the generic path; on the toy path the
    first Gauss-Newton step is damped by ``1 / step_size``.  ``blur_schedule``
    lists Gaussian sigmas in pixels at 256 px resolution (scaled with the image);
    only the toy path uses it.  The default ``restart_mse`` is about four
    times the MSE that 8-bit quantization alone leaves behind.  ``perceptual`` is an optional extra loss
    ``f(render, target) -> float`` weighted by ``perceptual_weight``; setting it
    forces the generic path.
    """

    max_iters: int = 400
    step_size: float = 0.01
    init: Init = Init.W_AVG
    regularizer_weight: float = 1e-9
    tolerance: float = 1e-6
    seed: int = 0
    probe_step: float = 1e-3
    blur_schedule: tuple = (16.0, 8.0, 4.0, 2.0, 0.0)
    perceptual: Callable[[np.ndarray, np.ndarray], float] | None = field(default=None, compare=False)
    perceptual_weight: float = 0.0
    restarts: int = 3
    restart_mse: float = 5e-6

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ValueError(f"max_iters must be a non-negative integer, got {self.max_iters}")
        for name in ("step_size", "tolerance", "probe_step"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v}")
        if int(self.restarts) != self.restarts or self.restarts < 0:
            raise ValueError(f"restarts must be a non-negative integer, got {self.restarts}")
        if not (np.isfinite(self.regularizer_weight) and self.regularizer_weight >= 0):
            raise ValueError(f"regularizer_weight must be finite and >= 0, got {self.regularizer_weight}")
        if any(not np.isfinite(s) or s < 0 for s in self.blur_schedule) or not self.blur_schedule:
            raise ValueError("blur_schedule must be a non-empty list of sigmas >= 0")
        if self.blur_schedule[-1] != 0:
            object.__setattr__(self, "blur_schedule", tuple(self.blur_schedule) + (0.0,))


@dataclass(frozen=True)
class InversionResult:
    w_star: LatentW
    final_loss: float
    iterations_used: int
    converged: bool
    pixel_mse: float
    history: tuple = ()

    def __post_init__(self):
        if not np.isfinite(self.final_loss):
            raise InversionError("final loss is not finite")


def _broadcast(u: np.ndarray) -> LatentW:
    return LatentW(np.broadcast_to(u, (NUM_LAYERS, u.shape[0])), LatentSource.INVERTED)


class _Objective:
    def __init__(self, backend, target, cfg):
        self.backend = backend
        self.target = target
        self.cfg = cfg
        self.w_avg = backend.w_avg.rows

    def reg(self, u):
        d = u[None, :] - self.w_avg
        return float(self.cfg.regularizer_weight * np.sum(d * d))

    def __call__(self, u, image=None):
        if image is None:
            image = self.backend.render(_broadcast(u))
        mse = float(np.mean((image - self.target) ** 2))
        total = mse + self.reg(u)
        if self.cfg.perceptual is not None and self.cfg.perceptual_weight:
            total += self.cfg.perceptual_weight * float(self.cfg.perceptual(image, self.target))
        if not np.isfinite(total):
            raise InversionError(f"non-finite loss (mse={mse}, |u|={np.linalg.norm(u):.3g})")
        return total, mse


def _initial(backend, cfg) -> np.ndarray:
    if cfg.init is Init.RANDOM:
        return backend.map(sample_z(cfg.seed)).rows.mean(axis=0)
    return backend.w_avg.rows.mean(axis=0)


def invert(backend: GeneratorBackend, target: RenderedImage, cfg: InversionConfig = InversionConfig()) -> InversionResult:
    """Fit a latent to ``target``; see the module docstring for the objective."""
    if tuple(target.size) != tuple(backend.output_size):
        raise InversionError(f"target is {target.size}, backend renders {backend.output_size}")
    from .toy import ToyGenerator

    objective = _Objective(backend, target.as_float(), cfg)
    run = _invert_toy if isinstance(backend, ToyGenerator) and cfg.perceptual is None else _invert_generic
    best = run(objective, _initial(backend, cfg), cfg)
    if cfg.max_iters == 0:
        return best
    for k in range(cfg.restarts):
        if best.pixel_mse <= cfg.restart_mse:
            break
        start = backend.map(sample_z(derive_seed(cfg.seed, "restart", k))).rows.mean(axis=0)
        log.info("inversion restart %d (pixel mse %.3g)", k + 1, best.pixel_mse)
        result = run(objective, start, cfg)
        if result.final_loss < best.final_loss:
            history = best.history + tuple(min(best.final_loss, v) for v in result.history)
            best = InversionResult(result.w_star, result.final_loss, best.iterations_used + result.iterations_used,
                                   result.converged, result.pixel_mse, history)
        else:
            best = InversionResult(best.w_star, best.final_loss, best.iterations_used + result.iterations_used,
                                   best.converged, best.pixel_mse, best.history + (best.final_loss,) * len(result.history))
    return best


def _invert_generic(objective: _Objective, u: np.ndarray, cfg: InversionConfig) -> InversionResult:
    loss, mse = objective(u)
    history = [loss]
    step = cfg.step_size
    h = cfg.probe_step
    it = 0
    converged = False
    while it < cfg.max_iters:
        it += 1
        grad = np.empty_like(u)
        for i in range(u.size):
            e = np.zeros_like(u)
            e[i] = h
            grad[i] = (objective(u + e)[0] - objective(u - e)[0]) / (2.0 * h)
        while True:
            cand = u - step * grad
            c_loss, c_mse = objective(cand)
            if c_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        improvement = loss - c_loss
        if c_loss <= loss:
            u, loss, mse = cand, c_loss, c_mse
        history.append(loss)
        if improvement < cfg.tolerance:
            converged = True
            break
    return InversionResult(_broadcast(u), loss, it, converged, mse, tuple(history))


def _invert_toy(objective: _Objective, u_init: np.ndarray, cfg: InversionConfig) -> InversionResult:
    backend = objective.backend
    J = backend.projection_jacobian()  # orthonormal rows
    u_avg = objective.w_avg.mean(axis=0)
    target = objective.target
    size = backend.size
    reg = cfg.regularizer_weight
    k = J.shape[0]
    h = cfg.probe_step

    def latent(x):
        # the component of the start point outside the rendered span is pure
        # regularizer cost, so it is dropped as soon as optimization begins
        base = u_avg + J.T @ (J @ (u_init - u_avg)) if reg > 0 else u_init
        return base + J.T @ (x - J @ base)

    x0 = J @ u_init
    best_loss, best_mse = objective(u_init)
    best_u = u_init
    history = [best_loss]
    it = 0
    converged = False
    x = x0.copy()
    for stage, sigma in enumerate(cfg.blur_schedule):
        mu = 1.0 / cfg.step_size
        last = stage == len(cfg.blur_schedule) - 1
        sp = sigma * size / 256.0
        blur = (lambda im, sp=sp: gaussian_filter(im, (sp, sp, 0))) if sp > 0 else (lambda im: im)
        tgt = blur(target).ravel()
        scale = 1.0 / np.sqrt(tgt.size)
        reg_scale = np.sqrt(reg * NUM_LAYERS)
        reg_anchor = J @ u_avg

        def residual(xv):
            img = backend.render_projections(xv)
            return np.concatenate([(blur(img).ravel() - tgt) * scale, reg_scale * (xv - reg_anchor)]), img

        r, img = residual(x)
        cur = float(r @ r)
        while it < cfg.max_iters:
            it += 1
            jac = np.empty((r.size, k))
            for i in range(k):
                e = np.zeros(k)
                e[i] = h
                jac[:, i] = (residual(x + e)[0] - residual(x - e)[0]) / (2.0 * h)
            a = jac.T @ jac
            g = jac.T @ r
            accepted = False
            while mu < 1e12:
                d = np.linalg.solve(a + mu * (np.diag(np.diag(a)) + 1e-12 * np.eye(k)), g)
                cand = x - d
                rc, img_c = residual(cand)
                c_cur = float(rc @ rc)
                if np.isfinite(c_cur) and c_cur < cur:
                    accepted = True
                    break
                mu *= 4.0
            if not np.isfinite(c_cur) and not accepted:
                raise InversionError(f"non-finite loss at iteration {it} (damping {mu:.3g})")
            if not accepted:
                if last:
                    converged = True
                break
            improvement = cur - c_cur
            x, r, cur, img = cand, rc, c_cur, img_c
            mu = max(mu / 3.0, 1e-9)
            u = latent(x)
            loss, mse = objective(u, img)
            if loss < best_loss:
                best_loss, best_mse, best_u = loss, mse, u
            history.append(best_loss)
            if improvement < cfg.tolerance * max(cur, 1e-300) or improvement < 1e-30:
                if last:
                    converged = True
                break
        if it >= cfg.max_iters and not converged:
            break
    if cfg.max_iters == 0:
        converged = False
    log.debug("toy inversion: %d iterations, loss %.3g", it, best_loss)
    return InversionResult(_broadcast(best_u), best_loss, it, converged, best_mse, tuple(history))


def invert_then_edit(backend: GeneratorBackend, target: RenderedImage, direction: SemanticDirection, coeff: float,
                     cfg: InversionConfig = InversionConfig()) -> RenderedImage:
    result = invert(backend, target, cfg)
    return backend.synthesize(apply_direction(result.w_star, direction, coeff))
