"""Joint estimation of the measurement field and per-tilt deformations.

The objective is ``l_data * L_data + l_op * L_op + L_reg`` where

* ``L_data`` compares the field, evaluated at deformed sensor coordinates,
  with the measured images;
* ``L_op`` penalizes the part of the sampled field that the tilt projector
  cannot reproduce after filtered backprojection, ``||g - A FBP(g)||^2``;
* ``L_reg`` is an anisotropic total variation of the sampled field along
  the tilt axis and the two sensor axes.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .adam import AdamState, adam_step
from .fbp import backproject_unscaled, fbp_adjoint, fbp_reconstruct
from .field import FieldConfig, FieldWeights, field_eval, field_init, field_stack
from .geometry import DeformationParams, TiltSeries, forward_all

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "DeformationLeaves",
    "deformed_coords",
    "loss_data",
    "loss_op",
    "loss_reg",
    "objective",
    "train",
    "extract_tomogram",
]


class TrainingDiverged(FloatingPointError):
    def __init__(self, term: str, iteration: int):
        super().__init__(f"non-finite {term} at iteration {iteration}")
        self.term = term
        self.iteration = iteration


@dataclass
class TrainConfig:
    lambda_data: float = 10.0
    lambda_op: float = 1.0
    lambda_theta: float = 1e-5
    lambda_x: float = 1e-5
    iterations: int = 1500
    lr_field: float = 3e-3
    lr_deform: float = 5e-2
    shift_bound_px: float = 10.0
    shear_bound: float = 0.10
    rot_bound_deg: float = 10.0
    warmup_op: int = 0              # L_op weight is zero before this iteration
    seed: int = 0
    pixel_fraction: float = 1.0     # fraction of sensor pixels used by L_data per step
    volume_shape: tuple[int, int, int] | None = None
    learn_shift: bool = True
    learn_shear: bool = True
    learn_rotation: bool = True
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        weights = (self.lambda_data, self.lambda_op, self.lambda_theta, self.lambda_x)
        if min(weights) < 0:
            raise ValueError(f"loss weights must be nonnegative, got {weights}")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not 0.0 < self.pixel_fraction <= 1.0:
            raise ValueError("pixel_fraction must be in (0, 1]")


@dataclass
class TrainResult:
    weights: FieldWeights
    deformations: DeformationParams
    history: dict[str, np.ndarray]
    timings: dict[str, float]


class DeformationLeaves:
    """Deformation parameters as graph leaves in px, percent and degrees.

    Working in these units keeps a single Adam learning rate meaningful for
    all three parameter kinds.
    """

    def __init__(self, params: DeformationParams):
        self.shift = ad.leaf(params.shift, name="shift_px")
        self.shear_pct = ad.leaf(100.0 * params.shear, name="shear_pct")
        self.rotation = ad.leaf(params.rotation, name="rot_deg")

    @property
    def leaves(self) -> list[ad.Expr]:
        return [self.shift, self.shear_pct, self.rotation]

    def params(self) -> DeformationParams:
        return DeformationParams(self.shift.value.copy(), self.shear_pct.value / 100.0,
                                 self.rotation.value.copy())


def _sensor_grid(n: int) -> tuple[np.ndarray, np.ndarray]:
    u = (np.arange(n) - (n - 1) / 2.0) * (2.0 / n)
    x1, x2 = np.meshgrid(u, u, indexing="ij")
    return x1.ravel(), x2.ravel()


def deformed_coords(deform: DeformationLeaves, angles, n: int, pixels: np.ndarray | None = None,
                    angle_scale: float = math.pi):
    """Column Exprs ``(theta, x1', x2')`` of ``T_phi(x)`` for every tilt and pixel."""
    angles = np.asarray(angles, dtype=np.float64)
    m = angles.size
    x1, x2 = _sensor_grid(n)
    if pixels is not None:
        x1, x2 = x1[pixels], x2[pixels]
    p = x1.size
    k = ad.reshape(ad.scale(deform.shear_pct, 0.01), (m, 1))
    alpha = ad.reshape(ad.scale(deform.rotation, math.pi / 180.0), (m, 1))
    ca, sa = ad.cos(alpha), ad.sin(alpha)
    v1 = ad.add(x1, ad.mul(k, x2))                       # (M, P)
    s1 = ad.scale(deform.shift[:, 0:1], 2.0 / n)
    s2 = ad.scale(deform.shift[:, 1:2], 2.0 / n)
    w1 = ca * v1 - sa * x2 + s1
    w2 = sa * v1 + ca * x2 + s2
    theta = np.broadcast_to((np.radians(angles) / angle_scale)[:, None], (m, p))
    return (ad.constant(theta.reshape(-1, 1)), ad.reshape(w1, (-1, 1)), ad.reshape(w2, (-1, 1)))


def loss_data(weights: FieldWeights, deform: DeformationLeaves, ts: TiltSeries,
              pixels: np.ndarray | None = None) -> ad.Expr:
    """Sum over tilts and pixels of ``(f(theta_m, T_m(x)) - y_m(x))^2``."""
    if len(deform.params()) != len(ts):
        raise ValueError(f"{len(deform.params())} deformations for {len(ts)} tilts")
    coords = deformed_coords(deform, ts.angles, ts.n, pixels, weights.config.angle_scale)
    target = ts.images.reshape(len(ts), -1)
    if pixels is not None:
        target = target[:, pixels]
    return ad.sum(ad.square(field_eval(weights, coords) - target.ravel()))


def _operator_residual(g: ad.Expr, angles, shape) -> ad.Expr:
    angles = np.asarray(angles, dtype=np.float64)

    def forward(x):
        return x - forward_all(fbp_reconstruct(x, angles, shape), angles)

    def adjoint(r):
        return r - fbp_adjoint(backproject_unscaled(r, angles, shape), angles)

    return ad.linop(g, forward, adjoint, name="I - A FBP")


def _op_term(g: ad.Expr, angles, shape) -> ad.Expr:
    return ad.sum(ad.square(_operator_residual(g, angles, shape)))


def _reg_term(g: ad.Expr, lambda_theta: float, lambda_x: float) -> ad.Expr:
    d_theta = ad.absolute(g[1:] - g[:-1])
    d_1 = ad.absolute(g[:, 1:, :] - g[:, :-1, :])
    d_2 = ad.absolute(g[:, :, 1:] - g[:, :, :-1])
    return ad.scale(ad.sum(d_theta), lambda_theta) + ad.scale(ad.sum(d_1) + ad.sum(d_2), lambda_x)


def loss_op(weights: FieldWeights, angles, n: int, shape=None) -> ad.Expr:
    """``||g - A FBP(g)||^2`` with ``g`` the field sampled on the grid at every tilt."""
    return _op_term(field_stack(weights, angles, n), angles, shape or (n, n, n))


def loss_reg(weights: FieldWeights, angles, n: int, lambda_theta: float, lambda_x: float) -> ad.Expr:
    """Forward-difference total variation of the sampled field (no wrap-around)."""
    if lambda_theta < 0 or lambda_x < 0:
        raise ValueError("regularization weights must be nonnegative")
    return _reg_term(field_stack(weights, angles, n), lambda_theta, lambda_x)


def objective(weights: FieldWeights, deform: DeformationLeaves, ts: TiltSeries, cfg: TrainConfig,
              iteration: int = 0, pixels: np.ndarray | None = None) -> tuple[ad.Expr, dict[str, ad.Expr]]:
    """Total objective and its unweighted terms (``L_reg`` carries its own weights)."""
    lam_op = cfg.lambda_op if iteration >= cfg.warmup_op else 0.0
    terms = {"data": loss_data(weights, deform, ts, pixels)}
    need_grid = lam_op > 0 or cfg.lambda_theta > 0 or cfg.lambda_x > 0
    if need_grid:
        g = field_stack(weights, ts.angles, ts.n)
        shape = cfg.volume_shape or (ts.n,) * 3
        terms["op"] = _op_term(g, ts.angles, shape) if lam_op > 0 else ad.constant(0.0)
        terms["reg"] = _reg_term(g, cfg.lambda_theta, cfg.lambda_x)
    else:
        terms["op"] = ad.constant(0.0)
        terms["reg"] = ad.constant(0.0)
    total = ad.scale(terms["data"], cfg.lambda_data) + ad.scale(terms["op"], lam_op) + terms["reg"]
    return total, terms


def train(ts: TiltSeries, cfg: TrainConfig, callback=None) -> TrainResult:
    """Minimize the joint objective with Adam from zero deformations.

    Field weights and deformation parameters use separate Adam states; the
    deformations are clamped to the configured box after every step.
    ``callback(iteration, losses, deformations)`` is called after each step.
    """
    rng = np.random.default_rng(cfg.seed)
    weights = field_init(cfg.field, seed=cfg.seed)
    deform = DeformationLeaves(DeformationParams.zeros(len(ts)))
    learnable = [leaf for leaf, on in zip(deform.leaves, (cfg.learn_shift, cfg.learn_shear,
                                                          cfg.learn_rotation)) if on]
    field_state = AdamState(lr=cfg.lr_field)
    deform_state = AdamState(lr=cfg.lr_deform)
    n_pixels = ts.n * ts.n
    keep = max(1, int(round(cfg.pixel_fraction * n_pixels)))

    history = {k: np.zeros(cfg.iterations) for k in ("data", "op", "reg", "total")}
    timings = {"forward": 0.0, "backward": 0.0, "update": 0.0}
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        pixels = None if keep == n_pixels else np.sort(rng.choice(n_pixels, keep, replace=False))
        total, terms = objective(weights, deform, ts, cfg, it, pixels)
        try:
            ad.evaluate(total, check_all=False)
        except ad.NonFiniteError:
            bad = next((name for name, t in terms.items()
                        if t.value is None or not np.isfinite(t.value).all()), "objective")
            raise TrainingDiverged(bad, it) from None
        t1 = time.perf_counter()
        grads = ad.backward(total, weights.leaves + learnable)
        t2 = time.perf_counter()

        new, _ = adam_step(weights.arrays(), [grads[w] for w in weights.leaves], field_state)
        weights.assign(new)
        if learnable:
            new, _ = adam_step([leaf.value for leaf in learnable],
                               [grads[leaf] for leaf in learnable], deform_state)
            for leaf, value in zip(learnable, new):
                leaf.value = value
        deform.shift.value = np.clip(deform.shift.value, -cfg.shift_bound_px, cfg.shift_bound_px)
        bound = 100.0 * cfg.shear_bound
        deform.shear_pct.value = np.clip(deform.shear_pct.value, -bound, bound)
        deform.rotation.value = np.clip(deform.rotation.value, -cfg.rot_bound_deg, cfg.rot_bound_deg)
        t3 = time.perf_counter()

        for name, t in terms.items():
            history[name][it] = float(t.value)
        history["total"][it] = float(total.value)
        timings["forward"] += t1 - t0
        timings["backward"] += t2 - t1
        timings["update"] += t3 - t2
        if callback is not None:
            callback(it, {k: history[k][it] for k in history}, deform)
        if it % 100 == 0 or it == cfg.iterations - 1:
            log.info("iter %d total %.6g data %.6g op %.6g reg %.6g", it, history["total"][it],
                     history["data"][it], history["op"][it], history["reg"][it])

    return TrainResult(weights, deform.params(), history, timings)


def extract_tomogram(weights: FieldWeights, angles, size) -> np.ndarray:
    """Filtered backprojection of the field sampled at the measured tilts."""
    shape = (size,) * 3 if np.isscalar(size) else tuple(size)
    n = max(shape)
    g = ad.evaluate(field_stack(weights, angles, n))
    return fbp_reconstruct(g, angles, shape)
