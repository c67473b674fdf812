"""Base trajectory predictors: constant velocity and a small learned multimodal MLP.

The learned model works entirely in the target frame (origin at the
target's current position, +x along its latest heading), which makes its
world-frame output equivariant to rigid motions by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .domain import PredictionSet, Sample, Trajectory


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class TargetFrame:
    origin: np.ndarray  # [..., 2]
    rotation: np.ndarray  # [...], radians

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        """World points ``[..., n, 2]`` into this frame."""
        c, s = np.cos(self.rotation)[..., None], np.sin(self.rotation)[..., None]
        d = pts - np.asarray(self.origin)[..., None, :]
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        c, s = np.cos(self.rotation)[..., None], np.sin(self.rotation)[..., None]
        x, y = pts[..., 0], pts[..., 1]
        out = np.stack([c * x - s * y, s * x + c * y], axis=-1)
        return out + np.asarray(self.origin)[..., None, :]

    def rotate_to_world(self, vecs: np.ndarray) -> np.ndarray:
        """Rotate direction vectors ``[..., n, 2]`` without translating."""
        c, s = np.cos(self.rotation)[..., None], np.sin(self.rotation)[..., None]
        x, y = vecs[..., 0], vecs[..., 1]
        return np.stack([c * x - s * y, s * x + c * y], axis=-1)

    def index(self, i) -> "TargetFrame":
        return TargetFrame(np.asarray(self.origin)[i], np.asarray(self.rotation)[i])


def heading_of(history: np.ndarray) -> float:
    """Heading of the last non-degenerate history segment (previous one as fallback)."""
    for k in (1, 2):
        if len(history) <= k:
            break
        seg = history[-k] - history[-k - 1]
        if seg[0] != 0.0 or seg[1] != 0.0:
            return math.atan2(seg[1], seg[0])
    return 0.0


def frame_of(history: np.ndarray) -> TargetFrame:
    history = np.asarray(history, dtype=np.float64)
    return TargetFrame(history[-1].copy(), np.float64(heading_of(history)))


def constant_velocity_predict(history: Trajectory, T_f: int) -> Trajectory:
    pts = history.points
    if len(pts) < 2:
        raise InputError("constant velocity needs at least two history points")
    step = pts[-1] - pts[-2]
    k = np.arange(1, T_f + 1, dtype=np.float64)[:, None]
    return Trajectory(pts[-1] + k * step, history.dt)


@dataclass(frozen=True)
class PredictorConfig:
    T_h: int = 4
    T_f: int = 12
    K: int = 5
    hidden: int = 128
    latent: int = 64
    ctx_dim: int = 32
    max_context: int = 8
    pos_scale: float = 10.0  # meters per network unit

    @property
    def hist_len(self) -> int:
        return self.T_h + 1


@dataclass(frozen=True, eq=False)
class FrameInputs:
    """Target-frame model inputs for one sample (or a stacked batch)."""

    target: np.ndarray  # [..., T_h+1, 2]
    context: np.ndarray  # [..., M, T_h+1, 2]
    valid: np.ndarray  # [..., M]


def to_target_frame(sample: Sample, max_context: int = 8) -> tuple[FrameInputs, TargetFrame]:
    """Normalise a sample and keep the nearest ``max_context`` context agents.

    Context agents are ordered nearest-first at t=0 (ties broken by their
    coordinates), so the result does not depend on input agent order.
    """
    frame = frame_of(sample.target.history.points)
    target = frame.to_local(sample.target.history.points)
    n = len(target)
    ctx = np.zeros((max_context, n, 2))
    valid = np.zeros(max_context)
    if sample.context and max_context > 0:
        local = [frame.to_local(a.history.points) for a in sample.context]
        order = sorted(range(len(local)),
                       key=lambda j: (float(np.hypot(*local[j][-1])), tuple(local[j].ravel())))
        for slot, j in enumerate(order[:max_context]):
            ctx[slot] = local[j]
            valid[slot] = 1.0
    return FrameInputs(target, ctx, valid), frame


def init_params(cfg: PredictorConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    h2 = cfg.hist_len * 2
    shapes = [
        ("ctx.w0", h2, cfg.hidden), ("ctx.w1", cfg.hidden, cfg.ctx_dim),
        ("enc.w0", h2 + cfg.ctx_dim, cfg.hidden), ("enc.w1", cfg.hidden, cfg.latent),
        ("dec.w", cfg.latent, cfg.K * cfg.T_f * 2), ("prob.w", cfg.latent, cfg.K),
    ]
    p = {}
    for name, fi, fo in shapes:
        p[name] = nk.xavier_uniform(rng, fi, fo)
        p[name.replace(".w", ".b")] = np.zeros(fo)
    p["skip.w"] = nk.xavier_uniform(rng, h2, cfg.K * cfg.T_f * 2)
    return p


def _check(t: nk.Tensor, layer: str) -> nk.Tensor:
    if not np.all(np.isfinite(t.value)):
        raise nk.NumericError(f"non-finite values in predictor layer {layer!r}")
    return t


def forward(params, inputs: FrameInputs, cfg: PredictorConfig) -> tuple[nk.Tensor, nk.Tensor]:
    """Batched forward pass.

    Returns target-frame modes ``[N, K, T_f, 2]`` in meters and mode logits
    ``[N, K]``. ``params`` may hold arrays or tape tensors.
    """
    p = params
    scale = 1.0 / cfg.pos_scale
    n = inputs.target.shape[0]
    hist = inputs.target.reshape(n, -1) * scale
    ctx = inputs.context.reshape(n, inputs.context.shape[1], -1) * scale
    valid = inputs.valid[..., None]
    emb = nk.mlp_forward(ctx, [(p["ctx.w0"], p["ctx.b0"], "relu"), (p["ctx.w1"], p["ctx.b1"], "relu")])
    _check(emb, "ctx")
    count = np.maximum(valid.sum(axis=1), 1.0)
    pooled = nk.mul(nk.sum(nk.mul(emb, valid), axis=1), 1.0 / count)
    latent = nk.mlp_forward(nk.concat([nk.Tensor(hist), pooled], axis=-1),
                            [(p["enc.w0"], p["enc.b0"], "relu"), (p["enc.w1"], p["enc.b1"], "relu")])
    _check(latent, "enc")
    out = nk.add(nk.add(nk.matmul(latent, p["dec.w"]), p["dec.b"]), nk.matmul(hist, p["skip.w"]))
    modes = nk.mul(nk.reshape(out, (n, cfg.K, cfg.T_f, 2)), cfg.pos_scale)
    _check(modes, "dec")
    logits = _check(nk.add(nk.matmul(latent, p["prob.w"]), p["prob.b"]), "prob")
    return modes, logits


def stack_inputs(items: list[FrameInputs]) -> FrameInputs:
    return FrameInputs(np.stack([i.target for i in items]), np.stack([i.context for i in items]),
                       np.stack([i.valid for i in items]))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(sample: Sample, params: dict[str, np.ndarray], cfg: PredictorConfig) -> PredictionSet:
    """World-frame multimodal prediction for one sample."""
    inputs, frame = to_target_frame(sample, cfg.max_context)
    batch = FrameInputs(inputs.target[None], inputs.context[None], inputs.valid[None])
    modes, logits = forward(params, batch, cfg)
    world = frame.to_world(modes.value[0])
    return PredictionSet(world, softmax_np(logits.value[0]))
