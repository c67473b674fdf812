"""Retrospection: a masked rolling error buffer and the two offset heads.

The buffer keeps the representative trajectory emitted at each of the last
``B`` rollout steps together with the ground-truth positions measured since.
Only positions that have actually been observed by the current step are ever
exposed; the rest of each row is zero-padded and flagged unavailable.

Every array in the buffer may carry leading batch axes, which lets the
training engine step many rollouts in lockstep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .domain import PredictionSet
from .predictor import TargetFrame

FEATURES_PER_ROW = 7  # pred xy, meas xy, diff xy, availability


class SequencingError(RuntimeError):
    """Buffer operations arrived out of step order."""


@dataclass
class BufferEntry:
    origin_step: int
    predicted: np.ndarray  # [..., T_f, 2] world
    measured: np.ndarray  # [..., n, 2] world, n <= T_f
    frame: TargetFrame | None = None

    @property
    def n_measured(self) -> int:
        return self.measured.shape[-2]


@dataclass
class ErrorBuffer:
    capacity: int
    T_f: int
    entries: list[BufferEntry] = field(default_factory=list)  # newest first

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("buffer capacity must be at least 1")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_step(self) -> int | None:
        return self.entries[0].origin_step if self.entries else None

    def ages(self, current_step: int) -> list[int]:
        return [current_step - e.origin_step for e in self.entries]

    def push_trajectory(self, trajectory: np.ndarray, frame: TargetFrame | None, step: int) -> None:
        if self.entries and step <= self.entries[0].origin_step:
            raise SequencingError(f"push at step {step} after step {self.entries[0].origin_step}")
        traj = np.array(trajectory, dtype=np.float64)
        if traj.shape[-2:] != (self.T_f, 2):
            raise ValueError(f"trajectory shape {traj.shape} does not end in ({self.T_f}, 2)")
        empty = np.zeros(traj.shape[:-2] + (0, 2))
        self.entries.insert(0, BufferEntry(step, traj, empty, frame))
        del self.entries[self.capacity:]

    def push(self, prediction: PredictionSet, frame: TargetFrame | None, step: int) -> None:
        """Store the most probable mode of ``prediction`` (world frame)."""
        self.push_trajectory(prediction.best_mode(), frame, step)

    def observe(self, waypoints, step: int) -> None:
        """Append newly measured positions ``[..., s, 2]`` to every entry.

        Entries already holding ``T_f`` measurements ignore further input.
        """
        if self.entries and step < self.entries[0].origin_step:
            raise SequencingError(f"observation at step {step} precedes newest entry")
        new = np.asarray(waypoints, dtype=np.float64)
        if new.ndim == 1:
            new = new[None]
        for e in self.entries:
            room = self.T_f - e.n_measured
            if room > 0:
                e.measured = np.concatenate([e.measured, new[..., :room, :]], axis=-2)

    def build_features(self, frame: TargetFrame) -> np.ndarray:
        """Error features ``[..., B, T_f*7 + 1]`` in ``frame``, newest entry first.

        Row layout per waypoint: (pred_x, pred_y, meas_x, meas_y, diff_x,
        diff_y, avail); the last column of each block flags a filled slot.
        """
        batch = np.shape(frame.rotation)
        width = self.T_f * FEATURES_PER_ROW + 1
        out = np.zeros(batch + (self.capacity, width))
        for slot, e in enumerate(self.entries):
            rows = np.zeros(batch + (self.T_f, FEATURES_PER_ROW))
            pred = frame.to_local(e.predicted)
            rows[..., 0:2] = pred
            n = e.n_measured
            if n:
                meas = frame.to_local(e.measured)
                rows[..., :n, 2:4] = meas
                rows[..., :n, 4:6] = pred[..., :n, :] - meas
                rows[..., :n, 6] = 1.0
            out[..., slot, :-1] = rows.reshape(batch + (-1,))
            out[..., slot, -1] = 1.0
        return out

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "T_f": self.T_f, "entries": [
            {"origin_step": e.origin_step, "predicted": e.predicted.tolist(),
             "measured": e.measured.tolist(),
             "frame": None if e.frame is None else
             {"origin": np.asarray(e.frame.origin).tolist(),
              "rotation": np.asarray(e.frame.rotation).tolist()}}
            for e in self.entries]}

    @classmethod
    def from_state(cls, state: dict) -> "ErrorBuffer":
        buf = cls(int(state["capacity"]), int(state["T_f"]))
        for d in state["entries"]:
            pred = np.array(d["predicted"], dtype=np.float64)
            meas = np.array(d["measured"], dtype=np.float64).reshape(pred.shape[:-2] + (-1, 2))
            fr = d["frame"]
            frame = None if fr is None else TargetFrame(np.array(fr["origin"]), np.array(fr["rotation"]))
            buf.entries.append(BufferEntry(int(d["origin_step"]), pred, meas, frame))
        return buf


# --- learned heads ---------------------------------------------------------

@dataclass(frozen=True)
class RetroConfig:
    T_f: int = 12
    B: int = 6
    d_model: int = 64
    tok_hidden: int = 128
    query_hidden: int = 64
    ffn_hidden: int = 128  # 0 disables the feed-forward sublayer
    heads: int = 1
    residual: bool = True
    pool: str = "flatten"  # Ret-S head input: "flatten" or "mean"
    pos_scale: float = 10.0

    @property
    def feature_width(self) -> int:
        return self.T_f * FEATURES_PER_ROW + 1


def _glorot(rng, p, name, fi, fo, bias=True):
    p[name + ".w"] = nk.xavier_uniform(rng, fi, fo)
    if bias:
        p[name + ".b"] = np.zeros(fo)


def init_params(cfg: RetroConfig, variant: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    if variant not in ("ret_s", "ret_c"):
        raise ValueError(f"no retrospection parameters for variant {variant!r}")
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    _glorot(rng, p, "tok.0", cfg.feature_width, cfg.tok_hidden)
    _glorot(rng, p, "tok.1", cfg.tok_hidden, d)
    for name in ("att.q", "att.k", "att.v"):
        _glorot(rng, p, name, d, d, bias=False)
    if cfg.ffn_hidden:
        _glorot(rng, p, "ffn.0", d, cfg.ffn_hidden)
        _glorot(rng, p, "ffn.1", cfg.ffn_hidden, d)
    if variant == "ret_s":
        head_in = d if cfg.pool == "mean" else cfg.B * d
        _glorot(rng, p, "head", head_in, cfg.T_f * 2)
    else:
        _glorot(rng, p, "qry.0", 2, cfg.query_hidden)
        _glorot(rng, p, "qry.1", cfg.query_hidden, d)
        _glorot(rng, p, "head", d, 2)
    return p


def _feature_scale(cfg: RetroConfig) -> np.ndarray:
    row = np.full(FEATURES_PER_ROW, 1.0 / cfg.pos_scale)
    row[-1] = 1.0
    return np.concatenate([np.tile(row, cfg.T_f), [1.0]])


def tokenize(features: np.ndarray, params, cfg: RetroConfig) -> nk.Tensor:
    """One token per buffer slot: ``[..., B, width] -> [..., B, d_model]``."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != cfg.feature_width:
        raise nk.ConfigurationError(
            f"feature width {features.shape[-1]} != T_f*7+1 = {cfg.feature_width}")
    x = features * _feature_scale(cfg)
    return nk.mlp_forward(x, [(params["tok.0.w"], params["tok.0.b"], "relu"),
                              (params["tok.1.w"], params["tok.1.b"], "identity")])


def attention_block(q_in, kv_in, params, cfg: RetroConfig) -> nk.Tensor:
    """Attention, optional residual, optional position-wise feed-forward."""
    h = nk.multi_head_attention(q_in, kv_in, params["att.q.w"], params["att.k.w"], params["att.v.w"],
                                heads=cfg.heads)
    if cfg.residual:
        h = nk.add(h, q_in)
    if cfg.ffn_hidden:
        f = nk.mlp_forward(h, [(params["ffn.0.w"], params["ffn.0.b"], "relu"),
                               (params["ffn.1.w"], params["ffn.1.b"], "identity")])
        h = nk.add(h, f) if cfg.residual else f
    return h


def ret_s_offsets(tokens, params, cfg: RetroConfig) -> nk.Tensor:
    """Self-attention over the error tokens, then a linear map to ``[..., T_f, 2]``."""
    tokens = nk.as_tensor(tokens)
    B, d = tokens.shape[-2], tokens.shape[-1]
    x = nk.add(tokens, nk.sinusoidal_positional_encoding(B, d))
    h = attention_block(x, x, params, cfg)
    lead = h.shape[:-2]
    if cfg.pool == "mean":
        flat = nk.mean(h, axis=-2)
    else:
        flat = nk.reshape(h, lead + (B * d,))
    out = nk.add(nk.matmul(flat if flat.ndim > 1 else nk.reshape(flat, (1, -1)), params["head.w"]),
                 params["head.b"])
    return nk.reshape(out, lead + (cfg.T_f, 2))


def embed_queries(trajectory, params, cfg: RetroConfig) -> nk.Tensor:
    """Per-waypoint MLP embedding plus positional encoding over the horizon."""
    q = nk.mul(trajectory, 1.0 / cfg.pos_scale)
    q = nk.mlp_forward(q, [(params["qry.0.w"], params["qry.0.b"], "relu"),
                           (params["qry.1.w"], params["qry.1.b"], "identity")])
    return nk.add(q, nk.sinusoidal_positional_encoding(cfg.T_f, cfg.d_model))


def ret_c_offsets(trajectory, tokens, params, cfg: RetroConfig) -> nk.Tensor:
    """Cross-attention from the current trajectory's waypoints to the error tokens.

    ``trajectory`` is the representative current prediction ``[..., T_f, 2]``
    in the current target frame; one 2-vector offset is emitted per waypoint.
    """
    tokens = nk.as_tensor(tokens)
    B, d = tokens.shape[-2], tokens.shape[-1]
    kv = nk.add(tokens, nk.sinusoidal_positional_encoding(B, d))
    q = embed_queries(trajectory, params, cfg)
    h = attention_block(q, kv, params, cfg)
    return nk.add(nk.matmul(h, params["head.w"]), params["head.b"])


def ret_c_offsets_for(prediction: PredictionSet, frame: TargetFrame, tokens, params,
                      cfg: RetroConfig) -> nk.Tensor:
    """Ret-C driven by a world-frame prediction's most probable mode."""
    return ret_c_offsets(frame.to_local(prediction.best_mode()), tokens, params, cfg)


def apply_offsets(prediction: PredictionSet, offsets, frame: TargetFrame | None = None) -> PredictionSet:
    """Add target-frame offsets ``[T_f, 2]`` to every mode; probabilities are untouched.

    With ``frame`` the prediction is taken to be in world coordinates and the
    offsets are rotated into the world before being added.
    """
    off = np.asarray(nk.value_of(offsets), dtype=np.float64)
    if off.shape != prediction.modes.shape[1:]:
        raise nk.ConfigurationError(f"offsets {off.shape} do not match modes {prediction.modes.shape}")
    if frame is not None:
        off = frame.rotate_to_world(off)
    return PredictionSet(prediction.modes + off[None], prediction.probs.copy())
