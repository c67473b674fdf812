"""Closed-loop rollout execution, loss, training and checkpoints.

Rollouts are stepped in lockstep as a batch: at every step the predictor
runs, the retrospection head reads the error buffer, the corrected output is
pushed back into the buffer and the buffer then receives the ground-truth
positions that became observable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numkit as nk
from . import predictor as pr
from . import retrospect as rs
from .domain import PredictionSet, Rollout, RolloutConfig, Trajectory

log = logging.getLogger(__name__)

VARIANTS = ("none", "ret_s", "ret_c")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, model: "Model", epoch: int):
        super().__init__(message)
        self.model = model
        self.epoch = epoch


def normalize_variant(name: str) -> str:
    v = name.replace("-", "_").lower()
    if v not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of none, ret-s, ret-c")
    return v


@dataclass(frozen=True)
class TrainConfig:
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    variant: str = "ret_s"
    wta_weight: float = 1.0
    cls_weight: float = 0.1
    lr: float = 2e-3
    lr_decay: float = 0.94  # multiplicative, applied after every epoch
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    divergence_factor: float = 1e6  # batch loss above factor * first batch loss = diverged
    epochs: int = 40
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    hidden: int = 128
    latent: int = 64
    ctx_dim: int = 32
    max_context: int = 8
    d_model: int = 64
    tok_hidden: int = 128
    ffn_hidden: int = 128
    heads: int = 1
    residual: bool = True
    pool: str = "flatten"
    buffer_stores: str = "corrected"  # or "raw"

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.cls_weight < 0:
            raise ValueError("cls_weight (lambda) must be >= 0")
        if self.buffer_stores not in ("corrected", "raw"):
            raise ValueError("buffer_stores must be 'corrected' or 'raw'")

    @property
    def predictor_config(self) -> pr.PredictorConfig:
        r = self.rollout
        return pr.PredictorConfig(r.T_h, r.T_f, r.K, self.hidden, self.latent, self.ctx_dim,
                                  self.max_context)

    @property
    def retro_config(self) -> rs.RetroConfig:
        r = self.rollout
        return rs.RetroConfig(r.T_f, r.B, self.d_model, self.tok_hidden, self.d_model,
                              self.ffn_hidden, self.heads, self.residual, self.pool)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["rollout"] = RolloutConfig(**d.get("rollout", {}))
        return cls(**d)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def data_config(cfg: RolloutConfig, dt: float) -> dict:
    return {"T_h": cfg.T_h, "T_f": cfg.T_f, "R": cfg.R, "stride": cfg.stride, "dt": dt}


@dataclass
class Model:
    cfg: TrainConfig
    predictor: dict[str, np.ndarray]
    retro: dict[str, np.ndarray] | None = None

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def all_params(self) -> dict[str, np.ndarray]:
        out = {"pred/" + k: v for k, v in self.predictor.items()}
        if self.retro is not None:
            out.update({"retro/" + k: v for k, v in self.retro.items()})
        return out

    @classmethod
    def from_flat(cls, cfg: TrainConfig, flat: dict[str, np.ndarray]) -> "Model":
        pred = {k[5:]: v for k, v in flat.items() if k.startswith("pred/")}
        retro = {k[6:]: v for k, v in flat.items() if k.startswith("retro/")} or None
        return cls(cfg, pred, retro)


def init_model(cfg: TrainConfig) -> Model:
    rng = np.random.default_rng([cfg.seed, 1])  # substream "init"
    pred = pr.init_params(cfg.predictor_config, rng)
    retro = rs.init_params(cfg.retro_config, cfg.variant, rng) if cfg.variant != "none" else None
    return Model(cfg, pred, retro)


# --- data packing ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Packed:
    """Target-frame inputs and truths for N rollouts x R steps."""

    ids: tuple[str, ...]
    inputs: pr.FrameInputs  # target [N,R,H,2], context [N,R,M,H,2], valid [N,R,M]
    origin: np.ndarray  # [N, R, 2]
    rotation: np.ndarray  # [N, R]
    future: np.ndarray  # [N, R, T_f, 2] world
    future_local: np.ndarray  # [N, R, T_f, 2]
    stride: int
    dt: float

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def R(self) -> int:
        return self.origin.shape[1]

    def subset(self, idx) -> "Packed":
        idx = np.asarray(idx)
        inp = pr.FrameInputs(self.inputs.target[idx], self.inputs.context[idx], self.inputs.valid[idx])
        return Packed(tuple(self.ids[i] for i in idx), inp, self.origin[idx], self.rotation[idx],
                      self.future[idx], self.future_local[idx], self.stride, self.dt)

    def frame(self, r: int) -> pr.TargetFrame:
        return pr.TargetFrame(self.origin[:, r], self.rotation[:, r])


def pack(dataset: list[Rollout], max_context: int = 8) -> Packed:
    if not dataset:
        raise ValueError("cannot pack an empty dataset")
    Rs = {len(ro.samples) for ro in dataset}
    strides = {ro.config.stride for ro in dataset}
    if len(Rs) != 1 or len(strides) != 1:
        raise ValueError("all rollouts must share R and stride")
    tgts, ctxs, vals, origins, rots, futs = [], [], [], [], [], []
    for ro in dataset:
        per = [pr.to_target_frame(s, max_context) for s in ro.samples]
        tgts.append([p[0].target for p in per])
        ctxs.append([p[0].context for p in per])
        vals.append([p[0].valid for p in per])
        origins.append([p[1].origin for p in per])
        rots.append([p[1].rotation for p in per])
        futs.append([s.future.points for s in ro.samples])
    origin = np.array(origins)
    rotation = np.array(rots, dtype=np.float64)
    future = np.array(futs)
    frame = pr.TargetFrame(origin, rotation)
    future_local = frame.to_local(future)
    inputs = pr.FrameInputs(np.array(tgts), np.array(ctxs), np.array(vals))
    return Packed(tuple(ro.scenario_id for ro in dataset), inputs, origin, rotation, future,
                  future_local, strides.pop(), dataset[0].dt)


# --- loss ------------------------------------------------------------------

def best_mode_index(modes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Mode with the smallest average L2 distance, ``[..., K, T, 2] -> [...]``."""
    d = np.sqrt(((modes - gt[..., None, :, :]) ** 2).sum(-1)).mean(-1)
    return np.argmin(d, axis=-1)


def step_loss_tensor(modes, logits, gt: np.ndarray, cfg: TrainConfig):
    """Per-sample winner-takes-all MSE + lambda * mode cross-entropy.

    ``modes`` ``[N,K,T,2]`` and ``logits`` ``[N,K]`` are tensors, ``gt``
    ``[N,T,2]`` is data, all in one frame. Returns (total, wta, ce) ``[N]``.
    """
    K = modes.shape[-3]
    best = best_mode_index(modes.value, gt)
    onehot = np.eye(K)[best]
    diff = nk.sub(modes, gt[:, None])
    sq = nk.sum(nk.square(diff), axis=-1)  # [N, K, T]
    wta = nk.sum(nk.mul(nk.mean(sq, axis=-1), onehot), axis=-1)
    ce = nk.mul(nk.sum(nk.mul(nk.log_softmax(logits, axis=-1), onehot), axis=-1), -1.0)
    total = nk.add(nk.mul(wta, cfg.wta_weight), nk.mul(ce, cfg.cls_weight))
    return total, wta, ce


def step_loss(corrected: PredictionSet, gt: Trajectory, lam: float = 0.1) -> dict[str, float]:
    """Loss of one prediction against its ground truth (probabilities, not logits)."""
    modes, g = corrected.modes, gt.points
    best = int(best_mode_index(modes, g))
    wta = float(((modes[best] - g) ** 2).sum(-1).mean())
    p = float(corrected.probs[best])
    ce = -math.log(p) if p > 0 else math.inf
    return {"wta": wta, "ce": ce, "total": wta + lam * ce}


# --- closed-loop core ------------------------------------------------------

@dataclass
class StepOutput:
    raw: nk.Tensor  # [N, K, T_f, 2] target frame
    logits: nk.Tensor  # [N, K]
    offsets: nk.Tensor | None  # [N, T_f, 2]
    corrected: nk.Tensor
    loss: nk.Tensor  # [N]
    wta: nk.Tensor
    ce: nk.Tensor
    features: np.ndarray | None = None


def _best_by_logits(modes_val: np.ndarray, logits_val: np.ndarray) -> np.ndarray:
    idx = np.argmax(logits_val, axis=-1)
    return modes_val[np.arange(len(idx)), idx]


def closed_loop(packed: Packed, predictor_params, retro_params, cfg: TrainConfig,
                keep_features: bool = False) -> list[StepOutput]:
    """Run R steps over all rollouts in ``packed``; parameters may be tape tensors."""
    pcfg, rcfg = cfg.predictor_config, cfg.retro_config
    variant = cfg.variant
    N = len(packed)
    buffer = rs.ErrorBuffer(rcfg.B, rcfg.T_f) if variant != "none" else None
    outputs = []
    for r in range(packed.R):
        inputs = pr.FrameInputs(packed.inputs.target[:, r], packed.inputs.context[:, r],
                                packed.inputs.valid[:, r])
        try:
            raw, logits = pr.forward(predictor_params, inputs, pcfg)
        except nk.NumericError as exc:
            raise nk.NumericError(f"rollout step {r + 1}: {exc}") from exc
        frame = packed.frame(r)
        offsets = feats = None
        corrected = raw
        if buffer is not None:
            feats = buffer.build_features(frame)
            tokens = rs.tokenize(feats, retro_params, rcfg)
            if variant == "ret_s":
                offsets = rs.ret_s_offsets(tokens, retro_params, rcfg)
            else:
                onehot = np.eye(pcfg.K)[np.argmax(logits.value, axis=-1)]
                query = nk.sum(nk.mul(raw, onehot[:, :, None, None]), axis=1)
                offsets = rs.ret_c_offsets(query, tokens, retro_params, rcfg)
            if not np.all(np.isfinite(offsets.value)):
                raise nk.NumericError(f"rollout step {r + 1}: non-finite retrospection offsets")
            corrected = nk.add(raw, nk.reshape(offsets, (N, 1, rcfg.T_f, 2)))
        loss, wta, ce = step_loss_tensor(corrected, logits, packed.future_local[:, r], cfg)
        outputs.append(StepOutput(raw, logits, offsets, corrected, loss, wta, ce,
                                  feats if keep_features else None))
        if buffer is not None:
            stored = corrected if cfg.buffer_stores == "corrected" else raw
            rep = _best_by_logits(stored.value, logits.value)
            buffer.push_trajectory(frame.to_world(rep), frame, step=r + 1)
            buffer.observe(packed.future[:, r, :packed.stride], step=r + 1)
    return outputs


def rollout_loss(outputs: list[StepOutput]) -> nk.Tensor:
    """Mean over steps and rollouts."""
    total = outputs[0].loss
    for o in outputs[1:]:
        total = nk.add(total, o.loss)
    return nk.mean(nk.mul(total, 1.0 / len(outputs)))


@dataclass
class StepResult:
    step: int
    raw: PredictionSet
    offsets: np.ndarray  # [T_f, 2] target frame
    corrected: PredictionSet
    losses: dict[str, float]


def run_rollout(rollout: Rollout, model: Model, mode: str = "eval") -> list[StepResult]:
    """Closed-loop pass over one rollout, returning world-frame step results.

    ``mode="train"`` additionally records the pass on a tape so gradients
    could be taken; the returned values are identical in both modes.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    packed = pack([rollout], model.cfg.max_context)
    if mode == "train":
        with nk.Tape():
            pt = {k: nk.Tensor(v, requires_grad=True) for k, v in model.predictor.items()}
            rt = None if model.retro is None else {
                k: nk.Tensor(v, requires_grad=True) for k, v in model.retro.items()}
            outs = closed_loop(packed, pt, rt, model.cfg)
    else:
        outs = closed_loop(packed, model.predictor, model.retro, model.cfg)
    T_f = model.cfg.rollout.T_f
    results = []
    for r, o in enumerate(outs):
        frame = packed.frame(r).index(0)
        probs = pr.softmax_np(o.logits.value[0])
        off = np.zeros((T_f, 2)) if o.offsets is None else o.offsets.value[0]
        results.append(StepResult(
            r + 1, PredictionSet(frame.to_world(o.raw.value[0]), probs), off,
            PredictionSet(frame.to_world(o.corrected.value[0]), probs.copy()),
            {"wta": float(o.wta.value[0]), "ce": float(o.ce.value[0]), "total": float(o.loss.value[0])}))
    return results


def predict_packed(model: Model, packed: Packed, batch_size: int = 512) -> dict[str, np.ndarray]:
    """World-frame raw and corrected modes ``[N, R, K, T_f, 2]``, probs ``[N, R, K]``
    and the training loss of every step ``[N, R]``."""
    raws, cors, probs, losses = [], [], [], []
    for start in range(0, len(packed), batch_size):
        sub = packed.subset(np.arange(start, min(start + batch_size, len(packed))))
        outs = closed_loop(sub, model.predictor, model.retro, model.cfg)
        origin, rot = sub.origin[:, :, None], sub.rotation[:, :, None]
        frame = pr.TargetFrame(origin, rot)
        raw = np.stack([o.raw.value for o in outs], axis=1)
        cor = np.stack([o.corrected.value for o in outs], axis=1)
        raws.append(frame.to_world(raw))
        cors.append(frame.to_world(cor))
        probs.append(np.stack([pr.softmax_np(o.logits.value) for o in outs], axis=1))
        losses.append(np.stack([o.loss.value for o in outs], axis=1))
    return {"raw": np.concatenate(raws), "corrected": np.concatenate(cors),
            "probs": np.concatenate(probs), "loss": np.concatenate(losses)}


# --- training --------------------------------------------------------------

def _clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def loss_and_grads(model: Model, packed: Packed) -> tuple[float, dict[str, np.ndarray]]:
    flat = model.all_params()
    tensors = {k: nk.Tensor(v, requires_grad=True, name=k) for k, v in flat.items()}
    pt = {k[5:]: t for k, t in tensors.items() if k.startswith("pred/")}
    rt = {k[6:]: t for k, t in tensors.items() if k.startswith("retro/")} or None
    with nk.Tape() as tape:
        loss = rollout_loss(closed_loop(packed, pt, rt, model.cfg))
    names = list(tensors)
    grads = dict(zip(names, tape.gradient(loss, [tensors[k] for k in names])))
    return float(loss.value), grads


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    best_epoch: int
    epochs_run: int


def train(dataset, cfg: TrainConfig, val=None, metrics_fn=None) -> TrainResult:
    """Joint end-to-end training of predictor and retrospection head.

    ``dataset``/``val`` are rollout lists or :class:`Packed`. Each epoch is
    validated per rollout step; the parameters with the best final-step
    validation minADE are returned (early stop after ``patience`` epochs
    without improvement).
    """
    from .evalkit import per_step_metrics  # local import: evalkit builds on engine

    train_p = dataset if isinstance(dataset, Packed) else pack(list(dataset), cfg.max_context)
    if len(train_p) == 0:
        raise ValueError("training needs a non-empty dataset")
    val_p = None if val is None else (val if isinstance(val, Packed) else pack(list(val), cfg.max_context))
    model = init_model(cfg)
    opt = nk.AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    shuffle_rng = np.random.default_rng([cfg.seed, 2])  # substream "shuffle"
    rows: list[dict] = []
    best = (math.inf, model, 0)
    stale = 0
    epoch = 0
    first_loss = None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_p))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = train_p.subset(np.sort(order[start:start + cfg.batch_size]))
            try:
                loss, grads = loss_and_grads(model, batch)
            except nk.NumericError as exc:
                raise TrainingDiverged(str(exc), best[1], epoch) from exc
            if not math.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", best[1], epoch)
            if first_loss is None:
                first_loss = loss
            elif cfg.divergence_factor and loss > cfg.divergence_factor * max(first_loss, 1.0):
                raise TrainingDiverged(f"loss {loss:.3g} exceeds {cfg.divergence_factor:g} x the first "
                                       f"batch loss {first_loss:.3g} in epoch {epoch}", best[1], epoch)
            flat, opt = nk.adam_step(model.all_params(), _clip(grads, cfg.clip_norm), opt)
            model = Model.from_flat(cfg, flat)
            losses.append(loss)
        opt.lr *= cfg.lr_decay
        train_loss = float(np.mean(losses))
        rows.append({"epoch": epoch, "split": "train", "step": 0, "minADE": float("nan"),
                     "minFDE": float("nan"), "MR": float("nan"), "loss": train_loss})
        monitor = val_p if val_p is not None else train_p
        try:
            pred = predict_packed(model, monitor)
        except nk.NumericError as exc:
            raise TrainingDiverged(str(exc), best[1], epoch) from exc
        metric_rows = per_step_metrics(pred["corrected"], monitor.future)
        split = "val" if val_p is not None else "train_eval"
        step_losses = pred["loss"].mean(axis=0)
        for m in metric_rows:
            rows.append({"epoch": epoch, "split": split, "step": m.step, "minADE": m.minADE,
                         "minFDE": m.minFDE, "MR": m.MR, "loss": float(step_losses[m.step - 1])})
        final = metric_rows[-1].minADE
        if not math.isfinite(final):
            raise TrainingDiverged(f"validation minADE became {final}", best[1], epoch)
        log.info("epoch %d loss %.4f final-step minADE %.4f", epoch, train_loss, final)
        if final < best[0]:
            best = (final, model, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    if cfg.epochs == 0:
        return TrainResult(model, rows, 0, 0)
    return TrainResult(best[1], rows, best[2], epoch)


# --- checkpoints -----------------------------------------------------------

def _arrays_json(params: dict[str, np.ndarray] | None):
    if params is None:
        return None
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(params.items())}


def _arrays_from_json(d):
    if d is None:
        return None
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def save_checkpoint(path, model: Model, epoch: int, dt: float) -> None:
    cfg = model.cfg.to_dict()
    doc = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "data_config": data_config(model.cfg.rollout, dt),
        "data_config_hash": config_hash(data_config(model.cfg.rollout, dt)),
        "epoch": epoch,
        "predictor": _arrays_json(model.predictor),
        "retro": _arrays_json(model.retro),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[Model, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    cfg = TrainConfig.from_dict(doc["config"])
    model = Model(cfg, _arrays_from_json(doc["predictor"]), _arrays_from_json(doc["retro"]))
    return model, doc


def with_variant(cfg: TrainConfig, variant: str, **changes) -> TrainConfig:
    return replace(cfg, variant=normalize_variant(variant), **changes)
