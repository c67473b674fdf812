"""Displacement metrics, per-step curves, buffer ablation and agent-dropout study."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import engine
from .domain import PredictionSet, Rollout, Trajectory
from .scenegen import drop_agents

log = logging.getLogger(__name__)

MISS_THRESHOLD = 2.0  # meters; a miss is strictly farther than this


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class MetricRow:
    step: int
    minADE: float
    minFDE: float
    MR: float
    n: int


# Array forms work on modes [..., K, T, 2] and ground truth [..., T, 2].

def ade_per_mode(modes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    d = np.sqrt(((modes - gt[..., None, :, :]) ** 2).sum(-1))
    # sequential sum over waypoints so results do not depend on numpy's pairwise blocking
    total = np.zeros(d.shape[:-1])
    for t in range(d.shape[-1]):
        total = total + d[..., t]
    return total / d.shape[-1]


def fde_per_mode(modes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    return np.sqrt(((modes[..., -1, :] - gt[..., None, -1, :]) ** 2).sum(-1))


def min_ade_array(modes, gt) -> np.ndarray:
    return ade_per_mode(modes, gt).min(-1)


def min_fde_array(modes, gt) -> np.ndarray:
    return fde_per_mode(modes, gt).min(-1)


def miss_array(modes, gt) -> np.ndarray:
    return min_fde_array(modes, gt) > MISS_THRESHOLD


def _arrays(pred, gt):
    modes = pred.modes if isinstance(pred, PredictionSet) else np.asarray(pred, dtype=np.float64)
    g = gt.points if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if modes.shape[-2:] != g.shape:
        raise InputError(f"prediction {modes.shape} and ground truth {g.shape} disagree")
    return modes, g


def min_ade(pred, gt) -> float:
    """Smallest mean L2 distance between any mode and the ground truth."""
    return float(min_ade_array(*_arrays(pred, gt)))


def min_fde(pred, gt) -> float:
    return float(min_fde_array(*_arrays(pred, gt)))


def miss_rate(batch) -> float:
    """Fraction of (prediction, truth) pairs whose closest final point is > 2 m off."""
    batch = list(batch)
    if not batch:
        raise InputError("miss_rate needs at least one prediction")
    misses = sum(bool(miss_array(*_arrays(p, g))) for p, g in batch)
    return misses / len(batch)


def per_step_metrics(modes, gt) -> list[MetricRow]:
    """One row per rollout step, averaged over rollouts.

    ``modes`` is ``[N, R, K, T_f, 2]`` and ``gt`` ``[N, R, T_f, 2]``; lists of
    per-rollout arrays are accepted as long as they all share R.
    """
    if isinstance(modes, (list, tuple)):
        if len({len(m) for m in modes}) > 1 or len({len(g) for g in gt}) > 1:
            raise InputError("rollouts disagree on R")
        modes = np.stack([np.asarray(m, dtype=np.float64) for m in modes])
        gt = np.stack([np.asarray(g, dtype=np.float64) for g in gt])
    if modes.shape[0] == 0:
        raise InputError("no rollouts to evaluate")
    ade = min_ade_array(modes, gt)  # [N, R]
    fde = min_fde_array(modes, gt)
    miss = fde > MISS_THRESHOLD
    n = modes.shape[0]
    return [MetricRow(r + 1, float(ade[:, r].mean()), float(fde[:, r].mean()),
                      float(miss[:, r].mean()), n) for r in range(modes.shape[1])]


def evaluate(model: engine.Model, data, debug: bool = False) -> list[MetricRow] | tuple:
    """Per-step metrics of a model's corrected output on rollouts (or packed data)."""
    packed = data if isinstance(data, engine.Packed) else engine.pack(list(data), model.cfg.max_context)
    pred = engine.predict_packed(model, packed)
    rows = per_step_metrics(pred["corrected"], packed.future)
    if debug:
        return rows, per_step_metrics(pred["raw"], packed.future)
    return rows


def ablation_buffer_length(train_data, val_data, base: engine.TrainConfig, Bs) -> dict[int, float]:
    """Final-step validation minADE for one model trained per buffer length."""
    Bs = list(Bs)
    if not Bs:
        raise InputError("need at least one buffer length")
    unique = list(dict.fromkeys(int(b) for b in Bs))
    if len(unique) != len(Bs):
        log.warning("duplicate buffer lengths dropped: %s -> %s", Bs, unique)
    out = {}
    for B in unique:
        cfg = replace(base, rollout=replace(base.rollout, B=B))
        result = engine.train(train_data, cfg, val_data)
        out[B] = evaluate(result.model, val_data)[-1].minADE
    return out


def ood_eval(dataset: list[Rollout], models: dict[str, engine.Model], fraction: float = 0.10,
             seed: int = 0) -> dict[str, list[MetricRow]]:
    """Per-step metrics of each model on rollouts with a fraction of agents hidden."""
    dropped = [drop_agents(ro, fraction, seed) for ro in dataset]
    out = {}
    packed_cache: dict[int, engine.Packed] = {}
    for name, model in models.items():
        mc = model.cfg.max_context
        if mc not in packed_cache:
            packed_cache[mc] = engine.pack(dropped, mc)
        out[name] = evaluate(model, packed_cache[mc])
    return out


RESULT_COLUMNS = ("model", "variant", "B", "step", "minADE", "minFDE", "MR", "n", "seed")


def write_results_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in RESULT_COLUMNS})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def metric_dicts(rows: list[MetricRow], **extra) -> list[dict]:
    return [{**extra, **asdict(r)} for r in rows]
