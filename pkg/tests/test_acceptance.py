"""Acceptance suite: one PASS/FAIL line per criterion.

The benchmark criteria (4 to 7) train 3 seeds x {none, ret-s, ret-c} on the
standard 2000/500 benchmark plus the buffer ablation, roughly an hour on one
CPU core. Results are cached in pytest's cache directory keyed on a hash of
the package source, so an unchanged package reuses them; run with
``--cache-clear`` to force retraining.
"""

import hashlib
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import retrolab
from retrolab import cli, engine
from retrolab import evalkit as ev
from retrolab import predictor as pr
from retrolab.domain import AgentTrack, PredictionSet, Rollout, Sample, Trajectory

SEEDS = (0, 1, 2)
ABLATION_BS = (1, 2, 4, 6)

GRADCHECK_TOL = 1e-3
GRADCHECK_SECONDS = 60
ORACLE_INSTANCES, ORACLE_SECONDS = 1000, 10
LEAK_ROLLOUTS, LEAK_PERTURBATION, LEAK_SECONDS = 100, 10.0, 30
BENEFIT_MARGIN = 0.20  # retrospection final-step minADE at least 20 % below the baseline
MODEL_SECONDS = 15 * 60
MONOTONE_ALLOWANCE = 0.02
BASELINE_FLAT = 0.05
OOD_FRACTION, OOD_MIN_DROP = 0.10, 0.15
EQUIVARIANCE_TOL, METRIC_INVARIANCE_TOL = 1e-6, 1e-9


# --- benchmark runs -----------------------------------------------------------------

def _source_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(retrolab.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class Benchmark:
    """Lazily trains and evaluates models of the standard benchmark."""

    def __init__(self, cache_dir: Path):
        self.cache_dir = cache_dir
        self.source = _source_hash()
        self._data: dict = {}
        self._results: dict = {}

    def run_config(self, seed: int) -> cli.RunConfig:
        return cli.RunConfig(seed=seed)

    def data(self, seed: int):
        if seed not in self._data:
            train, val = cli.generate_splits(self.run_config(seed))
            self._data[seed] = (engine.pack(train), engine.pack(val), val)
        return self._data[seed]

    def result(self, seed: int, variant: str, B: int = 6) -> dict:
        key = (seed, variant, B)
        if key in self._results:
            return self._results[key]
        cfg = self.run_config(seed).train_config(variant)
        cfg = replace(cfg, rollout=replace(cfg.rollout, B=B))
        tag = engine.config_hash({"source": self.source, "train": cfg.to_dict(),
                                  "generator": self.run_config(seed).to_dict()["resolved"]["generator"]})
        path = self.cache_dir / f"{variant}-s{seed}-B{B}-{tag}.json"
        if path.exists():
            res = json.loads(path.read_text())
        else:
            train_p, val_p, val = self.data(seed)
            t0 = time.perf_counter()
            fit = engine.train(train_p, cfg, val_p)
            seconds = time.perf_counter() - t0
            pred = engine.predict_packed(fit.model, val_p)
            clean = ev.per_step_metrics(pred["corrected"], val_p.future)
            ood = ev.ood_eval(val, {variant: fit.model}, OOD_FRACTION, seed)[variant]
            res = {"seconds": seconds, "best_epoch": fit.best_epoch,
                   "clean": [r.minADE for r in clean], "ood": [r.minADE for r in ood],
                   "val_loss": float(pred["loss"].mean())}
            path.write_text(json.dumps(res))
        self._results[key] = res
        return res

    def curve(self, seed, variant, B=6, ood=False) -> np.ndarray:
        return np.array(self.result(seed, variant, B)["ood" if ood else "clean"])

    def mean_curve(self, variant, ood=False) -> np.ndarray:
        return np.mean([self.curve(s, variant, ood=ood) for s in SEEDS], axis=0)


@pytest.fixture(scope="session")
def bench(pytestconfig):
    return Benchmark(Path(pytestconfig.cache.mkdir("retrolab-acceptance")))


def _fmt(curve) -> str:
    return " ".join(f"{v:.3f}" for v in curve)


# --- 1: gradients ---------------------------------------------------------------------

def test_criterion_1_gradient_integrity(report):
    t0 = time.perf_counter()
    results = cli.run_gradcheck(0)
    seconds = time.perf_counter() - t0
    worst = max(err for _, err in results)
    ok = worst < GRADCHECK_TOL and seconds < GRADCHECK_SECONDS
    names = ", ".join(name for name, _ in results)
    assert report(1, ok, f"gradcheck max rel err {worst:.2e} < {GRADCHECK_TOL:g} over {names} "
                         f"in {seconds:.1f}s")


# --- 2: metric oracle -------------------------------------------------------------------

def _oracle(modes, gt):
    ades, fdes = [], []
    for mode in modes:
        total = 0.0
        for (px, py), (gx, gy) in zip(mode, gt):
            total += math.sqrt((px - gx) * (px - gx) + (py - gy) * (py - gy))
        ades.append(total / len(gt))
        ex, ey = mode[-1][0] - gt[-1][0], mode[-1][1] - gt[-1][1]
        fdes.append(math.sqrt(ex * ex + ey * ey))
    return min(ades), min(fdes), float(min(fdes) > 2.0)


def test_criterion_2_metric_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(ORACLE_INSTANCES):
        K, T = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        modes, gt = rng.normal(0, 3, size=(K, T, 2)), rng.normal(0, 3, size=(T, 2))
        pred, g = PredictionSet(modes, np.full(K, 1.0 / K)), Trajectory(gt)
        got = (ev.min_ade(pred, g), ev.min_fde(pred, g), ev.miss_rate([(pred, g)]))
        mismatches += got != _oracle(modes.tolist(), gt.tolist())
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and seconds < ORACLE_SECONDS
    assert report(2, ok, f"{mismatches} mismatches over {ORACLE_INSTANCES} instances (exact), {seconds:.1f}s")


# --- 3: leak-freedom ----------------------------------------------------------------------

def test_criterion_3_masking_leak_freedom(report):
    run = cli.RunConfig(seed=3, n_train=LEAK_ROLLOUTS, n_val=1)
    rollouts, _ = cli.generate_splits(run)
    packed = engine.pack(rollouts[:LEAK_ROLLOUTS])
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    changed = 0
    for variant in ("ret_s", "ret_c"):
        cfg = run.train_config(variant)
        model = engine.init_model(cfg)
        base = engine.closed_loop(packed, model.predictor, model.retro, cfg, keep_features=True)
        R, T_f, stride = packed.R, cfg.rollout.T_f, packed.stride
        for r in range(R):
            fut = packed.future.copy()
            for s in range(R):  # waypoints of step s+1 measured before step r+1's prediction
                measured = min(max(r - s, 0) * stride, T_f)
                tail = fut[:, s, measured:]
                fut[:, s, measured:] = tail + rng.choice([-LEAK_PERTURBATION, LEAK_PERTURBATION], tail.shape)
            local = pr.TargetFrame(packed.origin, packed.rotation).to_local(fut)
            pert = engine.Packed(packed.ids, packed.inputs, packed.origin, packed.rotation, fut, local,
                                 packed.stride, packed.dt)
            outs = engine.closed_loop(pert, model.predictor, model.retro, cfg, keep_features=True)
            for q in range(r + 1):
                changed += int(np.sum(outs[q].offsets.value != base[q].offsets.value))
    seconds = time.perf_counter() - t0
    ok = changed == 0 and seconds < LEAK_SECONDS
    assert report(3, ok, f"{changed} offset values changed across {LEAK_ROLLOUTS} rollouts x 2 variants "
                         f"under +-{LEAK_PERTURBATION:g} m perturbations, {seconds:.1f}s")


# --- 4: closed-loop benefit -------------------------------------------------------------------

def test_criterion_4_closed_loop_benefit(bench, report):
    passes, lines = 0, []
    slowest = 0.0
    for seed in SEEDS:
        base = bench.curve(seed, "none")[-1]
        gains = {}
        for v in ("ret_s", "ret_c"):
            gains[v] = 1.0 - bench.curve(seed, v)[-1] / base
        slowest = max(slowest, *(bench.result(seed, v)["seconds"] for v in ("none", "ret_s", "ret_c")))
        passes += all(g >= BENEFIT_MARGIN for g in gains.values())
        lines.append(f"seed {seed}: none {base:.3f}, ret-s -{100 * gains['ret_s']:.1f}%, "
                     f"ret-c -{100 * gains['ret_c']:.1f}%")
    ok = passes == len(SEEDS) and slowest < MODEL_SECONDS
    assert report(4, ok, f"{passes}/{len(SEEDS)} seeds with both variants >= {100 * BENEFIT_MARGIN:.0f}% "
                         f"below baseline at the final step ({'; '.join(lines)}); "
                         f"slowest model {slowest:.0f}s")


def test_engine_check_validation_loss(bench, report):
    wins = [bench.result(s, "ret_s")["val_loss"] < bench.result(s, "none")["val_loss"] for s in SEEDS]
    detail = ", ".join(f"seed {s}: {bench.result(s, 'ret_s')['val_loss']:.3f} vs "
                       f"{bench.result(s, 'none')['val_loss']:.3f}" for s in SEEDS)
    assert report("engine-check", all(wins), f"validation loss ret-s < none in {sum(wins)}/3 seeds ({detail})")


# --- 5: decay shape ------------------------------------------------------------------------------

def _decay_ok(curve) -> tuple[bool, bool]:
    first_gain, last_gain = curve[0] - curve[1], curve[-2] - curve[-1]
    monotone = all(curve[i + 1] <= curve[i] * (1 + MONOTONE_ALLOWANCE) for i in range(len(curve) - 1))
    return first_gain >= last_gain, monotone


def _spread(curve) -> float:
    return (curve.max() - curve.min()) / curve.min()


def test_criterion_5_decay_curve_shape(bench, report):
    verdicts, parts = [], []
    for v in ("ret_s", "ret_c"):
        mean = bench.mean_curve(v)
        front, monotone = _decay_ok(mean)
        verdicts += [front, monotone]
        per_seed = [_decay_ok(bench.curve(s, v)) for s in SEEDS]
        parts.append(f"{v} mean [{_fmt(mean)}] gain1->2 {mean[0] - mean[1]:.3f} >= gain6->7 "
                     f"{mean[-2] - mean[-1]:.3f}: {front}, non-increasing (+2%): {monotone}, "
                     f"per-seed {sum(a and b for a, b in per_seed)}/3")
    base = bench.mean_curve("none")
    flat = _spread(base) < BASELINE_FLAT
    verdicts.append(flat)
    per_seed_spread = ", ".join(f"{100 * _spread(bench.curve(s, 'none')):.1f}%" for s in SEEDS)
    parts.append(f"none mean [{_fmt(base)}] spread {100 * _spread(base):.1f}% < 5%: {flat} "
                 f"(per seed {per_seed_spread})")
    assert report(5, all(verdicts), "; ".join(parts))


# --- 6: buffer ablation ---------------------------------------------------------------------

def test_criterion_6_buffer_ablation(bench, report):
    verdicts, parts = [], []
    for v in ("ret_s", "ret_c"):
        drops = gains = 0
        table = []
        for seed in SEEDS:
            m = {B: bench.curve(seed, v, B)[-1] for B in ABLATION_BS}
            drops += m[1] > m[2]
            gains += (m[1] - m[2]) >= (m[4] - m[6])
            table.append("/".join(f"{m[B]:.3f}" for B in ABLATION_BS))
        verdicts += [drops >= 2, gains >= 2]
        parts.append(f"{v} m(B=1/2/4/6) per seed {', '.join(table)}: m1>m2 in {drops}/3, "
                     f"gain1->2 >= gain4->6 in {gains}/3")
    assert report(6, all(verdicts), "; ".join(parts))


# --- 7: o.o.d. robustness ---------------------------------------------------------------------

def test_criterion_7_ood_robustness(bench, report):
    parts, verdicts = [], []
    drops = {}
    for v in ("ret_s", "ret_c"):
        c = bench.mean_curve(v, ood=True)
        drops[v] = (c[0] - c[-1]) / c[0]
        verdicts.append(drops[v] >= OOD_MIN_DROP)
        per_seed = ", ".join(f"{100 * (1 - bench.curve(s, v, ood=True)[-1] / bench.curve(s, v, ood=True)[0]):.1f}%"
                             for s in SEEDS)
        parts.append(f"{v} [{_fmt(c)}] step1->7 -{100 * drops[v]:.1f}% (per seed {per_seed})")
    base = bench.mean_curve("none", ood=True)
    change = abs(base[-1] - base[0]) / base[0]
    verdicts.append(change < BASELINE_FLAT)
    per_seed = ", ".join(f"{100 * (bench.curve(s, 'none', ood=True)[-1] / bench.curve(s, 'none', ood=True)[0] - 1):+.1f}%"
                         for s in SEEDS)
    parts.append(f"none [{_fmt(base)}] change {100 * change:.1f}% < 5% (per seed {per_seed})")
    c_final, s_final = bench.mean_curve("ret_c", ood=True)[-1], bench.mean_curve("ret_s", ood=True)[-1]
    parts.append(f"non-blocking ret-c <= ret-s at the final step: {c_final <= s_final} "
                 f"({c_final:.3f} vs {s_final:.3f})")
    assert report(7, all(verdicts), "; ".join(parts))


# --- 8: determinism -------------------------------------------------------------------------------

TINY = {
    "n_train": 16, "n_val": 8,
    "rollout": {"T_h": 4, "T_f": 6, "R": 3, "K": 2, "B": 2},
    "train": {"epochs": 2, "batch_size": 8, "hidden": 8, "latent": 6, "ctx_dim": 4, "d_model": 4,
              "tok_hidden": 6, "ffn_hidden": 6},
    "buffer_lengths": [1, 2],
}


def test_criterion_8_determinism(tmp_path, report):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    commands = [["gen"], ["train", "--variant", "ret-s"], ["train", "--variant", "ret-c"],
                ["eval", "--variant", "ret-s"], ["ablate"], ["ood"]]
    for run in ("a", "b"):
        for cmd in commands:
            assert cli.main([*cmd, "--config", str(cfg), "--out", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.suffix in (".csv", ".jsonl")
                   and not p.name.startswith("manifest"))
    differing = [n for n in files if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = not differing and len(files) >= 7
    assert report(8, ok, f"{len(files) - len(differing)}/{len(files)} output files byte-identical "
                         f"across repeated runs ({', '.join(files)})")


# --- 9: equivariance -------------------------------------------------------------------------------

def _rigid(angle, shift):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])

    def tr(t: Trajectory) -> Trajectory:
        return Trajectory(t.points @ rot.T + shift, t.dt)

    def rollout(ro: Rollout) -> Rollout:
        samples = tuple(Sample(s.step_index, AgentTrack(s.target.agent_id, tr(s.target.history)),
                               tuple(AgentTrack(a.agent_id, tr(a.history)) for a in s.context), tr(s.future))
                        for s in ro.samples)
        return Rollout(ro.scenario_id, ro.config, ro.dt, samples)

    return rot, rollout


def test_criterion_9_equivariance(report):
    run = cli.RunConfig(seed=9, n_train=5, n_val=1)
    rollouts, _ = cli.generate_splits(run)
    rng = np.random.default_rng(9)
    models = {}
    for v in ("none", "ret_s", "ret_c"):
        m = engine.init_model(run.train_config(v))
        # perturb the initial weights so every path carries signal
        models[v] = engine.Model.from_flat(m.cfg, {k: a + 0.05 * rng.normal(size=a.shape)
                                                   for k, a in m.all_params().items()})
    worst_pred = worst_metric = 0.0
    for _ in range(10):
        angle, shift = rng.uniform(-math.pi, math.pi), rng.uniform(-500, 500, size=2)
        rot, move = _rigid(angle, shift)
        for ro in rollouts:
            moved = move(ro)
            for model in models.values():
                for a, b in zip(engine.run_rollout(ro, model), engine.run_rollout(moved, model)):
                    for x, y in ((a.raw, b.raw), (a.corrected, b.corrected)):
                        worst_pred = max(worst_pred, float(np.abs(x.modes @ rot.T + shift - y.modes).max()))
            for sa, sb in zip(ro.samples, moved.samples):
                pa = pr.predict(sa, models["none"].predictor, models["none"].cfg.predictor_config)
                pb = PredictionSet(pa.modes @ rot.T + shift, pa.probs)
                for f in (ev.min_ade, ev.min_fde):
                    worst_metric = max(worst_metric, abs(f(pa, sa.future) - f(pb, sb.future)))
    ok = worst_pred <= EQUIVARIANCE_TOL and worst_metric <= METRIC_INVARIANCE_TOL
    assert report(9, ok, f"max output discrepancy {worst_pred:.2e} m (<= {EQUIVARIANCE_TOL:g}), "
                         f"max metric change {worst_metric:.2e} m (<= {METRIC_INVARIANCE_TOL:g})")
