"""Command-line experiment runner.

Subcommands: ``gen``, ``train``, ``eval``, ``ablate``, ``ood`` and
``gradcheck``. A run is configured by an optional JSON file; command-line
flags override the file, which overrides built-in defaults.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import engine, evalkit
from . import numkit as nk
from . import predictor as pr
from . import retrospect as rs
from . import scenegen as sg
from .domain import RolloutConfig

log = logging.getLogger("retrolab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LOG_COLUMNS = ("epoch", "split", "step", "minADE", "minFDE", "MR", "loss")


class UsageError(Exception):
    """Bad configuration or missing inputs; maps to exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    n_train: int = 2000
    n_val: int = 500
    generator: dict = field(default_factory=dict)  # GeneratorConfig overrides
    rollout: dict = field(default_factory=dict)  # RolloutConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    variants: tuple = ("none", "ret_s", "ret_c")
    buffer_lengths: tuple = (1, 2, 4, 6)
    ablation_variants: tuple = ("ret_s", "ret_c")
    ood_fraction: float = 0.10

    def generator_config(self) -> sg.GeneratorConfig:
        gen = _typed(sg.GeneratorConfig, self.generator, "generator", skip=("seed", "n_scenarios"))
        return replace(gen, seed=self.seed, n_scenarios=self.n_train + self.n_val)

    def rollout_config(self) -> RolloutConfig:
        return _typed(RolloutConfig, self.rollout, "rollout")

    def train_config(self, variant: str | None = None) -> engine.TrainConfig:
        cfg = _typed(engine.TrainConfig, self.train, "train", skip=("rollout", "seed"))
        cfg = replace(cfg, rollout=self.rollout_config(), seed=self.seed)
        return cfg if variant is None else engine.with_variant(cfg, variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved"] = {
            "generator": asdict(self.generator_config()),
            "rollout": asdict(self.rollout_config()),
            "train": self.train_config().to_dict(),
        }
        return d

    def validate(self) -> None:
        problems = []
        if self.n_train < 1 or self.n_val < 1:
            problems.append("n_train and n_val must be positive")
        if not 0.0 <= self.ood_fraction <= 1.0:
            problems.append("ood_fraction must lie in [0, 1]")
        for name in ("variants", "ablation_variants"):
            for v in getattr(self, name):
                try:
                    engine.normalize_variant(v)
                except ValueError as exc:
                    problems.append(f"{name}: {exc}")
        if any(int(b) < 1 for b in self.buffer_lengths):
            problems.append("buffer_lengths must be positive")
        try:
            problems += [f"generator: {p}" for p in self.generator_config().violations(self.rollout_config())]
            self.train_config()
        except (TypeError, ValueError) as exc:
            problems.append(str(exc))
        if problems:
            raise UsageError("invalid configuration:\n  " + "\n  ".join(problems))


def _typed(cls, overrides: dict, section: str, skip=()):
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(overrides) - set(names) - set(skip))
    if unknown:
        raise UsageError(f"unknown field(s) in '{section}': {', '.join(unknown)}")
    kwargs = {}
    for k, v in overrides.items():
        if k in skip:
            continue
        kwargs[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{section}: {exc}") from exc


def load_run_config(path: str | None, seed: int | None = None, out: str | None = None,
                    buffer_len: int | None = None) -> RunConfig:
    """Defaults, then the JSON file, then command-line flags."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise UsageError(f"unknown top-level field(s): {', '.join(unknown)}")
    for key in ("generator", "rollout", "train"):
        if not isinstance(data.get(key, {}), dict):
            raise UsageError(f"'{key}' must be a JSON object")
    data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    if buffer_len is not None:
        data["rollout"] = {**data.get("rollout", {}), "B": buffer_len}
    try:
        cfg = RunConfig(**data)
    except TypeError as exc:
        raise UsageError(str(exc)) from exc
    cfg.validate()
    return cfg


# --- file helpers ------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return v


def write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in LOG_COLUMNS})


def write_manifest(cfg: RunConfig, command: str, files: list[str]) -> Path:
    out = Path(cfg.out)
    d = cfg.to_dict()
    doc = {"command": command, "config": d, "config_hash": engine.config_hash(d),
           "seeds": {"generator": [cfg.seed, "scenario index"], "init": [cfg.seed, 1],
                     "shuffle": [cfg.seed, 2], "dropout": [cfg.seed, "crc32(scenario_id)"]},
           "files": sorted(files)}
    path = out / f"manifest-{command}.jsonl"
    path.write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")
    return path


def generate_splits(cfg: RunConfig) -> tuple[list, list]:
    """Scenarios 0..n_train-1 feed training, the next n_val validation."""
    gcfg, rcfg = cfg.generator_config(), cfg.rollout_config()
    scenarios = sg.generate_scenarios(gcfg)
    train = sg.build_dataset(scenarios[:cfg.n_train], rcfg)
    val = sg.build_dataset(scenarios[cfg.n_train:], rcfg)
    return train, val


def _read_split(data_dir: Path, name: str) -> list:
    path = data_dir / f"{name}.jsonl"
    if not path.exists():
        raise UsageError(f"dataset file {path} not found (run 'gen' first)")
    try:
        return sg.read_jsonl(path)
    except sg.DatasetFormatError as exc:
        raise UsageError(str(exc)) from exc


def _splits(cfg: RunConfig, data: str | None) -> tuple[list, list]:
    if data is None:
        return generate_splits(cfg)
    d = Path(data)
    return _read_split(d, "train"), _read_split(d, "val")


def _dataset_dt(dataset: list) -> float:
    return dataset[0].dt if dataset else 0.5


def _check_rollout_shape(cfg: engine.TrainConfig, dataset: list) -> None:
    if not dataset:
        raise UsageError("dataset is empty")
    d = dataset[0].config
    want = cfg.rollout
    for name in ("T_h", "T_f", "R", "stride"):
        if getattr(d, name) != getattr(want, name):
            raise UsageError(f"dataset {name}={getattr(d, name)} differs from configured {getattr(want, name)}")


# --- commands ----------------------------------------------------------------

def cmd_gen(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate_splits(cfg)
    sg.write_jsonl(train, out / "train.jsonl")
    sg.write_jsonl(val, out / "val.jsonl")
    write_manifest(cfg, "gen", ["train.jsonl", "val.jsonl"])
    print(f"wrote {len(train)} train / {len(val)} val rollouts to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = Path(args.data) if args.data else out
    train, val = _read_split(data_dir, "train"), _read_split(data_dir, "val")
    tcfg = cfg.train_config(args.variant or "ret-s")
    _check_rollout_shape(tcfg, train)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.lr is not None:
        tcfg = replace(tcfg, lr=args.lr)
    t0 = time.perf_counter()
    result = engine.train(train, tcfg, val)
    ckpt = out / f"model-{tcfg.variant}.json"
    log_csv = out / f"train-log-{tcfg.variant}.csv"
    engine.save_checkpoint(ckpt, result.model, result.best_epoch, _dataset_dt(train))
    write_log_csv(log_csv, result.log)
    write_manifest(replace(cfg, train={**cfg.train, **_overrides(tcfg, cfg)}), f"train-{tcfg.variant}",
                   [ckpt.name, log_csv.name])
    print(f"trained {tcfg.variant}: best epoch {result.best_epoch} of {result.epochs_run} "
          f"in {time.perf_counter() - t0:.1f}s -> {ckpt}")
    return EXIT_OK


def _overrides(tcfg: engine.TrainConfig, cfg: RunConfig) -> dict:
    base = cfg.train_config()
    return {k: getattr(tcfg, k) for k in ("epochs", "lr") if getattr(tcfg, k) != getattr(base, k)}


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    variant = engine.normalize_variant(args.variant or "ret-s")
    ckpt = Path(args.checkpoint) if args.checkpoint else out / f"model-{variant}.json"
    if not ckpt.exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    try:
        model, doc = engine.load_checkpoint(ckpt)
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    data_dir = Path(args.data) if args.data else out
    val = _read_split(data_dir, args.split)
    if not val:
        raise UsageError("evaluation dataset is empty")
    data_hash = engine.config_hash(engine.data_config(val[0].config, val[0].dt))
    if data_hash != doc.get("data_config_hash"):
        raise UsageError(f"checkpoint data config hash {doc.get('data_config_hash')} does not match "
                         f"dataset hash {data_hash}")
    rows = evalkit.evaluate(model, val)
    name = f"{model.variant}-B{model.cfg.rollout.B}"
    result_rows = evalkit.metric_dicts(rows, model=name, variant=model.variant,
                                       B=model.cfg.rollout.B, seed=model.cfg.seed)
    path = out / f"eval-{model.variant}.csv"
    evalkit.write_results_csv(path, result_rows)
    write_manifest(cfg, f"eval-{model.variant}", [path.name])
    final = rows[-1]
    print(f"{name} final step {final.step}: minADE {final.minADE:.4f} minFDE {final.minFDE:.4f} "
          f"MR {final.MR:.4f} (n={final.n})")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    Bs = [int(b) for b in args.buffer_lens.split(",")] if args.buffer_lens else list(cfg.buffer_lengths)
    variants = [args.variant] if args.variant else list(cfg.ablation_variants)
    train, val = _splits(cfg, args.data)
    train_p, val_p = engine.pack(train), engine.pack(val)
    rows = []
    for v in variants:
        base = cfg.train_config(v)
        if engine.normalize_variant(v) == "none":
            raise UsageError("the buffer ablation needs a retrospection variant")
        for B in dict.fromkeys(Bs):
            tcfg = replace(base, rollout=replace(base.rollout, B=B))
            result = engine.train(train_p, tcfg, val_p)
            metric_rows = evalkit.evaluate(result.model, val_p)
            rows += evalkit.metric_dicts(metric_rows, model=f"{tcfg.variant}-B{B}", variant=tcfg.variant,
                                         B=B, seed=cfg.seed)
            print(f"{tcfg.variant} B={B}: final-step minADE {metric_rows[-1].minADE:.4f}")
    path = out / "ablation.csv"
    evalkit.write_results_csv(path, rows)
    write_manifest(cfg, "ablate", [path.name])
    return EXIT_OK


def cmd_ood(cfg: RunConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = [args.variant] if args.variant else list(cfg.variants)
    train, val = _splits(cfg, args.data)
    train_p, val_p = engine.pack(train), engine.pack(val)
    models = {}
    for v in variants:
        tcfg = cfg.train_config(v)
        models[tcfg.variant] = engine.train(train_p, tcfg, val_p).model
    curves = evalkit.ood_eval(val, models, cfg.ood_fraction, cfg.seed)
    rows = []
    for name, metric_rows in curves.items():
        B = models[name].cfg.rollout.B
        rows += evalkit.metric_dicts(metric_rows, model=f"{name}-ood", variant=name, B=B, seed=cfg.seed)
        first, last = metric_rows[0].minADE, metric_rows[-1].minADE
        print(f"{name}: minADE step 1 {first:.4f} -> step {metric_rows[-1].step} {last:.4f} "
              f"({100 * (last - first) / first:+.1f}%)")
    path = out / "ood.csv"
    evalkit.write_results_csv(path, rows)
    write_manifest(cfg, "ood", [path.name])
    return EXIT_OK


# --- gradient check ----------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-3


def _gradcheck_cases(seed: int = 0) -> dict:
    """Small networks with fixed random inputs, one loss function per component."""
    rng = np.random.default_rng(seed)
    rollout = RolloutConfig(T_h=2, T_f=3, R=3, stride=1, K=2, B=2)
    tcfg = engine.TrainConfig(rollout=rollout, variant="ret_c", hidden=6, latent=5, ctx_dim=3, max_context=2,
                              d_model=4, tok_hidden=5, ffn_hidden=5, heads=2, seed=seed)
    rcfg, pcfg = tcfg.retro_config, tcfg.predictor_config
    feats = rng.normal(size=(2, rcfg.B, rcfg.feature_width)) * 3.0
    feats[..., -1] = 1.0
    tokens = rng.normal(size=(2, rcfg.B, rcfg.d_model))
    queries = rng.normal(size=(2, rcfg.T_f, rcfg.d_model))
    traj = rng.normal(size=(2, rcfg.T_f, 2)) * 5.0

    def proj(shape):
        return rng.normal(size=shape)

    p_s = rs.init_params(rcfg, "ret_s", rng)
    p_c = rs.init_params(rcfg, "ret_c", rng)
    for p in (p_s, p_c):
        for k in p:
            if k.endswith(".b"):
                p[k] = rng.normal(size=p[k].shape) * 0.1
    tok_keys = [k for k in p_s if k.startswith("tok.")]
    att_keys = [k for k in p_s if k.startswith(("att.", "ffn."))]
    c_tok = proj((2, rcfg.B, rcfg.d_model))
    c_att = proj((2, rcfg.B, rcfg.d_model))
    c_cross = proj((2, rcfg.T_f, rcfg.d_model))
    c_off = proj((2, rcfg.T_f, 2))

    def weighted(t, c):
        return nk.sum(nk.mul(t, c))

    inputs = pr.FrameInputs(rng.normal(size=(3, pcfg.T_h + 1, 2)) * 5,
                            rng.normal(size=(3, pcfg.max_context, pcfg.T_h + 1, 2)) * 10,
                            np.array([[True, True], [True, False], [False, False]]))
    p_pred = pr.init_params(pcfg, rng)
    for k in p_pred:
        if k.endswith(".b"):
            p_pred[k] = rng.normal(size=p_pred[k].shape) * 0.1
    c_modes = proj((3, pcfg.K, pcfg.T_f, 2))
    c_logits = proj((3, pcfg.K))

    def predictor_loss(p):
        modes, logits = pr.forward(p, inputs, pcfg)
        return nk.add(weighted(nk.mul(modes, 0.1), c_modes), weighted(logits, c_logits))

    return {
        "tokenizer": (lambda p: weighted(rs.tokenize(feats, p, rcfg), c_tok),
                      {k: p_s[k] for k in tok_keys}),
        "self-attention block": (lambda p: weighted(rs.attention_block(tokens, tokens, p, rcfg), c_att),
                                 {k: p_s[k] for k in att_keys}),
        "cross-attention block": (lambda p: weighted(rs.attention_block(queries, tokens, p, rcfg), c_cross),
                                  {k: p_c[k] for k in att_keys}),
        "Ret-S head": (lambda p: weighted(rs.ret_s_offsets(rs.tokenize(feats, p, rcfg), p, rcfg), c_off), p_s),
        "Ret-C head": (lambda p: weighted(rs.ret_c_offsets(traj, rs.tokenize(feats, p, rcfg), p, rcfg), c_off),
                       p_c),
        "predictor MLPs": (predictor_loss, p_pred),
    }


def run_gradcheck(seed: int = 0) -> list[tuple[str, float]]:
    return [(name, nk.grad_check(fn, params, step=1e-5))
            for name, (fn, params) in _gradcheck_cases(seed).items()]


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(cfg.seed)
    ok = True
    for name, err in results:
        passed = err < GRADCHECK_TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<24} max rel err {err:.3e}")
    print(f"gradcheck {'passed' if ok else 'FAILED'} in {time.perf_counter() - t0:.1f}s "
          f"(tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# --- entry point -------------------------------------------------------------

COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "ood": cmd_ood, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--buffer-len", type=int, dest="buffer_len", help="error buffer capacity B")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    variant = argparse.ArgumentParser(add_help=False)
    variant.add_argument("--variant", choices=["none", "ret-s", "ret-c", "ret_s", "ret_c"],
                         help="retrospection variant (train/eval default: ret-s; ablate/ood default: all configured)")
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="directory holding train.jsonl and val.jsonl")

    parser = argparse.ArgumentParser(prog="retrolab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/val rollout datasets")
    p = sub.add_parser("train", parents=[common, variant, data], help="train one model")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p = sub.add_parser("eval", parents=[common, variant, data], help="per-step metrics of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/model-VARIANT.json)")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p = sub.add_parser("ablate", parents=[common, variant, data], help="buffer-length ablation")
    p.add_argument("--buffer-lens", dest="buffer_lens", help="comma-separated B values, e.g. 1,2,4,6")
    sub.add_parser("ood", parents=[common, variant, data], help="agent-dropout robustness study")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, args.out, args.buffer_len)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except engine.TrainingDiverged as exc:
        print(f"error: training diverged in epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except nk.NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
