"""CLI orchestration: generate / train / evaluate / allocate / experiment / sweep.

Every run is reproducible from (config, seed): datasets, train logs,
checkpoints and report files are all regenerated byte-identically. Configs
are INI files (key = value under sections); any CLI flag overrides its file
counterpart.
"""

import argparse
import configparser
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics as MT
from . import models as M
from . import trainer as TR
from .allocator import AllocationProblem, allocate_dual, write_result_csv
from .synth_campaign import (Campaign, CampaignConfig, LoggedDataset,
                             TreatmentList, empirical_curve)

METHODS = ("sbbm_u", "sbbm_b", "sbbm_softplus", "ipw", "cause", "pcan")

DISPLAY_NAMES = {"sbbm_u": "SBBM-U", "sbbm_b": "SBBM-B",
                 "sbbm_softplus": "SBBM-Sp", "ipw": "IPW",
                 "cause": "CausE", "pcan": "PCAN"}


@dataclass
class ExperimentConfig:
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    n_samples: int = 100_000
    unbiased_frac: float = 0.05
    n_test: int = 20_000
    data_seed: int = 1
    train: TR.TrainConfig = field(default_factory=TR.TrainConfig)
    train_overrides: Dict[str, Dict] = field(default_factory=dict)
    methods: Tuple[str, ...] = METHODS
    baseline: str = "sbbm_u"
    budget: float = 2.5

    def __post_init__(self):
        if not self.methods:
            raise ValueError("method list must be nonempty")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if self.baseline not in self.methods:
            raise ValueError(f"baseline {self.baseline!r} not in method list")

    def train_config_for(self, method: str) -> TR.TrainConfig:
        over = self.train_overrides.get(method, {})
        return dataclasses.replace(self.train, **over) if over else self.train


# ---------------------------------------------------------------------------
# config file parsing
# ---------------------------------------------------------------------------

def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        elem = like[0] if like else 1.0
        return tuple(type(elem)(p) for p in parts)
    return value


def _apply_section(obj, section):
    updates = {}
    for key, value in section.items():
        if not hasattr(obj, key):
            raise ValueError(f"unknown config key {key!r} for {type(obj).__name__}")
        updates[key] = _coerce(value, getattr(obj, key))
    return dataclasses.replace(obj, **updates)


def load_config(path: Optional[str] = None) -> ExperimentConfig:
    """Build an ExperimentConfig from an INI file; missing keys default."""
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    campaign = cfg.campaign
    train = cfg.train
    overrides: Dict[str, Dict] = {}
    data_updates: Dict = {}
    exp_updates: Dict = {}
    for name in parser.sections():
        section = parser[name]
        if name == "campaign":
            campaign = _apply_section(campaign, section)
        elif name == "train":
            train = _apply_section(train, section)
        elif name.startswith("train."):
            method = name.split(".", 1)[1]
            base = TR.TrainConfig()
            overrides[method] = {
                key: _coerce(val, getattr(base, key)) for key, val in section.items()}
        elif name == "data":
            for key, val in section.items():
                if key == "seed":
                    data_updates["data_seed"] = int(val)
                else:
                    data_updates[key] = _coerce(val, getattr(cfg, key))
        elif name == "experiment":
            for key, val in section.items():
                if key == "seed":
                    train = dataclasses.replace(train, seed=int(val))
                else:
                    exp_updates[key] = _coerce(val, getattr(cfg, key))
        else:
            raise ValueError(f"unknown config section [{name}]")
    return ExperimentConfig(campaign=campaign, train=train,
                            train_overrides=overrides,
                            **data_updates, **exp_updates)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _dataset_paths(out: Path) -> Dict[str, Path]:
    return {"d_u": out / "d_u.csv", "d_b": out / "d_b.csv",
            "test": out / "test.csv"}


def generate_datasets(cfg: ExperimentConfig, out: Path,
                      unbiased_frac: Optional[float] = None) -> Dict[str, Path]:
    """Write d_u.csv / d_b.csv / test.csv under `out` and return the paths."""
    out.mkdir(parents=True, exist_ok=True)
    frac = cfg.unbiased_frac if unbiased_frac is None else unbiased_frac
    campaign = Campaign(cfg.campaign)
    ss = np.random.SeedSequence(cfg.data_seed)
    seed_train, seed_test = ss.spawn(2)
    d_u, d_b = campaign.gen_dataset(cfg.n_samples, frac, seed_train)
    test = campaign.gen_test(cfg.n_test, seed_test, id_offset=cfg.n_samples)
    paths = _dataset_paths(out)
    d_u.to_csv(paths["d_u"])
    d_b.to_csv(paths["d_b"])
    test.to_csv(paths["test"])
    return paths


def load_datasets(paths: Dict[str, Path]) -> Dict[str, LoggedDataset]:
    return {name: LoggedDataset.from_csv(p) for name, p in paths.items()}


@dataclass
class MethodResult:
    method: str
    model: object
    log: TR.TrainLog
    report: MT.EvalReport


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: List[MT.EvalReport]
    methods: Dict[str, MethodResult]
    data_hashes: Dict[str, str]
    test: LoggedDataset


def run_experiment(cfg: ExperimentConfig, out: Path,
                   save_checkpoints: bool = False) -> ExperimentResult:
    """Train every configured method on one shared dataset and evaluate.

    All methods read the same three CSV files (hashes recorded in the
    manifest) and train with identical seeds; evaluation is AUC/PCE on the
    fully random test set plus model response curves.
    """
    out = Path(out)
    paths = _dataset_paths(out)
    if not all(p.exists() for p in paths.values()):
        paths = generate_datasets(cfg, out)
    hashes = {name: _sha256(p) for name, p in paths.items()}
    data = load_datasets(paths)
    d_u, d_b, test = data["d_u"], data["d_b"], data["test"]
    treatments = TreatmentList(cfg.campaign.treatments)

    results: Dict[str, MethodResult] = {}
    reports: List[MT.EvalReport] = []
    curves_model: List[Tuple[str, List[Tuple[float, float]]]] = []
    for method in cfg.methods:
        tc = cfg.train_config_for(method)
        try:
            model, log = TR.train_method(method, tc, d_u, d_b)
        except Exception as exc:
            raise RuntimeError(f"training failed for method {method!r}: {exc}") from exc
        preds = model.predict_raw(test.features, test.t)
        report = MT.evaluate_predictions(method, test.t, test.y, preds)
        reports.append(report)
        results[method] = MethodResult(method, model, log, report)
        curves_model.append((method, MT.response_curve(model, test, treatments)))
        log.to_csv(out / f"trainlog_{method}.csv")
        if save_checkpoints:
            M.save_model(out / f"{method}.ckpt", model, label=method)

    MT.attach_improvements(reports, cfg.baseline)
    MT.reports_to_csv(reports, out / "metrics.csv", out / "level_curves.csv")
    (out / "table.txt").write_text(
        MT.render_improvement_table(reports, DISPLAY_NAMES))
    _write_response_curves(out / "response_curves.csv", curves_model, test)
    manifest = {"data_hashes": hashes, "methods": list(cfg.methods),
                "baseline": cfg.baseline, "train_seed": cfg.train.seed,
                "data_seed": cfg.data_seed, "n_samples": cfg.n_samples,
                "unbiased_frac": cfg.unbiased_frac}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return ExperimentResult(cfg, reports, results, hashes, test)


def _write_response_curves(path: Path, curves, test: LoggedDataset) -> None:
    """Model mean-prediction curves plus the empirical test-label curve."""
    import csv as _csv
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["series", "t", "mean"])
        for t, mean in empirical_curve(test):
            w.writerow(["test_labels", "%.9g" % t, "%.9g" % mean])
        for method, curve in curves:
            for t, mean in curve:
                w.writerow([method, "%.9g" % t, "%.9g" % mean])


def run_sweep(cfg: ExperimentConfig, fractions: Sequence[float], out: Path
              ) -> Dict[float, ExperimentResult]:
    """Regenerate, retrain and evaluate once per unbiased fraction."""
    out = Path(out)
    results = {}
    rows = []
    for frac in fractions:
        if not (0.0 < frac < 1.0):
            raise ValueError(f"fractions must lie in (0, 1), got {frac}")
        sub = out / f"frac_{frac:g}"
        sub_cfg = dataclasses.replace(cfg, unbiased_frac=frac)
        generate_datasets(sub_cfg, sub)
        res = run_experiment(sub_cfg, sub)
        results[frac] = res
        for r in res.reports:
            rows.append((frac, r.method, r.auc, r.pce))
    import csv as _csv
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["unbiased_frac", "method", "auc", "pce"])
        for frac, method, auc_v, pce_v in rows:
            w.writerow(["%.9g" % frac, method, "%.9g" % auc_v, "%.9g" % pce_v])
    return results


def run_allocation(model, test: LoggedDataset, treatments: TreatmentList,
                   budget: float, campaign: Optional[Campaign] = None):
    """Score every (user, treatment) pair, allocate, and price with the oracle.

    Returns (problem, result, expected_payments) where expected_payments is
    the oracle-scored value of the chosen assignment (None without oracle).
    """
    t_arr = treatments.as_array()
    scores = np.column_stack([
        model.predict_raw(test.features, float(t)) for t in t_arr])
    problem = AllocationProblem(scores, treatments, budget)
    result = allocate_dual(problem)
    expected = None
    if campaign is not None:
        assigned_t = t_arr[result.assignment]
        expected = float(np.sum(campaign.oracle.true_mpp(test, assigned_t)))
    return problem, result, expected


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="training seed override")
    p.add_argument("--out", default="runs/out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="incentlab",
        description="synthetic incentive-campaign workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write d_u/d_b/test dataset CSVs")
    _add_common(p)

    p = sub.add_parser("train", help="train one method on generated data")
    _add_common(p)
    p.add_argument("--method", required=True, choices=METHODS)
    p.add_argument("--data-dir", required=True,
                   help="directory holding d_u.csv and d_b.csv")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset CSV")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset CSV (random test set)")

    p = sub.add_parser("allocate", help="budgeted allocation from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--users", required=True, help="dataset CSV with user features")
    p.add_argument("--budget", type=float, required=True,
                   help="per-capita budget (currency)")

    p = sub.add_parser("experiment", help="train + evaluate all methods")
    _add_common(p)

    p = sub.add_parser("sweep", help="experiment across unbiased fractions")
    _add_common(p)
    p.add_argument("--fractions", default="0.01,0.05,0.1,0.2",
                   help="comma-separated unbiased fractions")
    return ap


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    return cfg


def _cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    paths = generate_datasets(cfg, Path(args.out))
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    data_dir = Path(args.data_dir)
    d_u = LoggedDataset.from_csv(data_dir / "d_u.csv")
    d_b = LoggedDataset.from_csv(data_dir / "d_b.csv")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{args.method}.ckpt"
    tc = cfg.train_config_for(args.method)

    def save_best(model, cycle, score):
        M.save_model(ckpt, model, label=args.method)

    model, log = TR.train_method(args.method, tc, d_u, d_b,
                                 on_improve=save_best)
    M.save_model(ckpt, model, label=args.method)
    log.to_csv(out / f"trainlog_{args.method}.csv")
    print(f"checkpoint: {ckpt}")
    print(f"best_val_auc: {max(v for _, v in log.val_auc):.6f}")
    return 0


def _cmd_evaluate(args) -> int:
    model = M.load_model(args.checkpoint)
    data = LoggedDataset.from_csv(args.data)
    preds = model.predict_raw(data.features, data.t)
    report = MT.evaluate_predictions(Path(args.checkpoint).stem, data.t,
                                     data.y, preds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    MT.reports_to_csv([report], out / "metrics.csv", out / "level_curves.csv")
    print(f"auc: {report.auc:.6f}")
    print(f"pce: {report.pce:.6f}")
    return 0


def _cmd_allocate(args) -> int:
    cfg = _config_from_args(args)
    model = M.load_model(args.checkpoint)
    users = LoggedDataset.from_csv(args.users)
    treatments = TreatmentList(cfg.campaign.treatments)
    campaign = Campaign(cfg.campaign)
    problem, result, expected = run_allocation(model, users, treatments,
                                               args.budget, campaign)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_result_csv(out / "allocation.csv", problem, result,
                     user_ids=users.user_ids)
    print(f"lambda: {result.lam:.6g}")
    print(f"total_mpp: {result.total_mpp:.6f}")
    print(f"per_capita_spend: {result.per_capita_spend:.6f}")
    print(f"oracle_expected_payments: {expected:.6f}")
    return 0


def _cmd_experiment(args) -> int:
    cfg = _config_from_args(args)
    res = run_experiment(cfg, Path(args.out), save_checkpoints=True)
    print((Path(args.out) / "table.txt").read_text(), end="")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    fractions = tuple(float(v) for v in args.fractions.split(",") if v)
    run_sweep(cfg, fractions, Path(args.out))
    print(f"sweep table: {Path(args.out) / 'sweep.csv'}")
    return 0


_COMMANDS = {"generate": _cmd_generate, "train": _cmd_train,
             "evaluate": _cmd_evaluate, "allocate": _cmd_allocate,
             "experiment": _cmd_experiment, "sweep": _cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # machine-readable single error line
        print("ERROR " + json.dumps(
            {"type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
