"""Experiment driver: simulate -> train -> centers -> detect -> evaluate.

Configs are YAML files with a ``schema_version`` key; unknown keys anywhere
are rejected. Every random draw derives from the single master ``seed``
through a named stage, so one config always yields the same files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

import redkit
from redkit import baselines, detector, metrics
from redkit.errors import ConfigError, RedError
from redkit.model import ArchitectureConfig, RedModel
from redkit.signal_sim import (
    DatasetConfig, ImpairmentSpread, IQDataset, build_dataset, child_seed, file_sha256,
    perturb_batch,
)
from redkit.trainer import TrainConfig, ablate, config_dict, load_checkpoint, train

SCHEMA_VERSION = 1
ABLATION_VARIANTS = (("full", ()), ("-CE", ("CE",)), ("-ML", ("ML",)), ("-MSE", ("MSE",)))


def derive_seed(master, stage, index=0):
    """Seed for a named stage; independent of execution order."""
    return child_seed(master, zlib.crc32(stage.encode()), index) % (2 ** 63)


@dataclass
class DetectConfig:
    lambda_grid: list = field(default_factory=detector.default_lambda_grid)
    metric: str = detector.EUCLIDEAN
    # "match": reference features for the centers see the same test-time SNR;
    # "clean": centers come from the unperturbed training records
    center_snr: str = "match"

    def validate(self):
        if not self.lambda_grid or any(b < a for a, b in zip(self.lambda_grid,
                                                              self.lambda_grid[1:])):
            raise ConfigError("lambda_grid must be non-empty and ascending")
        if any(lam <= 0 for lam in self.lambda_grid):
            raise ConfigError("lambda values must be > 0")
        if self.metric not in (detector.EUCLIDEAN, detector.MAHALANOBIS):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.center_snr not in ("match", "clean"):
            raise ConfigError("center_snr must be 'match' or 'clean'")


@dataclass
class EvalConfig:
    snr_list: list = field(default_factory=lambda: [0.0, 20.0, 30.0])
    baselines: bool = True
    baseline_input: str = "features"   # or "raw": flattened normalized records
    lof_k: int = 20
    iforest_trees: int = 100
    iforest_psi: int = 256
    export_projection: bool = False

    def validate(self):
        if not self.snr_list:
            raise ConfigError("snr_list must not be empty")
        if self.baseline_input not in ("features", "raw"):
            raise ConfigError("baseline_input must be 'features' or 'raw'")
        if self.lof_k < 1 or self.iforest_trees < 1 or self.iforest_psi < 2:
            raise ConfigError("invalid baseline parameters")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: list = field(default_factory=list)   # loss components to drop

    def validate(self):
        self.dataset.validate()
        self.train.validate()
        self.detect.validate()
        self.eval.validate()
        self.arch()
        if self.ablation:
            ablate(self.train, self.ablation)
        return self

    def arch(self):
        return ArchitectureConfig(input_length=self.dataset.length,
                                  n_classes=self.dataset.n_known, **self.architecture)

    def train_config(self):
        cfg = self.train
        if self.ablation:
            cfg = ablate(cfg, self.ablation)
        return replace(cfg, seed=derive_seed(self.seed, "train"))

    def dataset_config(self):
        return replace(self.dataset, seed=derive_seed(self.seed, "dataset"))

    def to_dict(self):
        d = {"schema_version": SCHEMA_VERSION, "seed": self.seed,
             "dataset": asdict(self.dataset), "architecture": dict(self.architecture),
             "train": config_dict(self.train), "detect": asdict(self.detect),
             "eval": asdict(self.eval), "ablation": list(self.ablation)}
        d["dataset"]["split"] = list(self.dataset.split)
        d["eval"]["snr_list"] = [float(s) for s in self.eval.snr_list]
        return d

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    d = copy.deepcopy(d)
    version = d.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    top = {"seed", "dataset", "architecture", "train", "detect", "eval", "ablation"}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    ds = dict(d.get("dataset") or {})
    if "seed" in ds:
        raise ConfigError("dataset: seeds derive from the top-level seed")
    imp = _build(ImpairmentSpread, ds.pop("impairments", None), "dataset.impairments")
    if "split" in ds:
        ds["split"] = tuple(ds["split"])
    dataset = _build(DatasetConfig, ds, "dataset")
    dataset.impairments = imp
    arch = d.get("architecture") or {}
    allowed = {f.name for f in fields(ArchitectureConfig)} - {"input_length", "n_classes"}
    if set(arch) - allowed:
        raise ConfigError(f"architecture: unknown keys {sorted(set(arch) - allowed)}")
    tr = dict(d.get("train") or {})
    if "seed" in tr:
        raise ConfigError("train: seeds derive from the top-level seed")
    cfg = ExperimentConfig(
        seed=int(d.get("seed", 0)),
        dataset=dataset,
        architecture=dict(arch),
        train=_build(TrainConfig, tr, "train"),
        detect=_build(DetectConfig, d.get("detect"), "detect"),
        eval=_build(EvalConfig, d.get("eval"), "eval"),
        ablation=list(d.get("ablation") or []),
    )
    return cfg.validate()


def load_config(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


# -- evaluation ----------------------------------------------------------------

def _snr_key(snr):
    return "inf" if math.isinf(snr) else f"{snr:g}"


def _snr_index(snr):
    return 2 ** 31 - 1 if math.isinf(snr) else int(round(float(snr) * 1000)) % (2 ** 31)


def perturb_split(x, snr, seed, stream):
    if math.isinf(snr):
        return x.copy()
    seeds = [derive_seed(seed, stream, _snr_index(snr) * 1_000_003 + i) for i in range(len(x))]
    return perturb_batch(x, float(snr), seeds)


def evaluate_at_snr(model, dataset, snr, detect_cfg, eval_cfg, seed, return_features=False):
    """Detection metrics for the test split with test-time noise at ``snr`` dB."""
    x_ref, y_ref = dataset.select("train")
    x_test, y_test = dataset.select("test")
    x_test = perturb_split(x_test, snr, seed, "eval-test")
    if detect_cfg.center_snr == "match":
        x_ref = perturb_split(x_ref, snr, seed, "eval-ref")
    f_ref = model.features(x_ref)
    f_test = model.features(x_test)
    is_known = dataset.is_known(y_test)

    centers = detector.compute_centers(f_ref, y_ref, metric=detect_cfg.metric)
    scores = detector.min_distance(f_test, centers)
    roc = metrics.roc_auc(scores, is_known)
    points = []
    for lam in detect_cfg.lambda_grid:
        accepted, _, _ = detector.decide_batch(f_test, centers, lam)
        cc = metrics.ConfusionCounts.from_predictions(accepted, is_known)
        tpr, fpr = metrics.tpr_fpr(cc)
        points.append({"lambda": lam, "threshold": float(detector.threshold(lam, centers.dim)),
                       "tpr": tpr, "fpr": fpr, **asdict(cc)})
    result = {
        "snr_db": _snr_key(snr),
        "auc": roc.auc,
        "silhouette": metrics.silhouette(f_test, y_test),
        "feature_dim": int(centers.dim),
        "n_known_test": int(is_known.sum()),
        "n_rogue_test": int((~is_known).sum()),
        "operating_points": points,
    }
    if eval_cfg.baselines:
        if eval_cfg.baseline_input == "raw":
            b_ref, b_test = x_ref.reshape(len(x_ref), -1), x_test.reshape(len(x_test), -1)
        else:
            b_ref, b_test = f_ref, f_test
        lof = baselines.lof_fit(b_ref, k=min(eval_cfg.lof_k, len(b_ref) - 1))
        forest = baselines.iforest_fit(b_ref, eval_cfg.iforest_trees, eval_cfg.iforest_psi,
                                       seed=derive_seed(seed, "iforest"))
        result["baselines"] = {
            "lof": metrics.roc_auc(baselines.lof_score(lof, b_test), is_known).auc,
            "iforest": metrics.roc_auc(baselines.iforest_score(forest, b_test), is_known).auc,
        }
    extras = {"roc": roc}
    if eval_cfg.export_projection:
        extras["projection"] = metrics.project2d(f_test)
    if return_features:
        extras.update(f_ref=f_ref, f_test=f_test, y_test=y_test)
    return result, extras


def write_roc_csv(path, roc):
    lines = ["fpr,tpr,threshold"]
    lines += [f"{f!r},{t!r},{th!r}" for f, t, th in roc.rows()]
    Path(path).write_text("\n".join(lines) + "\n")


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- running -------------------------------------------------------------------

class StageError(RedError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Runner:
    """Runs named stages, skipping those whose recorded outputs are intact."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.manifest_path = self.out / "manifest.json"
        self.previous = {}
        if self.manifest_path.exists():
            try:
                old = json.loads(self.manifest_path.read_text())
                self.previous = {s["name"]: s for s in old.get("stages", [])}
            except (ValueError, KeyError):
                self.previous = {}
        self.stages = []

    def _intact(self, name, outputs):
        prev = self.previous.get(name)
        if prev is None:
            return False
        recorded = {o["path"]: o["sha256"] for o in prev["outputs"]}
        for p in outputs:
            rel = str(Path(p).relative_to(self.out))
            if rel not in recorded or not Path(p).exists() or file_sha256(p) != recorded[rel]:
                return False
        return True

    def stage(self, name, outputs, fn):
        outputs = [Path(p) for p in outputs]
        start = time.perf_counter()
        skipped = self._intact(name, outputs)
        if not skipped:
            try:
                fn()
            except RedError as exc:
                raise StageError(name, exc) from exc
            except (OSError, ValueError, FloatingPointError) as exc:
                raise StageError(name, exc) from exc
        self.stages.append({
            "name": name,
            "skipped": skipped,
            "seconds": round(time.perf_counter() - start, 3),
            "outputs": [{"path": str(p.relative_to(self.out)), "sha256": file_sha256(p)}
                        for p in outputs],
        })

    def write_manifest(self, config):
        manifest = {"config_hash": config.hash(), "code_version": redkit.__version__,
                    "stages": self.stages}
        _dump(self.manifest_path, manifest)
        return manifest


def run_experiment(config, out_dir, verbose=False):
    """Run every stage into ``out_dir``; returns ``(manifest, report)``."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner = _Runner(out)
    _dump(out / "config.json", config.to_dict())
    data_path = out / "dataset.reds"
    ckpt_path = out / "model.ckpt"
    log_path = out / "train_log.jsonl"

    runner.stage("gen-data", [data_path, data_path.with_suffix(".reds.json")],
                 lambda: build_dataset(config.dataset_config()).save(data_path))

    def do_train():
        ds = IQDataset.load(data_path)
        model = RedModel.build(config.arch(), seed=derive_seed(config.seed, "init"))
        train(model, ds, config.train_config(), checkpoint_path=ckpt_path, log_path=log_path,
              verbose=verbose)

    runner.stage("train", [ckpt_path, log_path], do_train)

    report_path = out / "report.json"
    snr_outputs = [out / f"roc_snr{_snr_key(float(s))}.csv" for s in config.eval.snr_list]

    def do_eval():
        ds = IQDataset.load(data_path)
        model, _ = load_checkpoint(ckpt_path)
        results = []
        for snr, roc_path in zip(config.eval.snr_list, snr_outputs):
            res, extras = evaluate_at_snr(model, ds, float(snr), config.detect, config.eval,
                                          derive_seed(config.seed, "eval"))
            write_roc_csv(roc_path, extras["roc"])
            if "projection" in extras:
                np.savetxt(roc_path.with_name(f"projection_snr{_snr_key(float(snr))}.csv"),
                           extras["projection"], delimiter=",", fmt="%.17g")
            results.append(res)
        _dump(report_path, {"schema_version": SCHEMA_VERSION, "config_hash": config.hash(),
                            "ablation": list(config.ablation), "results": results})

    runner.stage("detect-eval", [report_path, *snr_outputs], do_eval)
    manifest = runner.write_manifest(config)
    report = json.loads(report_path.read_text())
    return manifest, report


def run_suite(kind, config, out_dir, verbose=False):
    """Consolidated table for ``snr``, ``baselines`` or ``ablation``; written to out_dir."""
    out = Path(out_dir)
    config.validate()
    if kind in ("snr", "snr-sweep"):
        _, report = run_experiment(config, out / "run", verbose)
        rows = [{"snr_db": r["snr_db"], "auc": r["auc"], "silhouette": r["silhouette"]}
                for r in report["results"]]
        kind = "snr"
    elif kind in ("baselines", "baseline-compare"):
        cfg = copy.deepcopy(config)
        cfg.eval.baselines = True
        _, report = run_experiment(cfg, out / "run", verbose)
        rows = []
        for r in report["results"]:
            rows.append({"method": "proposed", "snr_db": r["snr_db"], "auc": r["auc"]})
            rows.append({"method": "iforest", "snr_db": r["snr_db"],
                         "auc": r["baselines"]["iforest"]})
            rows.append({"method": "lof", "snr_db": r["snr_db"], "auc": r["baselines"]["lof"]})
        kind = "baselines"
    elif kind == "ablation":
        rows = []
        for name, drop in ABLATION_VARIANTS:
            cfg = copy.deepcopy(config)
            cfg.ablation = list(drop)
            cfg.eval.snr_list = [config.eval.snr_list[0]]
            _, report = run_experiment(cfg, out / f"variant{name}", verbose)
            r = report["results"][0]
            rows.append({"variant": name, "snr_db": r["snr_db"], "auc": r["auc"],
                         "silhouette": r["silhouette"]})
    else:
        raise ConfigError(f"unknown suite kind {kind!r}")
    table = {"suite": kind, "config_hash": config.hash(), "rows": rows}
    _dump(out / f"suite_{kind}.json", table)
    return table
