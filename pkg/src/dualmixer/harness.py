"""Run orchestration: dataset loading, the two training modes, evaluation,
ablation and grid runners, and feature export.

A run is fully described by a RunConfig; its SHA-derived hash names the run
directory, ties reports to configurations, and lets interrupted sweeps
resume by skipping cells whose reports already exist. Reports are written
atomically and reruns of the same (config, seed) reproduce metrics exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import data as dd
from . import fsgri as fs
from . import model as dm
from . import numerics as nx
from . import synthdata as sx
from .data import WindowSample
from .numerics import Tensor

logger = logging.getLogger(__name__)

DATASETS = ("fd001", "fd002", "fd003", "fd004", "synth")
MODES = ("standard", "fsgri")

# Built-in synthetic benchmark dimensions (dataset="synth"); the generator
# seeds derive from the run seed so both training modes see identical data.
SYNTH_TRAIN_UNITS = 20
SYNTH_TEST_UNITS = 10
SYNTH_CYCLES = (90, 140)
SYNTH_VARS = 14
SYNTH_GAMMA = 2.0
SYNTH_NOISE = 0.05

# Windows evaluated per stacked forward in the shared prediction path.
PREDICT_CHUNK = 256

# Predictions with labels below this are excluded from the relative error
# metric; end-of-life labels are 0 and would divide by zero.
MAPE_FLOOR = 0.01


@dataclass(frozen=True)
class RunConfig:
    """One run's full recipe; defaults follow the reference setup."""

    dataset: str = "synth"
    data_dir: str = "data/CMAPSS"
    mode: str = "standard"
    variant: str = "full"
    seed: int = 1
    out_dir: str = "runs"
    b: int = 128
    lr: float = 1e-2
    w: int = 30
    sl: int = 1
    epochs: int = 100
    n_layers: int = 6
    d: int = 32
    m: int = 5
    beta: float = 0.4
    sigma1: float = 0.3
    sigma2: float = 0.15
    lam: float = 2.0
    tau: float = 0.1
    holdout: bool = False

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.variant not in dm.VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("b", "w", "sl", "epochs", "n_layers", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        self.fsgri_config().validate()

    def fsgri_config(self) -> fs.FsgriConfig:
        return fs.FsgriConfig(m=self.m, beta=self.beta, sigma1=self.sigma1,
                              sigma2=self.sigma2, lam=self.lam, tau=self.tau,
                              b=self.b)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def run_name(self) -> str:
        return (f"{self.dataset}-{self.mode}-{self.variant}"
                f"-N{self.n_layers}-d{self.d}-s{self.seed}-{self.config_hash()}")


def config_from_dict(values: dict) -> RunConfig:
    """Build a RunConfig from exactly its own field names."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    return RunConfig(**values)


@dataclass
class RunReport:
    """Everything a finished run leaves behind; serialized as report.json."""

    config: dict
    config_hash: str
    seed: int
    git_describe: str
    epoch_losses: list
    epoch_detail: list
    rmse: float
    mape: Optional[float]
    wall_clock_sec: float
    param_count: int
    anchor_batch_size: Optional[int] = None

    def save(self, path: str) -> None:
        """Atomic write: a temp file in the target directory, then rename."""
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "RunReport":
        with open(path) as f:
            return cls(**json.load(f))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _epoch_seed(seed: int, epoch: int) -> int:
    # distinct per (seed, epoch) for any sane epoch count
    return seed * 1_000_003 + epoch


# --------------------------------------------------------------------------
# dataset loading
# --------------------------------------------------------------------------

def _load_cmapss(cfg: RunConfig) -> tuple[list[WindowSample], list[WindowSample]]:
    tag = cfg.dataset.upper()
    train_path = os.path.join(cfg.data_dir, f"train_{tag}.txt")
    test_path = os.path.join(cfg.data_dir, f"test_{tag}.txt")
    rul_path = os.path.join(cfg.data_dir, f"RUL_{tag}.txt")
    train_series = [dd.select_variables(s) for s in dd.parse_cmapss(train_path)]
    test_series = [dd.select_variables(s) for s in dd.parse_cmapss(test_path)]
    ruls = dd.parse_rul(rul_path)
    stats = dd.fit_minmax([s.sensors for s in train_series])
    train = dd.build_training_windows(train_series, stats, cfg.w, cfg.sl)
    test = dd.build_test_set(test_series, ruls, stats, cfg.w)
    return train, test


def _load_synth(cfg: RunConfig) -> tuple[list[WindowSample], list[WindowSample]]:
    base = cfg.seed * 7919
    train_units = sx.generate(sx.SynthSpec(
        n_units=SYNTH_TRAIN_UNITS, cycles=SYNTH_CYCLES, n_vars=SYNTH_VARS,
        gamma=SYNTH_GAMMA, noise_std=SYNTH_NOISE, seed=base))
    full_test = sx.generate(sx.SynthSpec(
        n_units=SYNTH_TEST_UNITS, cycles=SYNTH_CYCLES, n_vars=SYNTH_VARS,
        gamma=SYNTH_GAMMA, noise_std=SYNTH_NOISE, seed=base + 1))
    test_units, ruls = sx.make_test_split(full_test, seed=base + 2)
    stats = dd.fit_minmax([u.sensors for u in train_units])
    train = dd.build_training_windows(train_units, stats, cfg.w, cfg.sl)
    test = dd.build_test_set(test_units, ruls, stats, cfg.w)
    return train, test


def load_dataset(cfg: RunConfig) -> tuple[list[WindowSample], list[WindowSample]]:
    """Training windows and evaluation samples for the configured dataset.

    With holdout=True, 10% of the training units (seeded pick) replace the
    test split; their windows become the evaluation samples.
    """
    if cfg.dataset == "synth":
        train, test = _load_synth(cfg)
    else:
        train, test = _load_cmapss(cfg)
    if cfg.holdout:
        units = sorted({s.unit_id for s in train})
        rng = np.random.default_rng((cfg.seed, 0x401D))
        n_held = max(1, len(units) // 10)
        held = set(int(u) for u in rng.choice(units, size=n_held, replace=False))
        test = [s for s in train if s.unit_id in held]
        train = [s for s in train if s.unit_id not in held]
        logger.info("holdout: %d units held out (%d eval windows)", n_held, len(test))
    return train, test


# --------------------------------------------------------------------------
# training and evaluation
# --------------------------------------------------------------------------

def _forward_many(params: dm.DualMixerParams,
                  samples: Sequence[WindowSample],
                  want_features: bool = False):
    """Raw (unclamped) predictions, and optionally flattened features, for
    any number of windows, in chunks of PREDICT_CHUNK."""
    preds = []
    feats = []
    l, d = params.config.l, params.config.d
    for start in range(0, len(samples), PREDICT_CHUNK):
        chunk = samples[start:start + PREDICT_CHUNK]
        x = Tensor(np.vstack([s.values for s in chunk]))
        f, r = dm.forward_batch(params, x, len(chunk))
        preds.append(r.data[:, 0])
        if want_features:
            feats.append(f.data.reshape(len(chunk), l * d))
    preds_arr = np.concatenate(preds) if preds else np.zeros(0)
    feats_arr = np.concatenate(feats) if feats else np.zeros((0, l * d))
    return (preds_arr, feats_arr) if want_features else preds_arr


def predict_samples(params: dm.DualMixerParams,
                    samples: Sequence[WindowSample]) -> np.ndarray:
    """Evaluation-ready predictions, clamped to [0, 1]. The single path
    behind both the metrics and the feature export."""
    return np.clip(_forward_many(params, samples), 0.0, 1.0)


def compute_metrics(labels: np.ndarray,
                    preds: np.ndarray) -> tuple[float, Optional[float]]:
    """(RMSE, MAPE%) given labels and already-clamped predictions.

    MAPE averages |err|/label only over labels >= MAPE_FLOOR; if every
    sample is excluded it is None.
    """
    labels = np.asarray(labels, dtype=float)
    preds = np.asarray(preds, dtype=float)
    if labels.shape != preds.shape or labels.size == 0:
        raise ValueError("labels and predictions must be matching non-empty arrays")
    rmse = float(np.sqrt(np.mean((labels - preds) ** 2)))
    keep = labels >= MAPE_FLOOR
    if not np.any(keep):
        return rmse, None
    mape = float(100.0 * np.mean(np.abs(labels[keep] - preds[keep]) / labels[keep]))
    return rmse, mape


def evaluate(params: dm.DualMixerParams,
             samples: Sequence[WindowSample]) -> tuple[float, Optional[float]]:
    """Metrics on clamped predictions for a sample list."""
    if not samples:
        raise ValueError("empty evaluation set")
    labels = np.array([s.label for s in samples])
    return compute_metrics(labels, predict_samples(params, samples))


def train_standard(params: dm.DualMixerParams, samples: Sequence[WindowSample],
                   cfg: RunConfig) -> list[dict]:
    """Plain mean-squared-error training over shuffled batches of b windows.

    Returns per-epoch stats; the reported loss is the epoch's mean squared
    error per window.
    """
    if not samples:
        raise ValueError("empty training set")
    opt = nx.AdamState(lr=cfg.lr)
    groups = dd.group_by_unit(samples)
    arrays = dm.named_arrays(params)
    l = params.config.l
    history = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng((_epoch_seed(cfg.seed, epoch), 0x0D0E))
        order = fs.stratified_order(groups, rng)
        sq_sum = 0.0
        for start in range(0, len(order), cfg.b):
            chunk = [groups[uid][i] for uid, i in order[start:start + cfg.b]]
            graph = nx.Graph()
            x = Tensor(np.vstack([s.values for s in chunk]))
            _, preds = dm.forward_batch(params, x, len(chunk), graph)
            labels = Tensor(np.array([[s.label] for s in chunk]))
            err = nx.sub(preds, labels)
            sq = nx.sum_all(nx.hadamard(err, err))
            graph.backward(nx.scale(sq, 1.0 / len(chunk)))
            nx.adam_step(opt, arrays, graph.grads)
            sq_sum += sq.item()
        history.append({"epoch": epoch, "loss": sq_sum / len(order)})
    return history


def train_fsgri(params: dm.DualMixerParams, samples: Sequence[WindowSample],
                cfg: RunConfig) -> list[dict]:
    """Contrastive training: one fsgri epoch per epoch, recording both loss
    components."""
    opt = nx.AdamState(lr=cfg.lr)
    fcfg = cfg.fsgri_config()
    history = []
    for epoch in range(cfg.epochs):
        stats = fs.train_epoch_fsgri(params, samples, fcfg, opt,
                                     _epoch_seed(cfg.seed, epoch))
        history.append({"epoch": epoch, "loss": stats.mean_loss,
                        "contrastive": stats.mean_contrastive,
                        "regression": stats.mean_regression,
                        "batches": stats.batches,
                        "anchor_batch_size": stats.anchor_batch_size,
                        "encodings": stats.encodings})
    return history


def _write_metrics_csv(path: str, history: list[dict]) -> None:
    keys = ["epoch", "loss"]
    if history and "contrastive" in history[0]:
        keys += ["contrastive", "regression"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(keys)
        for row in history:
            writer.writerow(["%.17g" % row[k] if isinstance(row[k], float) else row[k]
                             for k in keys])


def run_one(cfg: RunConfig, resume: bool = True) -> RunReport:
    """Train, evaluate, and persist one run under its hash-named directory.

    With resume=True an existing report for this exact configuration is
    returned untouched, which is what lets sweeps skip finished cells.
    """
    cfg.validate()
    run_dir = os.path.join(cfg.out_dir, cfg.run_name())
    report_path = os.path.join(run_dir, "report.json")
    if resume and os.path.isfile(report_path):
        logger.info("reusing finished run %s", run_dir)
        return RunReport.load(report_path)
    os.makedirs(run_dir, exist_ok=True)
    started = time.perf_counter()
    train, test = load_dataset(cfg)
    m_vars = train[0].values.shape[1] if train else SYNTH_VARS
    params = dm.make_variant(dm.ModelConfig(l=cfg.w, m_vars=m_vars, d=cfg.d,
                                            n_layers=cfg.n_layers, seed=cfg.seed),
                             cfg.variant)
    if cfg.mode == "standard":
        history = train_standard(params, train, cfg)
        anchor_batch = None
    else:
        history = train_fsgri(params, train, cfg)
        anchor_batch = cfg.fsgri_config().anchor_batch
    rmse, mape = evaluate(params, test)
    report = RunReport(config=cfg.to_dict(), config_hash=cfg.config_hash(),
                       seed=cfg.seed, git_describe=git_describe(),
                       epoch_losses=[h["loss"] for h in history],
                       epoch_detail=history, rmse=rmse, mape=mape,
                       wall_clock_sec=time.perf_counter() - started,
                       param_count=dm.count_params(params),
                       anchor_batch_size=anchor_batch)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")
    _write_metrics_csv(os.path.join(run_dir, "metrics.csv"), history)
    dm.save_checkpoint(os.path.join(run_dir, "model.ckpt"), params)
    report.save(report_path)
    logger.info("run %s: rmse=%.6f mape=%s", cfg.run_name(), rmse,
                "n/a" if mape is None else f"{mape:.2f}%")
    return report


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def run_ablation(cfg: RunConfig) -> list[RunReport]:
    """All six variants under the same seed and data; writes ablation.csv."""
    cfg.validate()
    reports = []
    for variant in dm.VARIANTS:
        reports.append(run_one(replace(cfg, variant=variant)))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "ablation.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "rmse", "mape", "param_count"])
        for variant, rep in zip(dm.VARIANTS, reports):
            writer.writerow([variant, "%.17g" % rep.rmse,
                             "" if rep.mape is None else "%.17g" % rep.mape,
                             rep.param_count])
    return reports


def grid_search(cfg: RunConfig, n_list: Sequence[int],
                d_list: Sequence[int]) -> np.ndarray:
    """RMSE for every (n_layers, d) pair at a fixed seed; one row per layer
    count in grid.csv, plus grid.json with the axes and the cell matching
    the configured defaults. Finished cells are skipped on rerun."""
    cfg.validate()
    if not n_list or not d_list:
        raise ValueError("empty grid axis")
    matrix = np.zeros((len(n_list), len(d_list)))
    for i, n in enumerate(n_list):
        for j, d in enumerate(d_list):
            rep = run_one(replace(cfg, n_layers=int(n), d=int(d)))
            matrix[i, j] = rep.rmse
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "grid.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n_layers"] + [f"d{d}" for d in d_list])
        for i, n in enumerate(n_list):
            writer.writerow([n] + ["%.17g" % v for v in matrix[i]])
    default_cell = None
    if cfg.n_layers in n_list and cfg.d in d_list:
        default_cell = [list(n_list).index(cfg.n_layers), list(d_list).index(cfg.d)]
    with open(os.path.join(cfg.out_dir, "grid.json"), "w") as f:
        json.dump({"n_list": [int(n) for n in n_list],
                   "d_list": [int(d) for d in d_list],
                   "rmse": matrix.tolist(),
                   "default_cell": default_cell}, f, indent=2)
        f.write("\n")
    return matrix


def export_features(params: dm.DualMixerParams, samples: Sequence[WindowSample],
                    out_path: str) -> None:
    """CSV of per-sample ids, labels, predictions, and the flattened merged
    features; predictions go through the same path evaluate() uses."""
    l, d = params.config.l, params.config.d
    header = (["unit_id", "window_index", "rul_label", "rul_pred"] +
              [f"f{k:03d}" for k in range(l * d)])
    raw, feats = _forward_many(params, samples, want_features=True)
    preds = np.clip(raw, 0.0, 1.0)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i, s in enumerate(samples):
            writer.writerow([s.unit_id, s.anchor_index, "%.17g" % s.label,
                             "%.17g" % preds[i]] +
                            ["%.17g" % v for v in feats[i]])
