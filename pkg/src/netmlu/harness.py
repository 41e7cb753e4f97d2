"""Training loop, grid search, and the evaluation/analysis metrics.

The protocol: mini-batch Adam on MSE, early stopping on validation MSE with
a patience budget and best-checkpoint restore, a 12-point hyperparameter
grid per architecture (3 learning rates x 2 demand representations x 2
widths), selection by mean validation MSE across seeds, and test-set NMSE
(MSE normalized by a predictor that always outputs the training-split mean
label). Analysis helpers compute ranking metrics across topologies,
exponentially weighted learning curves, structural-metric correlations, and
the raw-vs-sum representation study on training subsets.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tape
from .errors import ValidationError
from .models import ModelConfig, Predictor, build_model
from .traffic import Dataset
from .util import generator, write_text_atomic

__all__ = [
    "TrainConfig",
    "PRESETS",
    "RunResult",
    "GridResult",
    "train",
    "evaluate_mse",
    "nmse",
    "grid_configs",
    "train_unit",
    "assemble_grid",
    "grid_search",
    "rank_metrics",
    "smooth_curve",
    "topology_correlation",
    "demand_representation_study",
    "write_summary_rows",
    "write_summary_csv",
    "write_curve_csv",
]

EVAL_BATCH = 64
_SHUFFLE_TAG = 7919


@dataclass(frozen=True)
class TrainConfig:
    """Budget knobs of one training protocol."""

    epochs: int = 3000
    batch_size: int = 16
    patience: int = 1500
    seeds: tuple[int, ...] = tuple(range(10))

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch size must be >= 1")
        if self.patience > self.epochs:
            raise ValidationError(
                f"patience {self.patience} exceeds epoch budget {self.epochs}"
            )
        if not self.seeds:
            raise ValidationError("at least one seed is required")


PRESETS = {
    "paper": TrainConfig(epochs=3000, batch_size=16, patience=1500, seeds=tuple(range(10))),
    "desk": TrainConfig(epochs=300, batch_size=16, patience=150, seeds=(0, 1, 2)),
}


@dataclass
class RunResult:
    """Outcome of one (config, seed) training run.

    Test metrics come from the best-validation checkpoint, computed once.
    Failed runs (non-finite loss) keep their diagnostics instead of being
    dropped.
    """

    config: ModelConfig
    seed: int
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = math.nan
    test_mse: float = math.nan
    test_nmse: float = math.nan
    failed: bool = False
    error: str | None = None

    def as_json_obj(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "seed": self.seed,
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse,
            "test_mse": self.test_mse,
            "test_nmse": self.test_nmse,
            "failed": self.failed,
            "error": self.error,
        }


def nmse(predictions: np.ndarray, targets: np.ndarray, baseline_mean: float) -> float:
    """MSE normalized by the MSE of always predicting ``baseline_mean``."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape:
        raise ValidationError(
            f"prediction/target shapes differ: {predictions.shape} vs {targets.shape}"
        )
    base = float(np.mean((baseline_mean - targets) ** 2))
    if base == 0.0:
        raise ValidationError(
            "baseline MSE is zero: labels are constant, NMSE undefined"
        )
    return float(np.mean((predictions - targets) ** 2)) / base


def evaluate_mse(model: Predictor, ds: Dataset, batch_size: int = EVAL_BATCH) -> tuple[float, np.ndarray]:
    """Full-split MSE and per-sample predictions in dataset order."""
    labels = ds.labels()
    preds = np.empty(ds.n_samples)
    for start in range(0, ds.n_samples, batch_size):
        chunk = list(ds.samples[start : start + batch_size])
        out, order = model.forward_samples(Tape(), ds, chunk)
        preds[start + order] = out.values
    return float(np.mean((preds - labels) ** 2)), preds


def train(
    model: Predictor,
    datasets: tuple[Dataset, Dataset, Dataset],
    config: TrainConfig,
    seed: int,
) -> RunResult:
    """Train ``model`` on the train split with early stopping on validation.

    Deterministic given (model parameters, datasets, config, seed): batch
    shuffling derives from the seed alone. On a non-finite loss the run is
    marked failed with the offending epoch recorded and returned as-is.
    """
    config.validate()
    train_ds, val_ds, test_ds = datasets
    result = RunResult(config=model.config, seed=seed)
    labels = train_ds.labels()
    n = train_ds.n_samples
    if n < 1:
        raise ValidationError("empty training split")
    shuffle_rng = generator(np.random.SeedSequence([seed, _SHUFFLE_TAG]))
    opt = ad.AdamState.for_params(model.params)
    lr = model.config.lr

    best_val = math.inf
    best_values: dict[str, np.ndarray] | None = None
    since_improved = 0

    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = [train_ds.samples[i] for i in idx]
            tape = Tape()
            preds, perm = model.forward_samples(tape, train_ds, batch)
            targets = ad.constant(labels[idx][perm])
            loss = ad.mse_loss(tape, preds, targets)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                result.failed = True
                result.error = f"non-finite training loss at epoch {epoch + 1}"
                return result
            ad.zero_grads(model.params)
            ad.backward(tape, loss)
            ad.adam_step(model.params, opt, lr)
            sq_sum += loss_val * len(idx)
        result.train_losses.append(sq_sum / n)

        val_mse, _ = evaluate_mse(model, val_ds)
        result.val_losses.append(val_mse)
        if not math.isfinite(val_mse):
            result.failed = True
            result.error = f"non-finite validation loss at epoch {epoch + 1}"
            return result
        if val_mse < best_val:
            best_val = val_mse
            best_values = model.export_values()
            result.best_epoch = epoch
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= config.patience:
                break

    assert best_values is not None
    model.load_values(best_values)
    result.best_val_mse = best_val
    result.test_mse, test_preds = evaluate_mse(model, test_ds)
    baseline_mean = float(labels.mean())
    result.test_nmse = nmse(test_preds, test_ds.labels(), baseline_mean)
    return result


# ---------------------------------------------------------------------------
# Grid search
# ---------------------------------------------------------------------------


def grid_configs(architecture: str, layers: int, strict_paper: bool = False) -> list[ModelConfig]:
    """The 12 tuned configurations for an architecture at a given depth."""
    configs: list[ModelConfig] = []
    for lr in models.LEARNING_RATES:
        for rep in models.REPRESENTATIONS:
            for width in models.widths_for(architecture, rep):
                configs.append(ModelConfig(architecture, rep, width, layers, lr, strict_paper))
    assert len(configs) == 12
    return configs


def train_unit(
    mc: ModelConfig,
    grid_index: int,
    seed: int,
    datasets: tuple[Dataset, Dataset, Dataset],
    config: TrainConfig,
) -> RunResult:
    """One grid cell: build a freshly seeded model and train it."""
    init_rng = generator(np.random.SeedSequence([seed, grid_index]))
    model = build_model(mc, datasets[0].topology, init_rng)
    return train(model, datasets, config, seed)


@dataclass
class GridResult:
    architecture: str
    topology_name: str
    scheme: str
    runs: list[RunResult]
    best_config: ModelConfig
    selected_runs: list[RunResult]
    test_nmse_mean: float
    test_nmse_std: float
    n_failed: int

    def as_json_obj(self) -> dict:
        return {
            "architecture": self.architecture,
            "topology": self.topology_name,
            "scheme": self.scheme,
            "best_config": self.best_config.as_dict(),
            "test_nmse_mean": self.test_nmse_mean,
            "test_nmse_std": self.test_nmse_std,
            "n_failed": self.n_failed,
            "runs": [r.as_json_obj() for r in self.runs],
        }


def assemble_grid(
    architecture: str,
    topology_name: str,
    scheme: str,
    per_config: list[tuple[ModelConfig, list[RunResult]]],
) -> GridResult:
    """Pick the winning configuration from completed grid runs.

    Selection: lowest mean best-validation MSE over the seeds that finished;
    ties go to the smaller learning rate, then the smaller width. Raises if
    every run of the winner failed.
    """

    def score(entry):
        mc, runs = entry
        ok = [r.best_val_mse for r in runs if not r.failed]
        mean_val = float(np.mean(ok)) if ok else math.inf
        return (mean_val, mc.lr, mc.width)

    best_config, best_runs = min(per_config, key=score)
    selected_ok = [r for r in best_runs if not r.failed]
    if not selected_ok:
        raise RuntimeError(
            f"grid search for {architecture} failed: no run finished with a finite loss"
        )
    all_runs = [r for _, runs in per_config for r in runs]
    nmses = np.array([r.test_nmse for r in selected_ok])
    return GridResult(
        architecture=architecture,
        topology_name=topology_name,
        scheme=scheme,
        runs=all_runs,
        best_config=best_config,
        selected_runs=best_runs,
        test_nmse_mean=float(nmses.mean()),
        test_nmse_std=float(nmses.std(ddof=1)) if len(nmses) > 1 else 0.0,
        n_failed=sum(1 for r in all_runs if r.failed),
    )


def grid_search(
    architecture: str,
    datasets: tuple[Dataset, Dataset, Dataset],
    config: TrainConfig,
    seeds: tuple[int, ...] | None = None,
) -> GridResult:
    """Train the full 12-point grid across seeds and pick the best config."""
    config.validate()
    seeds = tuple(seeds) if seeds is not None else config.seeds
    topo = datasets[0].topology
    layers = models.default_layer_count(topo)
    per_config = [
        (mc, [train_unit(mc, gi, seed, datasets, config) for seed in seeds])
        for gi, mc in enumerate(grid_configs(architecture, layers))
    ]
    return assemble_grid(architecture, topo.name, datasets[0].scheme, per_config)


# ---------------------------------------------------------------------------
# Ranking and curve metrics
# ---------------------------------------------------------------------------


def rank_metrics(
    nmse_by_topology: dict[str, dict[str, float]]
) -> tuple[dict[str, float], dict[str, float]]:
    """Mean reciprocal rank and win rate per architecture across topologies.

    Competition ranking: an architecture's rank is 1 plus the number of
    strictly better competitors, so ties share the better rank. Wins split
    fractionally among rank-1 ties, which makes the win rates sum to exactly
    100 percent.
    """
    if not nmse_by_topology:
        raise ValidationError("no topologies to rank")
    archs = None
    for topology, table in nmse_by_topology.items():
        keys = sorted(table)
        if archs is None:
            archs = keys
        elif keys != archs:
            raise ValidationError(
                f"architecture sets differ across topologies ({topology}: {keys} vs {archs})"
            )
    reciprocal = {a: 0.0 for a in archs}
    wins = {a: 0.0 for a in archs}
    for table in nmse_by_topology.values():
        for a in archs:
            rank = 1 + sum(1 for b in archs if table[b] < table[a])
            reciprocal[a] += 1.0 / rank
            if rank == 1:
                n_tied = sum(1 for b in archs if table[b] == table[a])
                wins[a] += 1.0 / n_tied
    n = len(nmse_by_topology)
    mrr = {a: reciprocal[a] / n for a in archs}
    wr = {a: 100.0 * wins[a] / n for a in archs}
    return mrr, wr


def smooth_curve(losses, alpha: float = 0.92, skip: int = 5) -> np.ndarray:
    """Exponentially weighted validation curve for plotting.

    Drops the first ``skip`` entries, clips anything above the value at
    epoch ``skip`` down to it, then applies s_t = alpha*s_{t-1} +
    (1-alpha)*x_t with s_0 equal to the first kept value.
    """
    arr = np.asarray(losses, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"expected a 1-D loss series, got shape {arr.shape}")
    if len(arr) <= skip:
        raise ValidationError(
            f"loss series of length {len(arr)} too short to skip {skip} epochs"
        )
    kept = arr[skip:]
    clamp = kept[0]
    kept = np.minimum(kept, clamp)
    out = np.empty_like(kept)
    out[0] = kept[0]
    for i in range(1, len(kept)):
        out[i] = alpha * out[i - 1] + (1.0 - alpha) * kept[i]
    return out


def topology_correlation(
    nmse_by_topology: dict[str, dict[str, float]],
    metrics_by_topology: dict[str, dict[str, float]],
    baseline_arch: str = "pew",
) -> dict:
    """Relate structural graph properties to predictive difficulty.

    Emits one row per (topology, structural metric) carrying the metric
    value, every architecture's NMSE, and the percentage change of each
    architecture's NMSE relative to ``baseline_arch``. The summary holds a
    Spearman rank correlation per (metric, architecture) pair; constant
    inputs make the coefficient undefined and are reported as None.
    """
    from scipy.stats import spearmanr

    if len(nmse_by_topology) < 3:
        raise ValidationError(
            f"need at least 3 topologies to correlate, got {len(nmse_by_topology)}"
        )
    if set(nmse_by_topology) != set(metrics_by_topology):
        raise ValidationError("NMSE and metric tables cover different topologies")
    topologies = sorted(nmse_by_topology)
    archs = sorted(nmse_by_topology[topologies[0]])
    if baseline_arch not in archs:
        raise ValidationError(f"baseline architecture {baseline_arch!r} missing from table")
    metric_names = sorted(metrics_by_topology[topologies[0]])

    rows = []
    for name in topologies:
        for metric in metric_names:
            row = {
                "topology": name,
                "metric": metric,
                "value": metrics_by_topology[name][metric],
            }
            base = nmse_by_topology[name][baseline_arch]
            for a in archs:
                row[f"nmse_{a}"] = nmse_by_topology[name][a]
                if a != baseline_arch:
                    row[f"pct_change_{a}"] = 100.0 * (nmse_by_topology[name][a] - base) / base
            rows.append(row)

    correlations: dict[str, dict[str, float | None]] = {}
    for metric in metric_names:
        xs = np.array([metrics_by_topology[name][metric] for name in topologies])
        correlations[metric] = {}
        for a in archs:
            ys = np.array([nmse_by_topology[name][a] for name in topologies])
            if np.all(xs == xs[0]) or np.all(ys == ys[0]):
                correlations[metric][a] = None
                continue
            rho = spearmanr(xs, ys).statistic
            correlations[metric][a] = None if math.isnan(rho) else float(rho)
    return {"rows": rows, "correlations": correlations}


# ---------------------------------------------------------------------------
# Demand representation study
# ---------------------------------------------------------------------------


def _subset_dataset(ds: Dataset, count: int) -> Dataset:
    return Dataset(
        topology=ds.topology,
        split=ds.split,
        samples=ds.samples[:count],
        normalization=ds.normalization,
        scheme=ds.scheme,
        metric=ds.metric,
        master_seed=ds.master_seed,
        epsilon=ds.epsilon,
        variations=ds.variations,
        trivial_warning=ds.trivial_warning,
    )


def demand_representation_study(
    studies: list[tuple[str, tuple[Dataset, Dataset, Dataset]]],
    config: TrainConfig,
    architectures: tuple[str, ...] = ("pew", "gat"),
    fractions: tuple[int, ...] = (5, 10, 25, 50, 100),
    lr: float = 5e-3,
) -> dict:
    """Raw-minus-sum NMSE gap as the training set shrinks.

    For each topology and percentage, the train and validation splits are
    cut to their leading samples, one model per representation is trained at
    each architecture's smaller tuned width, and the NMSE difference
    (raw minus sum), averaged over seeds and then topologies, is reported
    per fraction. Positive values mean the raw representation reached a
    higher (worse) NMSE than sum at that budget.
    """
    config.validate()
    if not studies:
        raise ValidationError("no datasets supplied")
    diffs: dict[str, list[list[float]]] = {a: [[] for _ in fractions] for a in architectures}
    for _, datasets in studies:
        train_ds, val_ds, test_ds = datasets
        topo = train_ds.topology
        layers = models.default_layer_count(topo)
        for fi, pct in enumerate(fractions):
            if not 0 < pct <= 100:
                raise ValidationError(f"fraction must be a percentage in (0, 100], got {pct}")
            n_train = train_ds.n_samples * pct // 100
            n_val = max(1, val_ds.n_samples * pct // 100)
            if n_train < config.batch_size:
                raise ValidationError(
                    f"{pct}% of {train_ds.n_samples} training samples is {n_train}, "
                    f"less than one batch of {config.batch_size}"
                )
            subset = (
                _subset_dataset(train_ds, n_train),
                _subset_dataset(val_ds, n_val),
                test_ds,
            )
            for arch in architectures:
                per_rep = {}
                for ri, rep in enumerate(("raw", "sum")):
                    width = models.widths_for(arch, rep)[0]
                    mc = ModelConfig(arch, rep, width, layers, lr)
                    scores = []
                    for seed in config.seeds:
                        rng = generator(np.random.SeedSequence([seed, ri]))
                        model = build_model(mc, topo, rng)
                        run = train(model, subset, config, seed)
                        if not run.failed:
                            scores.append(run.test_nmse)
                    if not scores:
                        raise RuntimeError(
                            f"all {arch}/{rep} runs failed at fraction {pct}%"
                        )
                    per_rep[rep] = float(np.mean(scores))
                diffs[arch][fi].append(per_rep["raw"] - per_rep["sum"])
    return {
        "fractions": list(fractions),
        "difference_raw_minus_sum": {
            a: [float(np.mean(vals)) for vals in diffs[a]] for a in architectures
        },
        "legend": (
            "difference = NMSE(raw) - NMSE(sum); positive values mean the raw "
            "representation performed worse at that training budget"
        ),
    }


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def write_summary_rows(path: str, rows: list[dict]) -> None:
    """One row per topology x architecture x scheme from serialized results."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        [
            "topology",
            "architecture",
            "scheme",
            "test_nmse_mean",
            "test_nmse_std",
            "best_lr",
            "best_width",
            "best_representation",
            "n_failed",
        ]
    )
    key = lambda r: (r["topology"], r["architecture"], r["scheme"])
    for r in sorted(rows, key=key):
        writer.writerow(
            [
                r["topology"],
                r["architecture"],
                r["scheme"],
                repr(float(r["test_nmse_mean"])),
                repr(float(r["test_nmse_std"])),
                repr(float(r["best_config"]["lr"])),
                r["best_config"]["width"],
                r["best_config"]["representation"],
                r["n_failed"],
            ]
        )
    write_text_atomic(path, buf.getvalue())


def write_summary_csv(path: str, grid_results: list[GridResult]) -> None:
    write_summary_rows(path, [g.as_json_obj() for g in grid_results])


def write_curve_csv(path: str, losses, alpha: float = 0.92, skip: int = 5) -> None:
    """Epoch, raw loss, smoothed loss (blank before smoothing starts)."""
    arr = np.asarray(losses, dtype=np.float64)
    smoothed = smooth_curve(arr, alpha=alpha, skip=skip)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "raw", "smoothed"])
    for i, x in enumerate(arr):
        s = repr(float(smoothed[i - skip])) if i >= skip else ""
        writer.writerow([i + 1, repr(float(x)), s])
    write_text_atomic(path, buf.getvalue())
