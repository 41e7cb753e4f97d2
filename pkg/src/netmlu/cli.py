"""Command-line entry points tying the pipeline together.

Subcommands: ``gen-data`` synthesizes and writes labeled datasets,
``train`` runs the hyperparameter grid for one architecture, ``evaluate``
rolls run files up into summary tables and ranking metrics, ``analyze``
produces the structural-correlation and representation-study reports, and
``route`` routes a single demand matrix and prints the outcome.

Conventions: every artifact directory receives a manifest recording the
invocation (seed included), JSON artifacts embed it inline, all files are
written atomically, and no command mutates its inputs. Exit codes: 0 on
success, 2 for validation/usage errors, 3 for runtime or convergence
failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import harness, models, routing, topology as topo, traffic
from .errors import ConvergenceError, SamplingError, ValidationError
from .harness import PRESETS, TrainConfig
from .routing import DemandMatrix
from .topology import Topology
from .util import write_text_atomic

__all__ = ["StudyManifest", "main"]

_RUN_SUFFIX = ".run.json"


@dataclass(frozen=True)
class StudyManifest:
    """Everything needed to reproduce one study invocation."""

    topology_paths: tuple[str, ...]
    scheme: str
    master_seed: int
    epsilon: float
    n_per_split: int
    preset: str
    out_dir: str
    variations: int | None = None
    metric: str = "weights"

    def validate(self) -> None:
        if not self.topology_paths:
            raise ValidationError("no topology files given")
        for path in self.topology_paths:
            if not os.path.isfile(path):
                raise ValidationError(f"topology file not found: {path}")
        if self.scheme not in routing.SCHEMES:
            raise ValidationError(f"unknown scheme {self.scheme!r}")
        if self.preset not in PRESETS:
            raise ValidationError(f"unknown preset {self.preset!r}")
        if self.n_per_split < 1:
            raise ValidationError("dataset size must be >= 1")

    def as_json_obj(self) -> dict:
        return {
            "topology_paths": list(self.topology_paths),
            "scheme": self.scheme,
            "master_seed": self.master_seed,
            "epsilon": self.epsilon,
            "n_per_split": self.n_per_split,
            "preset": self.preset,
            "out_dir": self.out_dir,
            "variations": self.variations,
            "metric": self.metric,
        }


def _write_json(path: str, obj: dict) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def load_topology_file(path: str) -> Topology:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    fmt = "native-json" if path.endswith(".json") else "repetita"
    name = os.path.splitext(os.path.basename(path))[0]
    return topo.parse_topology(text, fmt, name=name)


def _demands_from_file(path: str, n: int) -> DemandMatrix:
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if isinstance(obj, dict):
        obj = obj.get("demands")
    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"demand file {path} does not hold a square matrix")
    if arr.shape[0] != n:
        raise ValidationError(
            f"demand matrix is {arr.shape[0]}x{arr.shape[0]} but the topology has {n} nodes"
        )
    return DemandMatrix(arr)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    manifest = StudyManifest(
        topology_paths=tuple(args.topology),
        scheme=args.scheme,
        master_seed=args.seed,
        epsilon=args.epsilon,
        n_per_split=args.samples,
        preset=args.preset,
        out_dir=args.out,
        variations=args.variations,
        metric=args.metric,
    )
    manifest.validate()
    os.makedirs(args.out, exist_ok=True)
    dataset_dirs = {}
    for path in manifest.topology_paths:
        t = load_topology_file(path)
        datasets = traffic.build_datasets(
            t,
            manifest.scheme,
            n_per_split=manifest.n_per_split,
            variations=manifest.variations,
            master_seed=manifest.master_seed,
            epsilon=manifest.epsilon,
            metric=manifest.metric,
            check_trivial=not args.no_trivial_check,
        )
        rel = f"{t.name}-{manifest.scheme}"
        ds_manifest = traffic.save_datasets(os.path.join(args.out, rel), datasets)
        dataset_dirs[t.name] = rel
        if datasets[0].trivial_warning:
            print(
                f"warning: topology {t.name} looks trivial for {manifest.scheme}: "
                "achieved MLU matches the optimum on a probe batch",
                file=sys.stderr,
            )
        print(
            f"{t.name}: wrote {3 * manifest.n_per_split} samples "
            f"({ds_manifest['flow_entries']['total']} flow entries) to {args.out}/{rel}"
        )
    _write_json(
        os.path.join(args.out, "study.json"),
        {"command": "gen-data", "manifest": manifest.as_json_obj(), "datasets": dataset_dirs},
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_DATASET_CACHE: dict[str, tuple] = {}


def _datasets_cached(data_dir: str):
    if data_dir not in _DATASET_CACHE:
        _DATASET_CACHE[data_dir] = traffic.load_datasets(data_dir)
    return _DATASET_CACHE[data_dir]


def _train_unit(payload):
    data_dir, arch, gi, seed, config = payload
    datasets = _datasets_cached(data_dir)
    layers = models.default_layer_count(datasets[0].topology)
    mc = harness.grid_configs(arch, layers)[gi]
    return gi, seed, harness.train_unit(mc, gi, seed, datasets, config)


def cmd_train(args) -> int:
    config = PRESETS[args.preset]
    seeds = tuple(args.seed + s for s in config.seeds)
    os.makedirs(args.out, exist_ok=True)
    for data_dir in args.data:
        datasets = _datasets_cached(data_dir)
        train_ds = datasets[0]
        layers = models.default_layer_count(train_ds.topology)
        grid = harness.grid_configs(args.arch, layers)
        units = [
            (data_dir, args.arch, gi, seed, config)
            for gi in range(len(grid))
            for seed in seeds
        ]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                outcomes = list(pool.map(_train_unit, units))
        else:
            outcomes = [_train_unit(u) for u in units]
        by_unit = {(gi, seed): run for gi, seed, run in outcomes}
        per_config = [
            (mc, [by_unit[(gi, seed)] for seed in seeds]) for gi, mc in enumerate(grid)
        ]
        result = harness.assemble_grid(
            args.arch, train_ds.topology.name, train_ds.scheme, per_config
        )
        out_name = f"{os.path.basename(os.path.normpath(data_dir))}-{args.arch}{_RUN_SUFFIX}"
        _write_json(
            os.path.join(args.out, out_name),
            {
                "command": "train",
                "manifest": {
                    "data_dir": data_dir,
                    "architecture": args.arch,
                    "preset": args.preset,
                    "seed": args.seed,
                    "seeds": list(seeds),
                    "dataset_master_seed": train_ds.master_seed,
                    "epsilon": train_ds.epsilon,
                },
                "topology": train_ds.topology.to_json_obj(),
                "result": result.as_json_obj(),
            },
        )
        print(
            f"{train_ds.topology.name}/{train_ds.scheme}/{args.arch}: "
            f"test NMSE {result.test_nmse_mean:.4f} +- {result.test_nmse_std:.4f} "
            f"(best lr={result.best_config.lr}, width={result.best_config.width}, "
            f"rep={result.best_config.representation})"
        )
    return 0


# ---------------------------------------------------------------------------
# evaluate / analyze
# ---------------------------------------------------------------------------


def _load_run_files(results_dir: str) -> list[dict]:
    files = sorted(
        f for f in os.listdir(results_dir) if f.endswith(_RUN_SUFFIX)
    )
    if not files:
        raise ValidationError(f"no {_RUN_SUFFIX} files found in {results_dir}")
    loaded = []
    for f in files:
        with open(os.path.join(results_dir, f), encoding="utf-8") as fh:
            obj = json.load(fh)
        obj["_file"] = f
        loaded.append(obj)
    return loaded


def cmd_evaluate(args) -> int:
    runs = _load_run_files(args.results)
    os.makedirs(args.out, exist_ok=True)
    rows = [r["result"] for r in runs]
    harness.write_summary_rows(os.path.join(args.out, "summary.csv"), rows)

    # Rank architectures per scheme over every topology that has all of them.
    by_scheme: dict[str, dict[str, dict[str, float]]] = {}
    for r in rows:
        by_scheme.setdefault(r["scheme"], {}).setdefault(r["topology"], {})[
            r["architecture"]
        ] = r["test_nmse_mean"]
    ranking = {}
    for scheme in sorted(by_scheme):
        tables = by_scheme[scheme]
        arch_sets = [frozenset(t) for t in tables.values()]
        common = frozenset.intersection(*arch_sets)
        complete = {
            name: {a: table[a] for a in common}
            for name, table in sorted(tables.items())
            if common
        }
        if not complete:
            continue
        mrr, wr = harness.rank_metrics(complete)
        ranking[scheme] = {"mrr": mrr, "win_rate": wr, "topologies": sorted(complete)}
    _write_json(
        os.path.join(args.out, "rank_metrics.json"),
        {
            "command": "evaluate",
            "manifest": {"results_dir": args.results, "run_files": [r["_file"] for r in runs]},
            "ranking": ranking,
        },
    )
    print(f"evaluated {len(rows)} run files -> {args.out}/summary.csv")
    return 0


def cmd_analyze(args) -> int:
    runs = _load_run_files(args.results)
    os.makedirs(args.out, exist_ok=True)
    run_files = [r["_file"] for r in runs]

    by_scheme: dict[str, dict[str, dict[str, float]]] = {}
    topologies: dict[str, Topology] = {}
    for r in runs:
        res = r["result"]
        t = Topology.from_json_obj(r["topology"])
        topologies[res["topology"]] = t
        by_scheme.setdefault(res["scheme"], {}).setdefault(res["topology"], {})[
            res["architecture"]
        ] = res["test_nmse_mean"]

    wrote = []
    for scheme in sorted(by_scheme):
        tables = by_scheme[scheme]
        arch_sets = [frozenset(t) for t in tables.values()]
        common = frozenset.intersection(*arch_sets)
        complete = {
            name: {a: table[a] for a in common} for name, table in tables.items() if common
        }
        if len(complete) < 3 or args.baseline not in (common or set()):
            continue
        metrics = {
            name: topo.compute_metrics(topologies[name]).as_dict() for name in complete
        }
        report = harness.topology_correlation(complete, metrics, baseline_arch=args.baseline)
        path = os.path.join(args.out, f"topology_correlation_{scheme}.json")
        _write_json(
            path,
            {
                "command": "analyze",
                "manifest": {"results_dir": args.results, "run_files": run_files},
                "report": report,
            },
        )
        wrote.append(path)
    if not wrote and not args.representation_data:
        raise ValidationError(
            "nothing to analyze: need >= 3 topologies sharing the baseline "
            "architecture per scheme, or --representation-data"
        )

    if args.representation_data:
        config = PRESETS[args.preset]
        studies = []
        for data_dir in args.representation_data:
            datasets = _datasets_cached(data_dir)
            studies.append((datasets[0].topology.name, datasets))
        fractions = tuple(int(x) for x in args.fractions.split(","))
        report = harness.demand_representation_study(
            studies, config, fractions=fractions
        )
        path = os.path.join(args.out, "representation_study.json")
        _write_json(
            path,
            {
                "command": "analyze",
                "manifest": {
                    "data_dirs": list(args.representation_data),
                    "preset": args.preset,
                    "fractions": list(fractions),
                },
                "report": report,
            },
        )
        wrote.append(path)
    for path in wrote:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# route
# ---------------------------------------------------------------------------


def cmd_route(args) -> int:
    t = load_topology_file(args.topology)
    dm = _demands_from_file(args.demands, t.n_nodes)
    outcome = routing.route(t, dm, args.scheme, args.metric)
    obj = outcome.to_json_obj()
    text = json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"
    if args.out:
        write_text_atomic(args.out, text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netmlu",
        description="Simulate MLU under shortest-path routing and train per-edge-weight predictors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="synthesize labeled traffic datasets")
    gen.add_argument("--topology", action="append", required=True, help="topology file (repeatable)")
    gen.add_argument("--scheme", choices=routing.SCHEMES, default="ecmp")
    gen.add_argument("--seed", type=int, default=0, help="master seed")
    gen.add_argument("--samples", type=int, default=1000, help="demand matrices per split")
    gen.add_argument("--variations", type=int, default=None, help="topology variations per dataset")
    gen.add_argument("--epsilon", type=float, default=0.05, help="min-MLU approximation accuracy")
    gen.add_argument("--metric", choices=routing.METRICS, default="weights")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    gen.add_argument("--no-trivial-check", action="store_true")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="run the hyperparameter grid for one architecture")
    tr.add_argument("--data", action="append", required=True, help="dataset directory (repeatable)")
    tr.add_argument("--arch", choices=models.ARCHITECTURES, required=True)
    tr.add_argument("--preset", choices=sorted(PRESETS), default="paper")
    tr.add_argument("--seed", type=int, default=0, help="offset added to the preset seeds")
    tr.add_argument("--jobs", type=int, default=1, help="parallel training processes")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="summarize run files into tables and rankings")
    ev.add_argument("--results", required=True, help="directory of train outputs")
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    an = sub.add_parser("analyze", help="correlation and representation-study reports")
    an.add_argument("--results", required=True, help="directory of train outputs")
    an.add_argument("--baseline", default="pew", choices=models.ARCHITECTURES)
    an.add_argument(
        "--representation-data",
        action="append",
        default=None,
        help="dataset directory for the raw-vs-sum study (repeatable)",
    )
    an.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    an.add_argument("--fractions", default="5,10,25,50,100")
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)

    rt = sub.add_parser("route", help="route one demand matrix and print the outcome")
    rt.add_argument("--topology", required=True)
    rt.add_argument("--demands", required=True, help="JSON file holding an NxN matrix")
    rt.add_argument("--scheme", choices=routing.SCHEMES, default="ecmp")
    rt.add_argument("--metric", choices=routing.METRICS, default="weights")
    rt.add_argument("--out", default=None)
    rt.set_defaults(func=cmd_route)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConvergenceError, SamplingError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
