"""Gravity-model traffic synthesis and labeled MLU datasets.

Each sample is a demand matrix drawn from the gravity model, rescaled so its
optimal MLU is 1, and labeled with the MLU that a concrete routing scheme
actually achieves on it. Datasets come in three independently seeded splits
and store demands standardized by the maximum entry across the union of the
splits, together with the record needed to invert that standardization.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import mcnf_lp, routing, topology as topo
from .errors import ParseError, ValidationError
from .routing import DemandMatrix
from .topology import Topology
from .util import (
    SPLIT_STREAMS,
    STREAM_TRIVIALITY,
    STREAM_VARIATIONS,
    generator,
    substream,
    write_text_atomic,
)

__all__ = [
    "Sample",
    "Normalization",
    "Dataset",
    "gravity_dm",
    "build_datasets",
    "representation_raw",
    "representation_sum",
    "raw_features",
    "sum_features",
    "expected_flow_entries",
    "save_datasets",
    "load_datasets",
    "MANIFEST_NAME",
    "SPLIT_NAMES",
]

SPLIT_NAMES = ("train", "validate", "test")
MANIFEST_NAME = "manifest.json"
DATASET_VERSION = 1


def gravity_dm(
    t: Topology,
    rng: np.random.Generator,
    *,
    n: int | None = None,
    epsilon: float = 0.05,
    metric: str = "weights",
    rescale: bool = True,
) -> DemandMatrix:
    """Draw one gravity-model demand matrix for ``t``.

    Ingress and egress masses are i.i.d. exponential with mean 1, one pair
    per node of ``t``; the demand from i to j is in_i * out_j / sum(out).
    The matrix is ``n`` x ``n`` (default: dense for ``t``), with zero rows
    and columns for ids absent from ``t``, so variation subgraphs produce
    matrices in the original graph's index space. With ``rescale`` the
    matrix is divided by its approximate minimum MLU, making the best
    achievable utilization 1.
    """
    ids = sorted(t.node_ids())
    if n is None:
        n = t.max_node_id() + 1
    if n <= t.max_node_id():
        raise ValidationError(
            f"matrix size {n} cannot index node id {t.max_node_id()}"
        )
    masses_in = rng.exponential(1.0, size=len(ids))
    masses_out = rng.exponential(1.0, size=len(ids))
    values = np.zeros((n, n))
    values[np.ix_(ids, ids)] = np.outer(masses_in, masses_out) / masses_out.sum()
    np.fill_diagonal(values, 0.0)
    dm = DemandMatrix(values)
    if rescale:
        theta = mcnf_lp.min_mlu(t, dm, epsilon, metric).theta
        dm = mcnf_lp.rescale_demands(dm, theta)
    return dm


@dataclass(frozen=True)
class Sample:
    """One labeled example: standardized demands and the achieved MLU."""

    demands: np.ndarray
    label: float
    variation_id: int | None


@dataclass(frozen=True)
class Normalization:
    max_demand: float
    max_capacity: float


@dataclass(frozen=True)
class Dataset:
    """One split of labeled traffic samples for a topology.

    ``variations`` maps variation id to the generating subgraph when the
    split was built over topology variations. Sample demands are stored
    standardized; :meth:`denormalized` multiplies the normalization record
    back in. ``trivial_warning`` is None when the triviality check was
    skipped.
    """

    topology: Topology
    split: str
    samples: tuple[Sample, ...]
    normalization: Normalization
    scheme: str
    metric: str
    master_seed: int
    epsilon: float
    variations: dict[int, Topology] | None
    trivial_warning: bool | None

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def matrix_size(self) -> int:
        return self.topology.n_nodes

    def graph_for(self, sample: Sample) -> Topology:
        if sample.variation_id is None:
            return self.topology
        assert self.variations is not None
        return self.variations[sample.variation_id]

    def denormalized(self, sample: Sample) -> DemandMatrix:
        return DemandMatrix(sample.demands * self.normalization.max_demand)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.float64)


def representation_raw(demands: np.ndarray, node_id: int) -> np.ndarray:
    """Length-2N node feature: incoming column then outgoing row."""
    return np.concatenate([demands[:, node_id], demands[node_id, :]])


def representation_sum(demands: np.ndarray, node_id: int) -> np.ndarray:
    """Length-2 node feature: total outgoing then total incoming demand."""
    return np.array([demands[node_id, :].sum(), demands[:, node_id].sum()])


def raw_features(demands: np.ndarray) -> np.ndarray:
    """Row i = representation_raw(demands, i); shape (N, 2N)."""
    return np.hstack([demands.T, demands])


def sum_features(demands: np.ndarray) -> np.ndarray:
    """Row i = representation_sum(demands, i); shape (N, 2)."""
    return np.stack([demands.sum(axis=1), demands.sum(axis=0)], axis=1)


def expected_flow_entries(n_per_split: int, n_nodes: int) -> int:
    """Total stored demand entries across the three splits: 3 n N^2.

    Every sample stores the full N x N matrix including diagonal slots, so
    the count is exact arithmetic, not an estimate.
    """
    return 3 * n_per_split * n_nodes * n_nodes


def build_datasets(
    t: Topology,
    scheme: str,
    n_per_split: int = 1000,
    variations: int | None = None,
    master_seed: int = 0,
    *,
    epsilon: float = 0.05,
    metric: str = "weights",
    check_trivial: bool = True,
) -> tuple[Dataset, Dataset, Dataset]:
    """Build the train/validate/test splits for one (topology, scheme).

    Each split draws ``n_per_split`` gravity matrices from its own labeled
    seed stream and labels them with the scheme's achieved MLU. With
    ``variations`` = k, k connected subgraphs are sampled once and shared by
    all splits, each generating an equal contiguous block of samples
    (``n_per_split`` must divide evenly). Demands are standardized by the
    maximum entry over the union of the splits.
    """
    if scheme not in routing.SCHEMES:
        raise ValidationError(f"unknown routing scheme {scheme!r}")
    if n_per_split < 1:
        raise ValidationError(f"n_per_split must be >= 1, got {n_per_split}")
    if t.node_ids() != tuple(range(t.n_nodes)):
        raise ValidationError("dataset topology must have dense node ids 0..N-1")
    var_graphs: dict[int, Topology] | None = None
    if variations is not None:
        if variations < 1:
            raise ValidationError(f"variations must be >= 1, got {variations}")
        if n_per_split % variations:
            raise ValidationError(
                f"n_per_split={n_per_split} not divisible by variations={variations}"
            )
        var_rng = generator(substream(master_seed, STREAM_VARIATIONS))
        var_graphs = {
            i: topo.sample_variation(t, var_rng) for i in range(variations)
        }

    n = t.n_nodes
    per_split: dict[str, tuple[list[np.ndarray], list[float], list[int | None]]] = {}
    for split in SPLIT_NAMES:
        seeds = substream(master_seed, SPLIT_STREAMS[split]).spawn(n_per_split)
        var_ids: list[int | None] = []
        raw: list[DemandMatrix] = []
        for j in range(n_per_split):
            if var_graphs is None:
                graph, vid = t, None
            else:
                vid = j * variations // n_per_split
                graph = var_graphs[vid]
            var_ids.append(vid)
            raw.append(
                gravity_dm(graph, generator(seeds[j]), n=n, rescale=False)
            )
        # Samples of one variation are contiguous; rescale each such run in
        # a single batched solve on its graph.
        matrices: list[np.ndarray] = []
        labels: list[float] = []
        start = 0
        while start < n_per_split:
            stop = start
            while stop < n_per_split and var_ids[stop] == var_ids[start]:
                stop += 1
            graph = t if var_ids[start] is None else var_graphs[var_ids[start]]
            chunk = raw[start:stop]
            thetas = mcnf_lp.min_mlu_batch(graph, chunk, epsilon, metric)
            for dm, res in zip(chunk, thetas):
                scaled = mcnf_lp.rescale_demands(dm, res.theta)
                matrices.append(scaled.values)
                labels.append(routing.route(graph, scaled, scheme, metric).mlu)
            start = stop
        per_split[split] = (matrices, labels, var_ids)

    max_demand = max(
        arr.max() for mats, _, _ in per_split.values() for arr in mats
    )
    if max_demand <= 0:
        raise ValidationError("degenerate datasets: no positive demand generated")
    norm = Normalization(
        max_demand=float(max_demand), max_capacity=float(t.capacities().max())
    )

    trivial: bool | None = None
    if check_trivial:
        trivial = topo.is_trivial_topology(
            t,
            scheme,
            generator(substream(master_seed, STREAM_TRIVIALITY)),
            epsilon=epsilon,
            metric=metric,
        )

    datasets = []
    for split in SPLIT_NAMES:
        matrices, labels, var_ids = per_split[split]
        samples = []
        for arr, label, vid in zip(matrices, labels, var_ids):
            std = arr / norm.max_demand
            std.setflags(write=False)
            samples.append(Sample(std, float(label), vid))
        datasets.append(
            Dataset(
                topology=t,
                split=split,
                samples=tuple(samples),
                normalization=norm,
                scheme=scheme,
                metric=metric,
                master_seed=master_seed,
                epsilon=epsilon,
                variations=var_graphs,
                trivial_warning=trivial,
            )
        )
    return tuple(datasets)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Disk format: one JSON line per sample plus a sidecar manifest
# ---------------------------------------------------------------------------


def save_datasets(directory: str, datasets: tuple[Dataset, Dataset, Dataset]) -> dict:
    """Write the three splits and their manifest; returns the manifest."""
    by_split = {d.split: d for d in datasets}
    if set(by_split) != set(SPLIT_NAMES):
        raise ValidationError(f"expected splits {SPLIT_NAMES}, got {sorted(by_split)}")
    ref = by_split["train"]
    os.makedirs(directory, exist_ok=True)
    n = ref.matrix_size
    for split in SPLIT_NAMES:
        ds = by_split[split]
        lines = []
        for s in ds.samples:
            obj = {
                "variation": s.variation_id,
                "demands": [float(x) for x in s.demands.reshape(-1)],
                "mlu": s.label,
            }
            lines.append(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        write_text_atomic(os.path.join(directory, f"{split}.jsonl"), "\n".join(lines) + "\n")

    manifest = {
        "version": DATASET_VERSION,
        "topology_hash": ref.topology.content_hash(),
        "topology": ref.topology.to_json_obj(),
        "scheme": ref.scheme,
        "metric": ref.metric,
        "master_seed": ref.master_seed,
        "epsilon": ref.epsilon,
        "n_per_split": ref.n_samples,
        "normalization": {
            "max_demand": ref.normalization.max_demand,
            "max_capacity": ref.normalization.max_capacity,
        },
        "variations": None
        if ref.variations is None
        else {
            str(vid): sorted(g.node_ids()) for vid, g in ref.variations.items()
        },
        "trivial_warning": ref.trivial_warning,
        "flow_entries": {
            "per_sample": n * n,
            "total": expected_flow_entries(ref.n_samples, n),
        },
        "splits": list(SPLIT_NAMES),
    }
    write_text_atomic(
        os.path.join(directory, MANIFEST_NAME),
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )
    return manifest


def load_datasets(directory: str) -> tuple[Dataset, Dataset, Dataset]:
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad dataset manifest {path}: {exc}") from exc
    if manifest.get("version") != DATASET_VERSION:
        raise ValidationError(
            f"unsupported dataset version {manifest.get('version')!r}"
        )
    t = Topology.from_json_obj(manifest["topology"])
    if t.content_hash() != manifest["topology_hash"]:
        raise ValidationError("topology hash mismatch in dataset manifest")
    var_graphs = None
    if manifest["variations"] is not None:
        var_graphs = {
            int(vid): t.subgraph(ids, name=f"{t.name}#var{vid}")
            for vid, ids in manifest["variations"].items()
        }
    norm = Normalization(
        max_demand=manifest["normalization"]["max_demand"],
        max_capacity=manifest["normalization"]["max_capacity"],
    )
    n = t.n_nodes
    datasets = []
    for split in SPLIT_NAMES:
        samples = []
        with open(os.path.join(directory, f"{split}.jsonl"), encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    arr = np.array(obj["demands"], dtype=np.float64).reshape(n, n)
                    sample = Sample(
                        arr,
                        float(obj["mlu"]),
                        None if obj["variation"] is None else int(obj["variation"]),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise ParseError(
                        f"bad sample in {split}.jsonl: {exc}", lineno
                    ) from exc
                arr.setflags(write=False)
                samples.append(sample)
        datasets.append(
            Dataset(
                topology=t,
                split=split,
                samples=tuple(samples),
                normalization=norm,
                scheme=manifest["scheme"],
                metric=manifest["metric"],
                master_seed=manifest["master_seed"],
                epsilon=manifest["epsilon"],
                variations=var_graphs,
                trivial_warning=manifest["trivial_warning"],
            )
        )
    return tuple(datasets)  # type: ignore[return-value]
