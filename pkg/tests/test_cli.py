"""Command line interface: exit codes, output files, determinism."""

import json

import numpy as np
import pytest

import synth
from netmlu.cli import main
from netmlu.topology import Edge, Node, Topology


def _write_topology_json(path, t):
    path.write_text(json.dumps(t.to_json_obj()))
    return str(path)


def _write_demands(path, values):
    path.write_text(json.dumps({"demands": np.asarray(values).tolist()}))
    return str(path)


# -- route ------------------------------------------------------------------------


def test_route_single_edge(fixtures_dir, capsys):
    rc = main(
        [
            "route",
            "--topology",
            str(fixtures_dir / "single_edge.json"),
            "--demands",
            str(fixtures_dir / "single_edge_demands.json"),
            "--scheme",
            "ecmp",
        ]
    )
    assert rc == 0
    obj = json.loads(capsys.readouterr().out)
    assert obj["mlu"] == 0.4
    assert obj["scheme"] == "ecmp"
    assert obj["loads"]["0"] == 4.0


def test_route_repetita_and_out_file(fixtures_dir, tmp_path, capsys):
    dm_path = tmp_path / "dm.json"
    values = np.zeros((23, 23))
    values[0, 5] = 100.0
    _write_demands(dm_path, values)
    out_path = tmp_path / "outcome.json"
    rc = main(
        [
            "route",
            "--topology",
            str(fixtures_dir / "aconet_like.graph"),
            "--demands",
            str(dm_path),
            "--scheme",
            "ssp",
            "--out",
            str(out_path),
        ]
    )
    assert rc == 0
    obj = json.loads(out_path.read_text())
    assert obj["scheme"] == "ssp"
    assert obj["mlu"] > 0
    capsys.readouterr()


def test_route_bare_matrix_accepted(fixtures_dir, tmp_path, capsys):
    dm_path = tmp_path / "dm.json"
    dm_path.write_text("[[0.0, 2.0], [0.0, 0.0]]")
    rc = main(
        [
            "route",
            "--topology",
            str(fixtures_dir / "single_edge.json"),
            "--demands",
            str(dm_path),
        ]
    )
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["mlu"] == 0.2


def test_route_missing_topology_file(tmp_path, capsys):
    dm = _write_demands(tmp_path / "dm.json", np.zeros((2, 2)))
    rc = main(["route", "--topology", str(tmp_path / "nope.json"), "--demands", dm])
    assert rc == 3  # IO failure, distinct from validation
    assert "error:" in capsys.readouterr().err


def test_route_malformed_topology(tmp_path, capsys):
    bad = tmp_path / "bad.graph"
    bad.write_text("NODES zero\n")
    dm = _write_demands(tmp_path / "dm.json", np.zeros((2, 2)))
    rc = main(["route", "--topology", str(bad), "--demands", dm])
    assert rc == 2
    err = capsys.readouterr().err
    assert "line 1" in err


def test_route_bad_demands_shape(fixtures_dir, tmp_path, capsys):
    dm = _write_demands(tmp_path / "dm.json", np.zeros((3, 2)))
    rc = main(
        [
            "route",
            "--topology",
            str(fixtures_dir / "single_edge.json"),
            "--demands",
            dm,
        ]
    )
    assert rc == 2
    capsys.readouterr()


def test_unknown_scheme_is_usage_error(fixtures_dir, tmp_path, capsys):
    dm = _write_demands(tmp_path / "dm.json", np.zeros((2, 2)))
    with pytest.raises(SystemExit) as exc:
        main(
            [
                "route",
                "--topology",
                str(fixtures_dir / "single_edge.json"),
                "--demands",
                dm,
                "--scheme",
                "ospf",
            ]
        )
    assert exc.value.code == 2
    capsys.readouterr()


# -- gen-data ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_topology_file(tmp_path_factory):
    t = synth.symmetric_graph(5, 7, np.random.default_rng(70), name="smallsym")
    path = tmp_path_factory.mktemp("topo") / "smallsym.json"
    path.write_text(json.dumps(t.to_json_obj()))
    return str(path)


def test_gen_data_writes_datasets_and_study(small_topology_file, tmp_path, capsys):
    out = tmp_path / "data"
    rc = main(
        [
            "gen-data",
            "--topology",
            small_topology_file,
            "--scheme",
            "ecmp",
            "--samples",
            "4",
            "--seed",
            "5",
            "--no-trivial-check",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    stdout = capsys.readouterr().out
    assert "flow entries" in stdout or "entries" in stdout
    ds_dir = out / "smallsym-ecmp"
    for name in ("train.jsonl", "validate.jsonl", "test.jsonl", "manifest.json"):
        assert (ds_dir / name).exists()
    manifest = json.loads((ds_dir / "manifest.json").read_text())
    assert manifest["scheme"] == "ecmp"
    assert manifest["n_per_split"] == 4
    assert manifest["master_seed"] == 5
    study = json.loads((out / "study.json").read_text())
    assert study["command"] == "gen-data"
    assert study["manifest"]["scheme"] == "ecmp"
    assert study["datasets"] == {"smallsym": "smallsym-ecmp"}


def test_gen_data_rerun_is_byte_identical(small_topology_file, tmp_path, capsys):
    out = tmp_path / "data"
    args = [
        "gen-data",
        "--topology",
        small_topology_file,
        "--samples",
        "3",
        "--no-trivial-check",
        "--out",
        str(out),
    ]
    assert main(args) == 0
    files = sorted((out / "smallsym-ecmp").iterdir()) + [out / "study.json"]
    first = {f.name: f.read_bytes() for f in files}
    assert main(args) == 0
    for f in files:
        assert f.read_bytes() == first[f.name], f.name
    capsys.readouterr()


def test_gen_data_variation_sampling_failure_is_runtime_error(tmp_path, capsys):
    # one-way ring: strong connectivity breaks on any node removal
    n = 8
    ring = Topology(
        "ring",
        [Node(i) for i in range(n)],
        [Edge(i, i, (i + 1) % n, 1.0, 10.0) for i in range(n)],
    )
    topo_path = _write_topology_json(tmp_path / "ring.json", ring)
    rc = main(
        [
            "gen-data",
            "--topology",
            topo_path,
            "--samples",
            "2",
            "--variations",
            "2",
            "--no-trivial-check",
            "--out",
            str(tmp_path / "data"),
        ]
    )
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_gen_data_bad_samples_is_validation_error(small_topology_file, tmp_path, capsys):
    rc = main(
        [
            "gen-data",
            "--topology",
            small_topology_file,
            "--samples",
            "0",
            "--no-trivial-check",
            "--out",
            str(tmp_path / "data"),
        ]
    )
    assert rc == 2
    capsys.readouterr()


# -- train / evaluate ------------------------------------------------------------------


@pytest.fixture(scope="module")
def generated_data(small_topology_file, tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "data"
    rc = main(
        [
            "gen-data",
            "--topology",
            small_topology_file,
            "--samples",
            "4",
            "--no-trivial-check",
            "--out",
            str(out),
        ]
    )
    assert rc == 0
    return out / "smallsym-ecmp"


def _truncate_presets(monkeypatch):
    """Shrink the desk preset so CLI training tests stay fast."""
    import netmlu.cli as cli
    from netmlu.harness import TrainConfig

    tiny = TrainConfig(epochs=2, batch_size=2, patience=2, seeds=(0,))
    monkeypatch.setitem(cli.harness.PRESETS, "desk", tiny)


def test_train_writes_run_file(generated_data, tmp_path, monkeypatch, capsys):
    _truncate_presets(monkeypatch)
    runs = tmp_path / "runs"
    rc = main(
        [
            "train",
            "--data",
            str(generated_data),
            "--arch",
            "gcn",
            "--preset",
            "desk",
            "--out",
            str(runs),
        ]
    )
    assert rc == 0
    run_file = runs / "smallsym-ecmp-gcn.run.json"
    assert run_file.exists()
    obj = json.loads(run_file.read_text())
    assert obj["command"] == "train"
    assert obj["manifest"]["architecture"] == "gcn"
    assert obj["result"]["architecture"] == "gcn"
    assert len(obj["result"]["runs"]) == 12
    assert "topology" in obj
    capsys.readouterr()


def test_train_parallel_matches_serial(generated_data, tmp_path, monkeypatch, capsys):
    _truncate_presets(monkeypatch)
    serial = tmp_path / "serial"
    parallel = tmp_path / "parallel"
    base = [
        "train",
        "--data",
        str(generated_data),
        "--arch",
        "gcn",
        "--preset",
        "desk",
    ]
    assert main(base + ["--out", str(serial)]) == 0
    assert main(base + ["--out", str(parallel), "--jobs", "2"]) == 0
    a = (serial / "smallsym-ecmp-gcn.run.json").read_bytes()
    b = (parallel / "smallsym-ecmp-gcn.run.json").read_bytes()
    assert a == b
    capsys.readouterr()


def test_train_missing_dataset_dir(tmp_path, capsys):
    rc = main(
        ["train", "--data", str(tmp_path / "absent"), "--arch", "gcn", "--out", str(tmp_path)]
    )
    assert rc == 2
    capsys.readouterr()


def test_evaluate_summary_and_ranks(generated_data, tmp_path, monkeypatch, capsys):
    _truncate_presets(monkeypatch)
    runs = tmp_path / "runs"
    for arch in ("gcn", "mlp"):
        assert (
            main(
                [
                    "train",
                    "--data",
                    str(generated_data),
                    "--arch",
                    arch,
                    "--preset",
                    "desk",
                    "--out",
                    str(runs),
                ]
            )
            == 0
        )
    out = tmp_path / "eval"
    rc = main(["evaluate", "--results", str(runs), "--out", str(out)])
    assert rc == 0
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("topology,architecture")
    assert len(summary) == 3  # header + 2 architectures
    ranks = json.loads((out / "rank_metrics.json").read_text())
    table = ranks["ranking"]["ecmp"]
    assert set(table["mrr"]) == {"gcn", "mlp"}
    assert sum(table["win_rate"].values()) == pytest.approx(100.0)
    assert table["topologies"] == ["smallsym"]
    capsys.readouterr()


def test_evaluate_empty_results_dir(tmp_path, capsys):
    rc = main(["evaluate", "--results", str(tmp_path), "--out", str(tmp_path / "o")])
    assert rc == 2
    capsys.readouterr()
