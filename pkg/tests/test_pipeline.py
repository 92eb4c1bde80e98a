"""Grid orchestration, artifact layout, CLI behavior, and determinism."""
import json
import os

import numpy as np
import pytest

import judgecal.cli as cli
from judgecal import (
    ArgumentError,
    CapacityError,
    DomainError,
    EnsembleWeights,
    FormatError,
    IntegrityError,
    MethodSpec,
    RunConfig,
    ValidationError,
    cmd_compare,
    cmd_eval,
    cmd_fit,
    cmd_report,
    cmd_synth,
    derive_seed,
    load_bundle,
    load_config,
)


def config_dict(**overrides):
    base = {
        "seed": 3,
        "source": {
            "mode": "synth",
            "params": {
                "k_true": 2,
                "n_prompts": 5,
                "dim": 4,
                "concentration": 0.3,
                "n_support": 32,
                "n_test": 120,
            },
        },
        "methods": [
            {"name": "std", "kind": "standard"},
            {"name": "avg", "kind": "average"},
            {"name": "bpe", "kind": "bpe"},
            {"name": "mmb2", "kind": "mmb", "k": 2},
        ],
        "grid": {"prompt_counts": [5], "validation_sizes": [8], "data_seeds": [0, 1]},
        "stats": {"n_permutations": 400},
    }
    base.update(overrides)
    return base


def write_config(tmp_path, obj, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(obj))
    return str(path)


def tree_bytes(root):
    out = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            full = os.path.join(dirpath, name)
            out[os.path.relpath(full, root)] = open(full, "rb").read()
    return out


def test_derive_seed_separates_families():
    assert derive_seed(0, "data", 1) == derive_seed(0, "data", 1)
    seen = {
        derive_seed(0, "data", 1),
        derive_seed(0, "data", 2),
        derive_seed(1, "data", 1),
        derive_seed(0, "cluster", 1),
        derive_seed(0, "compare", "ece", "bpe"),
    }
    assert len(seen) == 5
    for value in seen:
        assert isinstance(value, int) and 0 <= value < 2**64


def test_method_spec_validation():
    assert MethodSpec(name="bpe", kind="bpe").k == 8
    with pytest.raises(ValidationError):
        MethodSpec(name="has space", kind="bpe")
    with pytest.raises(ValidationError):
        MethodSpec(name="", kind="bpe")
    with pytest.raises(ValidationError):
        MethodSpec(name="x", kind="ridge")
    with pytest.raises(ValidationError):
        MethodSpec(name="x", kind="mmb", k=0)
    with pytest.raises(ValidationError):
        MethodSpec(name="x", kind="mmb", temperature=0.0)


def test_run_config_defaults_and_echo():
    config = RunConfig.from_dict(config_dict())
    assert config.seed == 3
    assert config.alpha == 0.05
    assert config.n_permutations == 400
    assert config.train_seeds == (0,) and config.data_seeds == (0, 1)
    echo = config.echo()
    assert echo["grid"]["data_seeds"] == [0, 1]
    assert echo["metrics"]["no_preference"] is False
    cells = config.grid_cells()
    assert [c.tag() for c in cells] == ["P005_V0008_t0_d0_c0", "P005_V0008_t0_d1_c0"]
    assert config.with_seed(9).seed == 9


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(extra=1),
        lambda d: d["source"].update(extra=1),
        lambda d: d["methods"][0].update(extra=1),
        lambda d: d["grid"].update(extra=1),
        lambda d: d["stats"].update(extra=1),
        lambda d: d.update(metrics={"extra": 1}),
        lambda d: d["source"]["params"].update(seed=5),
        lambda d: d.update(methods=[]),
        lambda d: d.update(methods=[{"kind": "bpe"}, {"kind": "bpe"}]),
        lambda d: d.update(source={"mode": "files"}),
        lambda d: d.update(source={"mode": "tape"}),
        lambda d: d.update(grid={"validation_sizes": [8]}),
        lambda d: d["grid"].update(prompt_counts=[5, True]),
        lambda d: d.update(seed=True),
        lambda d: d.update(stats={"permutation_mode": "bayes"}),
        lambda d: d.update(stats={"n_permutations": 0}),
    ],
)
def test_run_config_rejects_malformed(mutate):
    obj = config_dict()
    mutate(obj)
    with pytest.raises(ValidationError):
        RunConfig.from_dict(obj)


def test_run_config_domain_checks():
    with pytest.raises(DomainError):
        RunConfig.from_dict(config_dict(stats={"alpha": 1.5}))
    with pytest.raises(DomainError):
        RunConfig.from_dict(config_dict(metrics={"n_bins": 0}))


def test_load_config_and_seed_override(tmp_path):
    path = write_config(tmp_path, config_dict())
    config = load_config(path)
    assert config.seed == 3
    assert load_config(path, seed_override=11).seed == 11
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(FormatError):
        load_config(bad)


def test_synth_config_rejects_unknown_params():
    config = RunConfig.from_dict(
        config_dict(source={"mode": "synth", "params": {"bogus_knob": 1}})
    )
    with pytest.raises(ValidationError, match="bad source params"):
        config.synth_config(n_val=8, seed=0)


@pytest.fixture(scope="module")
def fitted_run(tmp_path_factory):
    """One small fitted+evaluated grid shared by the artifact tests."""
    out = tmp_path_factory.mktemp("run")
    config = RunConfig.from_dict(config_dict())
    cmd_fit(config, out)
    cmd_eval(config, out)
    cmd_compare(config, out)
    return config, out


def test_fit_artifacts(fitted_run):
    config, out = fitted_run
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["methods"] == ["std", "avg", "bpe", "mmb2"]
    assert manifest["cells"] == ["P005_V0008_t0_d0_c0", "P005_V0008_t0_d1_c0"]
    assert len(manifest["weights"]) == 8
    for key, rel in manifest["weights"].items():
        assert (out / rel).exists(), key

    avg = EnsembleWeights.load(out / "weights" / "avg__P005_V0008_t0_d0_c0.json")
    np.testing.assert_allclose(avg.weights, np.full((1, 5), 0.2), atol=1e-12)
    std = EnsembleWeights.load(out / "weights" / "std__P005_V0008_t0_d0_c0.json")
    assert sorted(std.weights[0]) == [0.0, 0.0, 0.0, 0.0, 1.0]
    mmb = EnsembleWeights.load(out / "weights" / "mmb2__P005_V0008_t0_d0_c0.json")
    assert mmb.weights.shape == (2, 5)
    assert mmb.cluster_model is not None

    lines = (out / "fit_reports.csv").read_text().strip().split("\n")
    header = lines[0].split(",")
    assert header[:5] == ["n_prompts", "n_val", "train_seed", "data_seed", "cluster_seed"]
    body = [ln.split(",") for ln in lines[1:]]
    # Only the optimized kinds carry fit diagnostics.
    assert {row[6] for row in body} == {"bpe", "mmb"}
    assert all(row[7] == "true" for row in body)
    assert all(float(row[10]) <= 1e-6 for row in body)


def test_eval_artifacts(fitted_run):
    config, out = fitted_run
    report = json.loads((out / "eval" / "report.json").read_text())
    assert report["failed_cells"] == []
    assert report["metrics"][0] == "ece" and "mean_confidence" in report["metrics"]

    lines = (out / "eval" / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "n_prompts,n_val,train_seed,data_seed,cluster_seed,method,metric,value"
    rows = [ln.split(",") for ln in lines[1:]]
    assert len(rows) == 2 * 4 * 10
    methods = {r[5] for r in rows}
    assert methods == {"std", "avg", "bpe", "mmb2"}

    agg_lines = (out / "eval" / "aggregate.csv").read_text().strip().split("\n")
    assert agg_lines[0] == "method,metric,n_cells,mean,ci_low,ci_high"
    for ln in agg_lines[1:]:
        method, metric, n_cells, mean, lo, hi = ln.split(",")
        assert int(n_cells) == 2
        assert float(lo) <= float(mean) <= float(hi)

    curve_lines = (out / "eval" / "curves.csv").read_text().strip().split("\n")
    assert len(curve_lines) > 1
    full_cov = [ln.split(",") for ln in curve_lines[1:] if float(ln.split(",")[6]) == 1.0]
    metric_rows = {(r[3], r[5], r[6]): float(r[7]) for r in rows}
    for r in full_cov:
        accuracy = metric_rows[(r[3], r[5], "accuracy")]
        assert float(r[7]) == pytest.approx(1.0 - accuracy, abs=1e-12)


def test_comparison_structure(fitted_run):
    config, out = fitted_run
    lines = (out / "eval" / "comparison.csv").read_text().strip().split("\n")
    assert lines[0] == "metric,method,best_method,statistic,raw_p,adjusted_p,rejected,best_equivalent"
    rows = [ln.split(",") for ln in lines[1:]]
    by_metric = {}
    for r in rows:
        by_metric.setdefault(r[0], []).append(r)
    agg = {}
    for ln in (out / "eval" / "aggregate.csv").read_text().strip().split("\n")[1:]:
        method, metric, _, mean, _, _ = ln.split(",")
        agg.setdefault(metric, {})[method] = float(mean)
    for metric, group in by_metric.items():
        best_rows = [r for r in group if r[1] == r[2]]
        assert len(best_rows) == 1
        best = best_rows[0]
        assert best[3] == "0.0" and best[4] == "1.0" and best[5] == "1.0"
        assert best[6] == "false" and best[7] == "true"
        means = agg[metric]
        if metric in ("accuracy", "f1", "kappa", "roc_auc", "pr_auc"):
            target = max(means.values())
        else:
            target = min(means.values())
        assert means[best[1]] == target
        for r in group:
            assert r[2] == best[1]
            assert (r[6] == "true") == (float(r[5]) <= config.alpha)


def test_compare_with_fixed_baseline(fitted_run):
    config, out = fitted_run
    rows = cmd_compare(config, out, baseline="avg")
    assert all(r[2] == "avg" for r in rows)
    with pytest.raises(ArgumentError):
        cmd_compare(config, out, baseline="nope")


def test_compare_rejects_misaligned_cells(fitted_run, tmp_path):
    config, out = fitted_run
    eval_dir = tmp_path / "eval"
    eval_dir.mkdir()
    source = (out / "eval" / "metrics.csv").read_text().strip().split("\n")
    drop = next(i for i, ln in enumerate(source) if i > 0 and ",bpe,ece," in ln)
    eval_dir.joinpath("metrics.csv").write_text("\n".join(ln for i, ln in enumerate(source) if i != drop) + "\n")
    with pytest.raises(IntegrityError, match="aligned"):
        cmd_compare(config, tmp_path)


def test_pipeline_runs_are_byte_identical(tmp_path):
    config = RunConfig.from_dict(config_dict())
    for name in ("one", "two"):
        cmd_fit(config, tmp_path / name)
        cmd_eval(config, tmp_path / name)
        cmd_compare(config, tmp_path / name)
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")


def test_parallel_fit_matches_serial(tmp_path):
    config = RunConfig.from_dict(config_dict())
    cmd_fit(config, tmp_path / "serial", parallel=1)
    cmd_fit(config, tmp_path / "para", parallel=2)
    assert tree_bytes(tmp_path / "serial") == tree_bytes(tmp_path / "para")


def test_eval_before_fit_is_an_integrity_error(tmp_path):
    config = RunConfig.from_dict(config_dict())
    with pytest.raises(IntegrityError, match="run fit first"):
        cmd_eval(config, tmp_path)


def test_failed_cells_are_reported_not_fatal(tmp_path):
    config = RunConfig.from_dict(config_dict())
    cmd_fit(config, tmp_path)
    # Corrupt one cell's mixture weights with a wrong-dimension cluster
    # model; evaluation of that cell fails downstream while others proceed.
    path = tmp_path / "weights" / "mmb2__P005_V0008_t0_d0_c0.json"
    obj = json.loads(path.read_text())
    obj["cluster_model"]["centroids"] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    path.write_text(json.dumps(obj))
    report = cmd_eval(config, tmp_path)
    assert len(report["failed_cells"]) == 1
    assert report["failed_cells"][0]["cell"] == "P005_V0008_t0_d0_c0"
    assert "DimensionError" in report["failed_cells"][0]["error"]
    lines = (tmp_path / "eval" / "metrics.csv").read_text().strip().split("\n")
    assert len(lines) == 1 + 1 * 4 * 10


def test_no_preference_mode_only_reports_confidence(tmp_path):
    obj = config_dict(metrics={"no_preference": True})
    config = RunConfig.from_dict(obj)
    cmd_fit(config, tmp_path)
    report = cmd_eval(config, tmp_path)
    assert report["metrics"] == ["mean_confidence"]
    lines = (tmp_path / "eval" / "metrics.csv").read_text().strip().split("\n")
    rows = [ln.split(",") for ln in lines[1:]]
    assert len(rows) == 2 * 4
    assert {r[6] for r in rows} == {"mean_confidence"}
    curves = (tmp_path / "eval" / "curves.csv").read_text().strip().split("\n")
    assert len(curves) == 1


def test_files_mode_round_trip(tmp_path):
    synth_cfg = RunConfig.from_dict(
        config_dict(
            grid={"prompt_counts": [5], "validation_sizes": [8], "data_seeds": [0]},
        )
    )
    data_dir = tmp_path / "data"
    cmd_synth(synth_cfg, data_dir)
    bundle = load_bundle(data_dir)
    assert len(bundle.prompt_ids) == 5

    files_obj = config_dict(
        source={"mode": "files", "data_dir": str(data_dir), "n_support": 24},
        grid={"prompt_counts": [3], "validation_sizes": [6], "data_seeds": [0, 1]},
    )
    config = RunConfig.from_dict(files_obj)
    out = tmp_path / "run"
    cmd_fit(config, out)
    weights = EnsembleWeights.load(out / "weights" / "bpe__P003_V0006_t0_d0_c0.json")
    assert len(weights.prompt_ids) == 3
    assert set(weights.prompt_ids) <= set(bundle.prompt_ids)
    report = cmd_eval(config, out)
    assert report["failed_cells"] == []

    too_many = RunConfig.from_dict(
        config_dict(
            source={"mode": "files", "data_dir": str(data_dir)},
            grid={"prompt_counts": [9], "validation_sizes": [6]},
        )
    )
    with pytest.raises(CapacityError):
        cmd_fit(too_many, tmp_path / "run2")


def test_cli_full_chain(tmp_path, capsys):
    path = write_config(tmp_path, config_dict())
    out = str(tmp_path / "run")
    assert cli.main(["fit", "--config", path, "--out", out]) == 0
    assert cli.main(["eval", "--config", path, "--out", out]) == 0
    assert cli.main(["compare", "--config", path, "--out", out]) == 0
    assert cli.main(["report", "--out", out]) == 0
    captured = capsys.readouterr()
    assert "judgecal evaluation report" in captured.out
    assert "aggregate metrics" in captured.out
    assert cli.main(["report", "--out", out, "--format", "csv"]) == 0
    captured = capsys.readouterr()
    assert captured.out.startswith("method,metric,n_cells,mean,ci_low,ci_high")


def test_cli_synth_writes_bundle(tmp_path, capsys):
    path = write_config(tmp_path, config_dict())
    out = str(tmp_path / "bench")
    assert cli.main(["synth", "--config", path, "--out", out, "--no-preference"]) == 0
    for name in ("records.jsonl", "embeddings.csv", "splits.json", "ground_truth.json"):
        assert os.path.exists(os.path.join(out, name))
    npref = load_bundle(os.path.join(out, "no_preference"))
    assert npref.samples("test")
    capsys.readouterr()


def test_cli_seed_override_lands_in_manifest(tmp_path, capsys):
    path = write_config(tmp_path, config_dict())
    out = str(tmp_path / "run")
    assert cli.main(["fit", "--config", path, "--out", out, "--seed", "42"]) == 0
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 42
    capsys.readouterr()


def test_cli_exit_codes(tmp_path, capsys):
    bad_config = write_config(tmp_path, config_dict(extra=1), name="bad.json")
    out = str(tmp_path / "run")
    assert cli.main(["fit", "--config", bad_config, "--out", out]) == 1
    assert "error:" in capsys.readouterr().err

    good = write_config(tmp_path, config_dict())
    assert cli.main(["eval", "--config", good, "--out", str(tmp_path / "empty")]) == 2
    assert "run fit first" in capsys.readouterr().err

    assert cli.main(["report", "--out", str(tmp_path / "empty")]) == 2
    capsys.readouterr()

    missing = str(tmp_path / "nowhere.json")
    assert cli.main(["fit", "--config", missing, "--out", out]) == 2
    capsys.readouterr()

    assert cli.main([]) == 1
    capsys.readouterr()

    cli.main(["fit", "--config", good, "--out", out])
    cli.main(["eval", "--config", good, "--out", out])
    capsys.readouterr()
    assert cli.main(["compare", "--config", good, "--out", out, "--baseline", "nope"]) == 1
    assert "error:" in capsys.readouterr().err
