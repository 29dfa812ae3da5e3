import json
import random
import warnings

import pytest

from dcv_rood import harness
from dcv_rood.cli import main
from dcv_rood.metrics import read_metric_csv
from dcv_rood.splitter import read_folds
from dcv_rood.taxonomy import write_manifest
from helpers import flat_set, tree_set


@pytest.fixture(scope="module")
def finished_run(small_suite, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    rc = main(["run", "--config", str(small_suite), "--set", f"output_dir={json.dumps(str(out))}"])
    assert rc == 0
    return out


def test_split_flat_pair(tmp_path):
    write_manifest(flat_set("id", [6, 7]), tmp_path / "id.json")
    write_manifest(flat_set("ood", [3, 4, 5]), tmp_path / "ood.json")
    rc = main(["split", "--manifest", str(tmp_path / "id.json"), "--ood-manifest", str(tmp_path / "ood.json"),
               "--k", "3", "--seed", "42", "--out", str(tmp_path / "f")])
    assert rc == 0
    f_ood = read_folds(tmp_path / "f" / "folds_ood.json")
    assert sorted(f_ood.fold_sizes()) == [3, 4, 5]
    assert (tmp_path / "f" / "warnings.log").exists()
    # same seed, same bytes
    main(["split", "--manifest", str(tmp_path / "id.json"), "--ood-manifest", str(tmp_path / "ood.json"),
          "--k", "3", "--seed", "42", "--out", str(tmp_path / "g")])
    assert (tmp_path / "f" / "folds_id.json").read_bytes() == (tmp_path / "g" / "folds_id.json").read_bytes()


def test_split_hierarchical(tmp_path):
    write_manifest(tree_set(random.Random(0), 2, 3, 5, 4, 2), tmp_path / "h.json")
    rc = main(["split", "--manifest", str(tmp_path / "h.json"), "--p", "0.4", "--k", "2", "--seed", "1",
               "--out", str(tmp_path / "f")])
    assert rc == 0
    split = json.loads((tmp_path / "f" / "split.json").read_text())
    assert len(split["ood_classes"]) == 12 and not set(split["ood_classes"]) & set(split["id_classes"])
    assert (tmp_path / "f" / "folds_ood.json").exists()


def test_split_single_manifest(tmp_path):
    write_manifest(flat_set("c", [5, 5]), tmp_path / "m.json")
    assert main(["split", "--manifest", str(tmp_path / "m.json"), "--k", "2", "--out", str(tmp_path)]) == 0
    assert read_folds(tmp_path / "folds.json").k == 2


def test_unknown_flag_exits_one(capsys):
    assert main(["split", "--bogus"]) == 1
    assert "error" in capsys.readouterr().err
    assert main([]) == 1


def test_validation_error_exits_one(tmp_path, small_suite, capsys):
    write_manifest(flat_set("c", [3]), tmp_path / "m.json")
    assert main(["split", "--manifest", str(tmp_path / "m.json"), "--k", "1", "--out", str(tmp_path)]) == 1
    assert main(["truth", "--config", str(small_suite), "--set", "k=1"]) == 1
    assert "ConfigError" in capsys.readouterr().err


def test_empty_truth_dir_is_config_error(tmp_path):
    assert main(["compare", "--truth", str(tmp_path), "--dcv", str(tmp_path), "--out", str(tmp_path)]) == 1


def test_rerun_needs_resume(finished_run, small_suite):
    args = ["run", "--config", str(small_suite), "--set", f"output_dir={json.dumps(str(finished_run))}"]
    assert main(args) == 1
    assert main(args + ["--resume"]) == 0


def test_compare_from_directories(finished_run, tmp_path, capsys):
    rc = main(["compare", "--truth", str(finished_run), "--dcv", str(finished_run), "--out", str(tmp_path)])
    assert rc == 0
    assert "hit_rate=" in capsys.readouterr().out
    a = json.loads((tmp_path / "fidelity.json").read_text())
    b = json.loads((finished_run / "compare" / "fidelity.json").read_text())
    assert a == b


def test_compare_from_matrices(finished_run, tmp_path, capsys):
    cmp_dir = finished_run / "compare"
    rc = main(["compare", "--benchmark-matrix", str(cmp_dir / "significance_auroc_truth.csv"),
               "--cv-matrices", str(cmp_dir / "significance_auroc_cv01.csv"),
               str(cmp_dir / "significance_auroc_cv02.csv"), "--metric-name", "auroc",
               "--alpha", "0.1", "--out", str(tmp_path)])
    assert rc == 0
    printed = capsys.readouterr().out
    doc = json.loads((cmp_dir / "fidelity.json").read_text())
    ref = next(d for d in doc if d["metric"] == "auroc" and d["alpha"] == 0.1)
    fmt = lambda v: "null" if v is None else f"{v:.4f}"
    assert f"hit_rate={fmt(ref['hit_rate'])} error_rate={fmt(ref['error_rate'])}" in printed


def test_score_then_eval_matches_dcv(finished_run, small_suite, tmp_path):
    folds = finished_run / "dcv" / "exp_00"
    assert main(["score", "--config", str(small_suite), "--folds", str(folds), "--out", str(tmp_path / "s")]) == 0
    assert main(["eval", "--config", str(small_suite), "--folds", str(folds), "--scores", str(tmp_path / "s"),
                 "--out", str(tmp_path / "metrics.csv")]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (folds / "metrics.csv").read_bytes()


def test_eval_missing_scores(finished_run, small_suite, tmp_path):
    folds = finished_run / "dcv" / "exp_00"
    rc = main(["eval", "--config", str(small_suite), "--folds", str(folds), "--scores", str(tmp_path),
               "--pair", "A-near", "--out", str(tmp_path / "m.csv")])
    assert rc == 2  # missing score file is a runtime error


def test_synth_writes_runnable_suite(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--seed", "5", "--e-runs", "2", "--r-truth", "3"]) == 0
    cfg = harness.ExperimentConfig.load(tmp_path / "config.json")
    assert cfg.e_runs == 2 and cfg.r_truth == 3 and len(cfg.detectors) == 8
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        dcv = harness.run_dcv_rood(harness.with_overrides(cfg, dataset_pairs=cfg.dataset_pairs[:1], e_runs=1))
    assert read_metric_csv(tmp_path / "run" / "dcv" / "exp_00" / "metrics.csv") == dcv.runs[0]


def test_compare_config_with_new_alpha_leaves_run_untouched(finished_run, small_suite, tmp_path):
    cfg_args = ["--config", str(small_suite), "--set", f"output_dir={json.dumps(str(finished_run))}"]
    ledger = (finished_run / "ledger.jsonl").read_bytes()
    assert main(["compare", *cfg_args, "--alpha", "0.2"]) == 1  # needs --out
    assert main(["compare", *cfg_args, "--alpha", "0.2", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fidelity.json").read_text())
    assert {d["alpha"] for d in doc} == {0.2}
    assert (finished_run / "ledger.jsonl").read_bytes() == ledger
