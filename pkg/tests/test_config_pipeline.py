import json

import numpy as np
import pytest
from pydantic import ValidationError

from fedlap import pipeline
from fedlap.config import RunConfig, header_line


def small_config(tmp_path, **over):
    base = {
        "dataset": {"block_sizes": [20, 20, 20], "p_in": 0.3, "p_out": 0.02, "feature_dim": 4,
                    "train_frac": 0.3, "val_frac": 0.2},
        "partition": {"K": 3},
        "r": 6,
        "train": {"epochs": 4, "d_s": 4, "hidden": [8], "struct_hidden": [8]},
        "attack": {"pairs": [[0.0139, 2277]], "r_grid": [100, 150, 175, 200]},
        "scaling_study": False,
        "output_dir": str(tmp_path / "run"),
    }
    for k, v in over.items():
        if isinstance(v, dict):
            base[k] = {**base.get(k, {}), **v}
        else:
            base[k] = v
    return RunConfig(**base)


def run_all(cfg, jobs=("ingest", "partition", "offline", "train", "attack", "report")):
    return {job: pipeline.JOBS[job](cfg) for job in jobs}


def write_chain(tmp_path, n=8):
    edges = tmp_path / "edges.tsv"
    edges.write_text("".join(f"{i}\t{i + 1}\n" for i in range(n - 1)))
    feats = tmp_path / "features.csv"
    feats.write_text("".join(f"{i * 0.1},{(-1) ** i}\n" for i in range(n)))
    labels = tmp_path / "labels.csv"
    labels.write_text("node_id,label\n" + "".join(f"{i},{i % 2}\n" for i in range(n)))
    return {"source": "files", "edges": str(edges), "features": str(feats), "labels": str(labels),
            "train_frac": 0.5, "val_frac": 0.25}


# ---- config


def test_defaults_validate_and_hash_is_stable():
    a, b = RunConfig(), RunConfig()
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    assert RunConfig(output_dir="elsewhere").config_hash() == a.config_hash()
    assert RunConfig(master_seed=1).config_hash() != a.config_hash()
    assert header_line(a) == f"# config_hash={a.config_hash()} master_seed=0\n"


@pytest.mark.parametrize("bad", [
    {"partition": {"K": 0}},
    {"partition": {"K": 500}},
    {"mode": "fedlap-plus", "r": None},
    {"dataset": {"source": "files"}},
    {"dataset": {"train_frac": 0.6, "val_frac": 0.5}},
    {"train": {"learning_rate": 0}},
    {"unknown_key": 1},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ValidationError):
        RunConfig(**bad)


def test_module_seeds_differ_and_depend_on_master_seed():
    cfg = RunConfig()
    seeds = {m: cfg.module_seed(m) for m in ("dataset", "partition", "offline", "train", "online")}
    assert len(set(seeds.values())) == len(seeds)
    assert all(0 <= s < 2 ** 32 for s in seeds.values())
    assert RunConfig(master_seed=3).module_seed("dataset") != seeds["dataset"]
    assert RunConfig().module_seed("dataset") == seeds["dataset"]


# ---- pipeline


def test_full_pipeline_outputs_are_stamped(tmp_path):
    cfg = small_config(tmp_path)
    out = run_all(cfg)
    assert all(r["exit_code"] == 0 and r["config_hash"] == cfg.config_hash() for r in out.values())
    root = tmp_path / "run"
    for name in ("metrics.csv", "partition.csv", "curves.csv", "r_sweep.csv", "comm_offline.csv", "comm_online.csv"):
        assert (root / name).read_text().startswith(header_line(cfg)), name
    assert (root / "basis" / "client_2.bin").exists()
    manifest = json.loads((root / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash()
    assert all(e["config_hash"] == cfg.config_hash() for e in manifest["files"].values())
    res = pipeline.verify(cfg)
    assert res["summary"]["problems"] == [] and res["summary"]["checked"] == len(manifest["files"])


def test_same_config_gives_identical_files(tmp_path):
    hashes = []
    for name in ("a", "b"):
        cfg = small_config(tmp_path, output_dir=str(tmp_path / name))
        run_all(cfg)
        m = json.loads((tmp_path / name / "manifest.json").read_text())
        hashes.append({k: v["sha256"] for k, v in m["files"].items()})
    assert hashes[0] == hashes[1]


def test_master_seed_changes_outputs(tmp_path):
    a = small_config(tmp_path, output_dir=str(tmp_path / "a"))
    b = small_config(tmp_path, output_dir=str(tmp_path / "b"), master_seed=1)
    for cfg in (a, b):
        run_all(cfg, ("ingest",))
    assert (tmp_path / "a" / "graph.npz").read_bytes() != (tmp_path / "b" / "graph.npz").read_bytes()


def test_single_client_basis_equals_centralized(tmp_path):
    ds = write_chain(tmp_path)
    cfg = small_config(tmp_path, dataset=ds, partition={"K": 1}, r=5, centralized=True)
    run_all(cfg, ("ingest", "partition", "offline"))
    basis = tmp_path / "run" / "basis"
    assert (basis / "client_0.bin").read_bytes() == (basis / "centralized.bin").read_bytes()


def test_one_epoch_gives_one_metrics_row(tmp_path):
    cfg = small_config(tmp_path, train={"epochs": 1})
    out = run_all(cfg, ("ingest", "partition", "offline", "train"))
    lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[1].startswith("epoch")
    assert out["train"]["summary"]["epochs"] == 1
    assert np.isfinite(out["train"]["summary"]["final"]["test_acc"])


def test_lambda_reg_zero_matches_structure_head_off(tmp_path):
    rows = []
    for name, lam in (("a", 0.0), ("b", 0.1)):
        cfg = small_config(tmp_path, output_dir=str(tmp_path / name), mode="none", train={"lambda_reg": lam})
        run_all(cfg, ("ingest", "partition", "train"))
        rows.append((tmp_path / name / "metrics.csv").read_text().splitlines()[1:])
    assert rows[0] == rows[1]


def test_fedlap_plus_online_phase_sends_no_node_vectors(tmp_path):
    cfg = small_config(tmp_path)
    out = run_all(cfg, ("ingest", "partition", "offline", "train"))
    assert out["train"]["summary"]["per_node_messages"] == 0
    kinds = set()
    for line in (tmp_path / "run" / "transcript_online.jsonl").read_text().splitlines()[1:]:
        kinds.add(json.loads(line)["kind"].split(":")[0])
    assert kinds <= {"count", "params", "grad", "metrics"}


def test_fedlap_mode_exchanges_boundary_rows(tmp_path):
    cfg = small_config(tmp_path, mode="fedlap")
    out = run_all(cfg, ("ingest", "partition", "train"))
    assert out["train"]["summary"]["per_node_messages"] > 0


def test_train_without_basis_is_missing_artifact(tmp_path):
    cfg = small_config(tmp_path)
    run_all(cfg, ("ingest", "partition"))
    with pytest.raises(pipeline.MissingArtifact) as err:
        pipeline.train(cfg)
    assert err.value.exit_code == 4


def test_stale_basis_is_missing_artifact(tmp_path):
    cfg = small_config(tmp_path)
    run_all(cfg, ("ingest", "partition", "offline"))
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.train(small_config(tmp_path, r=5))


def test_missing_input_file(tmp_path):
    cfg = small_config(tmp_path, dataset={"source": "files", "edges": str(tmp_path / "nope.tsv"),
                                          "features": str(tmp_path / "nope.csv")})
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.ingest(cfg)


def test_divergence_exit_code(tmp_path):
    cfg = small_config(tmp_path, mode="none", train={"learning_rate": 1e8, "epochs": 50})
    run_all(cfg, ("ingest", "partition"))
    with pytest.raises(pipeline.DivergenceAbort) as err:
        pipeline.train(cfg)
    assert err.value.exit_code == 3


def test_theory_only_attack(tmp_path):
    cfg = small_config(tmp_path)
    out = pipeline.attack(cfg)
    (pair,) = out["summary"]["pairs"]
    assert pair["threshold_r"] == 200 and pair["largest_private_r"] == 175
    assert out["summary"]["settings"] == []


def test_empirical_attack_records_ks_flags(tmp_path):
    cfg = small_config(tmp_path, attack={"theory_only": False, "empirical_n": 300, "empirical_p": 0.05,
                                         "empirical_r": 5, "trials": 1000, "ks_n": 500, "ks_p": 0.04,
                                         "ks_r": 10, "ks_samples": 2000})
    out = pipeline.attack(cfg)
    kinds = [s["kind"] for s in out["summary"]["settings"]]
    assert kinds == ["attack", "llr-law"]
    assert all(isinstance(s["ks_ok"], bool) for s in out["summary"]["settings"])
    assert any(w.startswith("only") for w in out["warnings"])
    text = (tmp_path / "run" / "curves.csv").read_text()
    assert "empirical-realistic" in text


def test_verify_detects_tampering(tmp_path):
    cfg = small_config(tmp_path)
    run_all(cfg, ("ingest", "partition"))
    p = tmp_path / "run" / "partition.csv"
    p.write_text(p.read_text() + "\n")
    with pytest.raises(pipeline.VerificationFailed) as err:
        pipeline.verify(cfg)
    assert err.value.summary["problems"] == ["partition.csv: sha256 mismatch"]


def test_verify_without_manifest(tmp_path):
    with pytest.raises(pipeline.MissingArtifact):
        pipeline.verify(output_dir=str(tmp_path))


def test_env_overrides_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDLAP_OUTPUT_DIR", str(tmp_path / "env"))
    out = pipeline.ingest(small_config(tmp_path))
    assert out["output_dir"] == str(tmp_path / "env")
    assert (tmp_path / "env" / "graph.npz").exists()
    assert not (tmp_path / "run").exists()


def test_stages_are_reused_when_keys_match(tmp_path):
    cfg = small_config(tmp_path)
    run_all(cfg, ("ingest", "partition"))
    before = (tmp_path / "run" / "graph.npz").stat().st_mtime_ns
    pipeline.partition_job(small_config(tmp_path, train={"epochs": 9}))
    assert (tmp_path / "run" / "graph.npz").stat().st_mtime_ns == before


def test_report_collects_summaries(tmp_path):
    cfg = small_config(tmp_path, scaling_study=True)
    out = run_all(cfg)
    assert out["report"]["summary"]["sections"] == ["attack_summary", "comm_scaling", "graph", "offline",
                                                    "partition", "train"]
    rep = json.loads((tmp_path / "run" / "report.json").read_text())
    for factor in ("r", "K", "n"):
        assert 1.8 <= rep["comm_scaling"]["doubling_ratios"][factor] <= 2.2
