import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import synthetic_family
from oracles import ties_reference
from emrmerge import (
    Checkpoint,
    apply_bundle,
    emr_merge,
    fisher_merge,
    read_checkpoint,
    regmean_merge,
    task_arithmetic_merge,
    write_checkpoint,
)
from emrmerge.cli import main
from emrmerge.task_vector import TaskVectorSet, flatten_concat


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture
def emr_bundle(family_files, tmp_path):
    base_path, paths, base, models = family_files
    out = tmp_path / "x.emrb"
    assert run("merge", "--method", "emr", "--base", base_path, "--models", *paths, "--out", out) == 0
    return out


class TestMerge:
    def test_emr_then_apply_matches_library(self, family_files, emr_bundle, tmp_path):
        base_path, paths, base, models = family_files
        bundle = emr_merge(TaskVectorSet.from_checkpoints(base, models, ["m1", "m2", "m3"]))
        for path in paths:
            out = tmp_path / f"rec_{path.stem}.safetensors"
            assert run("apply", "--bundle", emr_bundle, "--base", base_path, "--task", path.stem, "--out", out) == 0
            assert read_checkpoint(out).equals(apply_bundle(base, bundle, path.stem), check_metadata=True)

    def test_dominant_task_reproduced_byte_exactly(self, tmp_path):
        base, (m1,) = synthetic_family(5, 1, {"w": (6, 5), "b": (6,)}, scale=0.1)
        # m2 moves half as far as m1 in the same direction, so m1's own vector is elected
        m2 = Checkpoint({n: (base[n] + (m1[n] - base[n]) * np.float32(0.5)).astype(np.float32) for n in base.names})
        for name, ck in (("b", base), ("m1", m1), ("m2", m2)):
            write_checkpoint(ck, tmp_path / f"{name}.safetensors")
        out = tmp_path / "x.emrb"
        assert run("merge", "--method", "emr", "--base", tmp_path / "b.safetensors",
                   "--models", tmp_path / "m1.safetensors", tmp_path / "m2.safetensors", "--out", out) == 0
        rec = tmp_path / "rec.safetensors"
        assert run("apply", "--bundle", out, "--base", tmp_path / "b.safetensors", "--task", "m1", "--out", rec) == 0
        rec_ck = read_checkpoint(rec)
        assert all(rec_ck[n].tobytes() == m1[n].tobytes() for n in m1.names)

    def test_single_model_bundle_reproduces_model(self, family_files, tmp_path, capsys):
        base_path, paths, base, models = family_files
        out = tmp_path / "one.emrb"
        assert run("merge", "--method", "emr", "--base", base_path, "--models", paths[0], "--out", out) == 0
        rec = tmp_path / "rec.safetensors"
        assert run("apply", "--bundle", out, "--base", base_path, "--task", "m1", "--out", rec) == 0
        assert read_checkpoint(rec).equals(models[0])
        assert run("inspect", "--bundle", out) == 0
        row = next(line for line in capsys.readouterr().out.splitlines() if line.startswith("m1 "))
        assert row.split()[-1] == "1"

    def test_task_arithmetic_parity(self, family_files, tmp_path):
        base_path, paths, base, models = family_files
        out = tmp_path / "ta.safetensors"
        assert run("merge", "--method", "task_arithmetic", "--lambda", "0.3", "--base", base_path,
                   "--models", *paths, "--out", out) == 0
        lib = task_arithmetic_merge(TaskVectorSet.from_checkpoints(base, models), base, 0.3)
        cli = read_checkpoint(out)
        assert cli.equals(lib)
        assert cli.metadata["emrmerge.lambda"] == "0.3"

    def test_ties_matches_oracle(self, tmp_path):
        base, models = synthetic_family(21, 3, {"w": (4, 5)}, scale=0.5)
        base = Checkpoint({"w": base["w"].astype(np.float64)})
        models = [Checkpoint({"w": m["w"].astype(np.float64)}) for m in models]
        write_checkpoint(base, tmp_path / "b.safetensors")
        paths = []
        for i, m in enumerate(models):
            paths.append(tmp_path / f"t{i}.safetensors")
            write_checkpoint(m, paths[-1])
        out = tmp_path / "ties.safetensors"
        assert run("merge", "--method", "ties", "--lambda", "0.9", "--keep", "0.2",
                   "--base", tmp_path / "b.safetensors", "--models", *paths, "--out", out) == 0
        taus = [[float(x) for x in (m["w"] - base["w"]).ravel()] for m in models]
        ref = base["w"].ravel() + 0.9 * np.array(ties_reference(taus, 0.2))
        assert np.array_equal(read_checkpoint(out)["w"].ravel(), ref)

    def test_config_file_and_report(self, family_files, tmp_path):
        base_path, paths, *_ = family_files
        cfg = tmp_path / "job.json"
        cfg.write_text(json.dumps({
            "method": "ties", "base": base_path.name, "models": [p.name for p in paths],
            "out": "merged.safetensors", "report": "r.csv", "report_format": "csv",
            "ties_keep_fraction": 0.5,
        }))
        assert run("merge", "--config", cfg, "--lambda", "0.5") == 0
        merged = read_checkpoint(tmp_path / "merged.safetensors")
        assert merged.metadata["emrmerge.lambda"] == "0.5"
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("task,") and len(lines) == 5

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "job.json"
        cfg.write_text(json.dumps({"method": "emr", "bogus": 1}))
        assert run("merge", "--config", cfg) == 2

    def test_dare_seed_recorded(self, family_files, tmp_path):
        base_path, paths, *_ = family_files
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.safetensors"
            assert run("merge", "--method", "task_arithmetic", "--dare-p", "0.5", "--seed", "7",
                       "--base", base_path, "--models", *paths, "--out", out) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        meta = read_checkpoint(tmp_path / "a.safetensors").metadata
        assert meta["emrmerge.seed"] == "7" and meta["emrmerge.dare_drop_prob"] == "0.5"

    def test_alignment_error_exit_3(self, family_files, tmp_path, capsys):
        base_path, paths, base, _ = family_files
        bad = tmp_path / "bad.safetensors"
        write_checkpoint(Checkpoint({n: a for n, a in base.items() if n != "head.weight"}), bad)
        assert run("merge", "--method", "average", "--base", base_path, "--models", paths[0], bad,
                   "--out", tmp_path / "o.safetensors") == 3
        assert "head.weight" in capsys.readouterr().err

    def test_missing_file_exit_4(self, family_files, tmp_path, capsys):
        base_path, *_ = family_files
        missing = tmp_path / "nope.safetensors"
        assert run("merge", "--method", "emr", "--base", base_path, "--models", missing,
                   "--out", tmp_path / "o.emrb") == 4
        assert "nope.safetensors" in capsys.readouterr().err

    def test_fisher_and_regmean_parity(self, family_files, tmp_path):
        base_path, paths, base, models = family_files
        rng = np.random.default_rng(3)
        fishers, grams = [], []
        for i, m in enumerate(models):
            f = Checkpoint({n: rng.random(a.shape).astype(np.float32) for n, a in m.items()})
            x = rng.standard_normal((8, 6))
            g = Checkpoint({"head.weight": x.T @ x})
            fishers.append(tmp_path / f"f{i}.st")
            grams.append(tmp_path / f"g{i}.st")
            write_checkpoint(f, fishers[-1])
            write_checkpoint(g, grams[-1])
        out = tmp_path / "fisher.st"
        assert run("merge", "--method", "fisher", "--base", base_path, "--models", *paths,
                   "--fishers", *fishers, "--out", out) == 0
        lib = fisher_merge(models, [read_checkpoint(p) for p in fishers], like=base)
        assert read_checkpoint(out).equals(lib)
        out = tmp_path / "regmean.st"
        assert run("merge", "--method", "regmean", "--regmean-a", "0.9", "--base", base_path,
                   "--models", *paths, "--grams", *grams, "--out", out) == 0
        lib = regmean_merge(models, [dict(read_checkpoint(p).tensors) for p in grams], 0.9, like=base)
        assert read_checkpoint(out).equals(lib)

    def test_fisher_requires_fishers(self, family_files, tmp_path):
        base_path, paths, *_ = family_files
        assert run("merge", "--method", "fisher", "--base", base_path, "--models", *paths,
                   "--out", tmp_path / "o.safetensors") == 2


class TestApply:
    def test_wrong_base_exit_5(self, family_files, emr_bundle, tmp_path, capsys):
        _, paths, *_ = family_files
        assert run("apply", "--bundle", emr_bundle, "--base", paths[0], "--task", "m1",
                   "--out", tmp_path / "o.safetensors") == 5
        assert "sha256:" in capsys.readouterr().err

    def test_override_fingerprint_warns(self, family_files, emr_bundle, tmp_path, capsys):
        _, paths, *_ = family_files
        assert run("apply", "--bundle", emr_bundle, "--base", paths[0], "--task", "m1",
                   "--out", tmp_path / "o.safetensors", "--no-fingerprint-check") == 0
        assert "warning" in capsys.readouterr().err

    def test_unknown_task_exit_2(self, family_files, emr_bundle, tmp_path, capsys):
        base_path, *_ = family_files
        assert run("apply", "--bundle", emr_bundle, "--base", base_path, "--task", "m9",
                   "--out", tmp_path / "o.safetensors") == 2
        err = capsys.readouterr().err
        assert "m1" in err and "m3" in err


class TestAnalyze:
    def test_self_analysis(self, family_files, tmp_path):
        base_path, paths, *_ = family_files
        report = tmp_path / "r.json"
        assert run("analyze", "--base", base_path, "--models", *paths, "--merged", paths[1],
                   "--report", report) == 0
        row = json.loads(report.read_text())["tasks"][1]
        assert row["sign_conflict_ratio"] == 0.0
        assert row["cosine_similarity"] == pytest.approx(1.0, abs=1e-12)

    def test_bundle_analysis_to_stdout(self, family_files, emr_bundle, capsys):
        base_path, paths, *_ = family_files
        assert run("analyze", "--base", base_path, "--models", *paths, "--bundle", emr_bundle) == 0
        data = json.loads(capsys.readouterr().out)
        assert [t["task"] for t in data["tasks"]] == ["m1", "m2", "m3"]
        assert all(t["sign_conflict_ratio"] == 0.0 for t in data["tasks"])
        assert data["distances"]["dis_mask"] <= data["distances"]["dis"]

    def test_hand_fixture(self, tmp_path):
        write_checkpoint(Checkpoint({"w": np.zeros(2)}), tmp_path / "b.st")
        write_checkpoint(Checkpoint({"w": np.array([1.0, -2.0])}), tmp_path / "a.st")
        write_checkpoint(Checkpoint({"w": np.array([3.0, 1.0])}), tmp_path / "c.st")
        write_checkpoint(Checkpoint({"w": np.array([2.0, -0.5])}), tmp_path / "m.st")
        out = tmp_path / "r.json"
        assert run("analyze", "--base", tmp_path / "b.st", "--models", tmp_path / "a.st", tmp_path / "c.st",
                   "--merged", tmp_path / "m.st", "--report", out) == 0
        rows = json.loads(out.read_text())["tasks"]
        assert rows[0]["l2_distance"] == pytest.approx(np.hypot(1.0, 1.5))
        assert rows[1]["sign_conflict_ratio"] == 0.5

    def test_alignment_exit_3(self, family_files, tmp_path):
        base_path, paths, *_ = family_files
        bad = tmp_path / "bad.st"
        write_checkpoint(Checkpoint({"w": np.zeros(3)}), bad)
        assert run("analyze", "--base", base_path, "--models", bad, "--merged", paths[0]) == 3


class TestInspect:
    def test_ratio_at_scale(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        d = 100_000
        base = Checkpoint({"w": rng.standard_normal(d).astype(np.float32)})
        write_checkpoint(base, tmp_path / "b.st")
        paths = []
        for i in range(8):
            p = tmp_path / f"t{i}.st"
            write_checkpoint(Checkpoint({"w": base["w"] + rng.standard_normal(d).astype(np.float32)}), p)
            paths.append(p)
        out = tmp_path / "x.emrb"
        assert run("merge", "--method", "emr", "--base", tmp_path / "b.st", "--models", *paths, "--out", out) == 0
        capsys.readouterr()
        assert run("inspect", "--bundle", out, "--json") == 0
        storage = json.loads(capsys.readouterr().out)["storage"]
        assert storage["modulator_ratio"] >= 31
        assert run("inspect", "--bundle", out) == 0
        text = capsys.readouterr().out
        ratio = float(text.split("compression ratio: ")[1].split("x")[0])
        assert ratio >= 31

    def test_corrupt_magic_exit_4(self, emr_bundle):
        data = bytearray(emr_bundle.read_bytes())
        data[:4] = b"NOPE"
        emr_bundle.write_bytes(bytes(data))
        assert run("inspect", "--bundle", emr_bundle) == 4

    def test_missing_bundle_exit_4(self, tmp_path):
        assert run("inspect", "--bundle", tmp_path / "none.emrb") == 4


def test_module_entry_point(family_files, emr_bundle):
    proc = subprocess.run(
        [sys.executable, "-m", "emrmerge", "inspect", "--bundle", str(emr_bundle)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0, proc.stderr
    assert "compression ratio" in proc.stdout


def test_flatten_consistency_of_fixture(family_files):
    _, _, base, models = family_files
    tasks = TaskVectorSet.from_checkpoints(base, models)
    assert flatten_concat(tasks[0]).size == 6 * 5 + 6 + 3 * 6
