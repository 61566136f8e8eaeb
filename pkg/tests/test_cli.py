import hashlib
import json
import os

import pytest

from neuropathx.cli import build_parser, main

SMALL = ["--set", "n_subjects=40", "--set", "n_snps=200", "--set", "n_genes=40",
         "--set", "n_pathways=8", "--set", "n_rois=6", "--set", "n_causal_pathways=2",
         "--set", "n_causal_rois=2"]


def _digest(directory, skip=()):
    h = hashlib.sha256()
    for name in sorted(set(os.listdir(directory)) - set(skip)):
        h.update(name.encode() + open(os.path.join(directory, name), "rb").read())
    return h.hexdigest()


def _inputs(d):
    return ["--genotypes", f"{d}/genotypes.tsv", "--gwas", f"{d}/gwas.tsv", "--genes", f"{d}/genes.tsv",
            "--gmt", f"{d}/pathways.gmt", "--exclude", f"{d}/exclusions.txt"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "synth"
    assert main(["synth", "--out", str(out), "--seed", "5", "--effect-strength", "1.5", *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def trained(synth_dir):
    base = synth_dir.parent
    assert main(["build-features", *_inputs(synth_dir), "--out", str(base / "feat")]) == 0
    assert main(["train", "--pathway-matrix", str(base / "feat" / "pathway_matrix.tsv"),
                 "--imaging", str(synth_dir / "imaging.csv"), "--labels", str(synth_dir / "labels.csv"),
                 "--epochs", "3", "--folds", "4", "--out", str(base / "run")]) == 0
    return base / "run"


class TestHelp:
    def test_every_subcommand_documents_its_flags(self, capsys):
        for cmd, flags in {
            "build-features": ["--genotypes", "--gmt", "--exclude", "--window-kb"],
            "train": ["--epochs", "--jobs", "--pathway-matrix"],
            "interpret": ["--attn-dir", "--k-path", "--k-roi", "--svg"],
            "synth": ["--spec", "--effect-strength"],
            "gradcheck": ["--inject-fault", "--tol"],
        }.items():
            with pytest.raises(SystemExit) as exc:
                build_parser().parse_args([cmd, "--help"])
            assert exc.value.code == 0
            text = capsys.readouterr().out
            for flag in flags + ["--config", "--set", "--seed"]:
                assert flag in text


class TestSynth:
    def test_twice_identical(self, tmp_path):
        digests = []
        for _ in range(2):
            assert main(["synth", "--out", str(tmp_path), "--seed", "8", *SMALL]) == 0
            digests.append(_digest(tmp_path))
        assert digests[0] == digests[1]

    def test_spec_file(self, tmp_path, write):
        spec = write("s.conf", "n_subjects = 40\nn_snps = 200\nn_genes = 40\nn_pathways = 8\nn_rois = 6\n")
        assert main(["synth", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 0
        assert "n_subjects = 40" in (tmp_path / "o" / "resolved_config.conf").read_text()

    def test_npx_seed_and_flag(self, tmp_path, monkeypatch):
        monkeypatch.setenv("NPX_SEED", "8")
        main(["synth", "--out", str(tmp_path / "env"), *SMALL])
        main(["synth", "--out", str(tmp_path / "flag"), "--seed", "8", *SMALL])
        main(["synth", "--out", str(tmp_path / "wins"), "--seed", "9", *SMALL])
        # the resolved config records the output directory, so only data files are compared
        env, flag, wins = (_digest(tmp_path / n, skip=["resolved_config.conf"]) for n in ("env", "flag", "wins"))
        assert env == flag != wins

    def test_infeasible_spec(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--set", "noise_sd=0"]) == 2


class TestBuildFeatures:
    def test_outputs(self, synth_dir):
        out = synth_dir.parent / "feat"
        main(["build-features", *_inputs(synth_dir), "--out", str(out)])
        rows = (out / "pathway_matrix.tsv").read_text().splitlines()
        assert len(rows) == 41 and len(rows[0].split("\t")) == 9
        assert set(json.loads((out / "drop_report.json").read_text())) == {"dropped_genes", "dropped_pathways"}
        assert (out / "resolved_config.conf").exists()

    def test_missing_file_names_path(self, synth_dir, tmp_path, capsys):
        args = _inputs(synth_dir)
        args[1] = str(tmp_path / "nope.tsv")
        assert main(["build-features", *args, "--out", str(tmp_path / "o")]) == 2
        assert "nope.tsv" in capsys.readouterr().err

    def test_everything_excluded(self, synth_dir, tmp_path, write, capsys):
        gmt = (synth_dir / "pathways.gmt").read_text().splitlines()
        excl = write("all.txt", "\n".join(line.split("\t")[0] for line in gmt) + "\n")
        args = _inputs(synth_dir)
        args[-1] = str(excl)
        assert main(["build-features", *args, "--out", str(tmp_path / "o")]) == 2
        assert "no pathways retained" in capsys.readouterr().err

    def test_unknown_config_key(self, synth_dir, tmp_path, write, capsys):
        conf = write("bad.conf", "window_kbs = 10\n")
        assert main(["build-features", "--config", str(conf), *_inputs(synth_dir), "--out", str(tmp_path)]) == 2
        assert "window_kbs" in capsys.readouterr().err

    def test_bad_set_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["build-features", "--set", "nonsense"])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts(self, trained):
        for name in ("metrics.json", "history.csv", "predictions.csv", "resolved_config.conf"):
            assert (trained / name).exists()
        assert len(os.listdir(trained / "checkpoints")) == 4
        assert len(os.listdir(trained / "attn")) == 4

    def test_zero_epochs(self, synth_dir, tmp_path):
        base = synth_dir.parent
        args = ["train", "--pathway-matrix", str(base / "feat" / "pathway_matrix.tsv"),
                "--imaging", str(synth_dir / "imaging.csv"), "--labels", str(synth_dir / "labels.csv"),
                "--epochs", "0", "--folds", "4"]
        assert main([*args, "--out", str(tmp_path / "a")]) == 0
        assert main([*args, "--out", str(tmp_path / "b")]) == 0
        metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
        assert len(metrics["folds"]) == 4
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
        assert (tmp_path / "a" / "history.csv").read_text().count("\n") == 1

    def test_from_raw_files(self, synth_dir, tmp_path):
        assert main(["train", *_inputs(synth_dir), "--imaging", str(synth_dir / "imaging.csv"),
                     "--labels", str(synth_dir / "labels.csv"), "--epochs", "1", "--folds", "2",
                     "--out", str(tmp_path)]) == 0

    def test_single_fold_rejected(self, synth_dir, tmp_path):
        base = synth_dir.parent
        assert main(["train", "--pathway-matrix", str(base / "feat" / "pathway_matrix.tsv"),
                     "--imaging", str(synth_dir / "imaging.csv"), "--labels", str(synth_dir / "labels.csv"),
                     "--folds", "1", "--out", str(tmp_path)]) == 2


class TestInterpret:
    def _args(self, trained, synth_dir, out):
        return ["interpret", "--attn-dir", str(trained / "attn"), "--labels", str(synth_dir / "labels.csv"),
                "--out", str(out)]

    def test_outputs_and_recovery(self, trained, synth_dir, tmp_path, capsys):
        args = self._args(trained, synth_dir, tmp_path) + ["--truth", str(synth_dir / "ground_truth.json"),
                                                           "--k-path", "3", "--k-roi", "2"]
        assert main(args) == 0
        assert sorted(os.listdir(tmp_path)) == ["associations.csv", "associations.json",
                                                "recovery.json", "resolved_config.conf"]
        assert "recovery: pathways" in capsys.readouterr().out

    def test_svg_adds_one_file(self, trained, synth_dir, tmp_path):
        main(self._args(trained, synth_dir, tmp_path / "a"))
        main(self._args(trained, synth_dir, tmp_path / "b") + ["--svg"])
        extra = set(os.listdir(tmp_path / "b")) - set(os.listdir(tmp_path / "a"))
        assert extra == {"associations.svg"}

    def test_k_path_too_large(self, trained, synth_dir, tmp_path):
        assert main(self._args(trained, synth_dir, tmp_path) + ["--k-path", "9"]) == 2


class TestGradcheck:
    SMALL_MODEL = ["--set", "n_pathways=3", "--set", "n_rois=2", "--set", "d=2"]

    def test_small_model_passes(self, capsys):
        code = main(["gradcheck", *self.SMALL_MODEL, "--tol", "1e-3"])
        out = capsys.readouterr().out
        assert code == 0 and out.rstrip().endswith("PASS")
        assert "attn.W_q" in out

    def test_injected_fault_fails(self, capsys):
        assert main(["gradcheck", *self.SMALL_MODEL, "--inject-fault"]) == 3
        assert capsys.readouterr().out.rstrip().endswith("FAIL")
