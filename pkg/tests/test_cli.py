import hashlib
import json
import os
import stat

import pytest

from mcsv import checkpoint as ckpt
from mcsv.cli import DEFAULTS, UsageError, main, resolve_config
from mcsv.train import read_metrics


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "corpus"
    assert main(["gen-data", "--out", str(root), "--speakers", "4", "--utterances", "2", "--utterance-len", "1.2",
                 "--seed", "3", "--config", str(_tiny_config(root.parent))]) == 0
    return root


def _tiny_config(where, **extra):
    cfg = {
        "model": {"hidden": 8, "rep_dim": 6, "proj_hidden": 8, "proj_dim": 5},
        "train": {"batch_size": 4, "crop_len": 0.3, "epochs": 2},
        "eval": {"num_frames": 2, "frame_len": 0.5},
    }
    for k, v in extra.items():
        cfg.setdefault(k, {}).update(v)
    path = where / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path


class TestConfig:
    def test_defaults(self):
        cfg = resolve_config(None, {}, env={})
        assert cfg["train"]["batch_size"] == 32 and cfg["train"]["epochs"] == 50
        assert cfg["model"]["hidden"] == 64 and cfg["loss"]["tau"] == 0.02

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epochs": 7, "batch_size": 8}}))
        cfg = resolve_config(str(path), {"train": {"epochs": 3}}, env={})
        assert cfg["train"]["epochs"] == 3
        assert cfg["train"]["batch_size"] == 8
        assert cfg["train"]["crop_len"] == DEFAULTS["train"]["crop_len"]

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"epoch": 7}}))
        with pytest.raises(UsageError, match="epoch"):
            resolve_config(str(path), {}, env={})

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"loss": {"variant": "triplet"}}))
        with pytest.raises(UsageError):
            resolve_config(str(path), {}, env={})

    def test_env_seed_overrides_everything(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"seed": 1}, "corpus": {"seed": 2}}))
        cfg = resolve_config(str(path), {"train": {"seed": 4}}, env={"MC_SEED": "9"})
        assert cfg["train"]["seed"] == cfg["corpus"]["seed"] == cfg["augment"]["seed"] == 9

    def test_bad_config_exit_code(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x")]) == 1


class TestGenData:
    def test_rows_and_trials(self, corpus):
        assert len((corpus / "manifest.csv").read_text().splitlines()) == 1 + 8
        trials = (corpus / "trials.txt").read_text().splitlines()
        assert {t.split()[0] for t in trials} == {"0", "1"}

    def test_rerun_same_hash(self, corpus, tmp_path):
        again = tmp_path / "again"
        main(["gen-data", "--out", str(again), "--speakers", "4", "--utterances", "2", "--utterance-len", "1.2",
              "--seed", "3", "--config", str(_tiny_config(tmp_path))])
        digest = lambda p: hashlib.sha256((p / "manifest.csv").read_bytes()).hexdigest()  # noqa: E731
        assert digest(again) == digest(corpus)

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable(self, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(stat.S_IRUSR | stat.S_IXUSR)
        try:
            assert main(["gen-data", "--out", str(locked / "c"), "--speakers", "2", "--utterances", "2"]) == 2
            assert not (locked / "c" / "manifest.csv").exists()
        finally:
            locked.chmod(stat.S_IRWXU)

    def test_blocked_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["gen-data", "--out", str(blocker / "c"), "--speakers", "2", "--utterances", "2"]) == 2
        assert not (tmp_path / "manifest.csv").exists()

    def test_usage_errors(self, tmp_path, capsys):
        assert main(["gen-data", "--speakers", "1", "--out", str(tmp_path / "c")]) == 1
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--speakers", "two"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1


class TestTrainEvaluate:
    def test_margin_ramp_in_metrics(self, corpus, tmp_path):
        cfg = _tiny_config(tmp_path, train={"epochs": 4})
        run = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out", str(run),
                     "--loss", "am", "--margin", "0.4"]) == 0
        rows = read_metrics(run / "metrics.csv")
        margins = [r["margin"] for r in rows]
        # 2 steps per epoch, 8 steps total: the ramp reaches 0.4 at step 4 (epoch 2)
        assert margins[0] == 0.0 and margins[2] == margins[3] == 0.4
        assert 0 < margins[1] < 0.4

    def test_run_metadata(self, corpus, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--config", str(_tiny_config(tmp_path)), "--corpus", str(corpus), "--out", str(run),
                     "--no-augment", "--no-projector"]) == 0
        meta = json.loads((run / "run.json").read_text())
        assert meta["augmentation_enabled"] is False and meta["projector"] is False
        snap = (run / "config.json").read_bytes()
        assert meta["config_hash"] == hashlib.sha1(b"blob %d\0" % len(snap) + snap).hexdigest()
        assert json.loads(snap)["augment"]["enabled"] is False
        tensors, _ = ckpt.load(run / "checkpoint.mckp")
        assert not any(k.startswith("param/proj.") for k in tensors)

    def test_resume_bit_exact(self, corpus, tmp_path):
        cfg = str(_tiny_config(tmp_path, train={"epochs": 4}))
        base = ["train", "--config", cfg, "--corpus", str(corpus), "--loss", "aam", "--margin", "0.1"]
        assert main(base + ["--out", str(tmp_path / "full")]) == 0
        assert main(base + ["--out", str(tmp_path / "part"), "--checkpoint-every", "1"]) == 0
        assert main(base + ["--out", str(tmp_path / "part"),
                            "--resume", str(tmp_path / "part" / "checkpoint_epoch0003.mckp")]) == 0
        a = (tmp_path / "full" / "checkpoint.mckp").read_bytes()
        assert a == (tmp_path / "part" / "checkpoint.mckp").read_bytes()

    def test_resume_with_other_config_fails(self, corpus, tmp_path):
        cfg = str(_tiny_config(tmp_path))
        assert main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(tmp_path / "a")]) == 0
        assert main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(tmp_path / "b"),
                     "--loss", "am", "--resume", str(tmp_path / "a" / "checkpoint.mckp")]) == 2

    def test_missing_corpus(self, tmp_path):
        assert main(["train", "--corpus", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2

    def test_evaluate_outputs(self, corpus, tmp_path, capsys):
        cfg = str(_tiny_config(tmp_path))
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(run)]) == 0
        out = tmp_path / "eval"
        assert main(["evaluate", "--config", cfg, "--checkpoint", str(run / "checkpoint.mckp"),
                     "--corpus", str(corpus), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "EER" in text and "minDCF" in text
        report = json.loads((out / "report.json").read_text())
        assert 0 <= report["eer"] <= 1
        assert (out / "scores.csv").read_text().startswith("enroll_id,test_id,label,score")
        assert (out / "histogram.csv").read_text().startswith("bin_left,pos_count,neg_count")
        assert main(["score-stats", "--scores", str(out / "scores.csv"), "--histogram", str(tmp_path / "h.csv")]) == 0
        assert f"gap      {report['gap']:.4f}" in capsys.readouterr().out

    def test_evaluate_empty_trials(self, corpus, tmp_path):
        cfg = str(_tiny_config(tmp_path))
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(run), "--epochs", "0"])
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        assert main(["evaluate", "--config", cfg, "--checkpoint", str(run / "checkpoint.mckp"),
                     "--corpus", str(corpus), "--trials", str(empty)]) == 2

    def test_evaluate_missing_audio(self, corpus, tmp_path, capsys):
        cfg = str(_tiny_config(tmp_path))
        run = tmp_path / "run"
        main(["train", "--config", cfg, "--corpus", str(corpus), "--out", str(run), "--epochs", "0"])
        trials = tmp_path / "t.txt"
        trials.write_text("1 utt00000 utt99999\n0 utt00000 utt00002\n")
        assert main(["evaluate", "--config", cfg, "--checkpoint", str(run / "checkpoint.mckp"),
                     "--corpus", str(corpus), "--trials", str(trials)]) == 2
        assert "utt99999" in capsys.readouterr().err


class TestLosscheck:
    def test_default_passes(self, capsys):
        assert main(["losscheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 6 and "FAIL" not in out

    def test_fault_injection_reported(self, capsys):
        assert main(["losscheck", "--batches", "2", "--inject-fault", "am-sign-flip"]) == 2
        out = capsys.readouterr().out
        assert [line.split()[0] for line in out.splitlines() if line.endswith("FAIL")] == ["am", "am"]

    def test_batch_of_one(self, capsys):
        assert main(["losscheck", "--batch-size", "1"]) == 1
        assert "N >= 2" in capsys.readouterr().err
