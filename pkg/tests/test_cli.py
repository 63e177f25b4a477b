import os

import pytest

from caatsim.cli import main


def read(path):
    with open(path, encoding="utf-8") as f:
        return f.read()


def train_args(out, **extra):
    base = {
        "--layers": "1", "--hidden": "16", "--heads": "2", "--vocab": "64",
        "--seq-len": "8", "--batch": "2", "--steps": "3", "--tp": "2",
        "--p": "0.5", "--seed": "5", "--synthetic-len": "4000",
        "--eval-every": "0", "--out": out,
    }
    base.update(extra)
    argv = ["train", "--synthetic"]
    for k, v in base.items():
        if v is None:
            continue
        argv += [k, v]
    return argv


class TestTrain:
    def test_writes_metrics_ledger_and_checkpoint(self, tmp_path, capsys):
        out = str(tmp_path / "run")
        assert main(train_args(out)) == 0
        metrics = read(os.path.join(out, "metrics.csv"))
        header = metrics.splitlines()[0]
        assert header == "step,train_loss,val_loss,comm_fwd_elems,comm_bwd_elems,norm_sync_elems"
        assert len(metrics.splitlines()) == 1 + 1 + 3  # header, init row, 3 steps
        assert os.path.exists(os.path.join(out, "ledger.csv"))
        assert os.path.exists(os.path.join(out, "config.txt"))
        assert os.path.exists(os.path.join(out, "checkpoint", "manifest.txt"))
        assert "final val_loss=" in capsys.readouterr().out

    def test_invalid_p_rejected_before_compute(self, tmp_path):
        out = str(tmp_path / "never")
        assert main(train_args(out, **{"--p": "1.5"})) == 2
        assert not os.path.exists(out)

    def test_zero_steps_writes_init_row_only(self, tmp_path):
        out = str(tmp_path / "zero")
        assert main(train_args(out, **{"--steps": "0"})) == 0
        lines = read(os.path.join(out, "metrics.csv")).splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("0,,")

    def test_rerun_metrics_byte_identical(self, tmp_path):
        out = str(tmp_path / "rerun")
        assert main(train_args(out)) == 0
        first = read(os.path.join(out, "metrics.csv"))
        assert main(train_args(out)) == 0
        assert read(os.path.join(out, "metrics.csv")) == first

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "toy.cfg"
        cfg.write_text("p=1.0\ntp=2\nlayers=1\nhidden=16\nheads=2\nvocab=64\n"
                       "seq-len=8\nbatch=2\nsteps=2\nsynthetic=true\n"
                       "synthetic-len=4000\neval-every=0\nseed=1\n")
        out = str(tmp_path / "cfgrun")
        assert main(["train", "--config", str(cfg), "--p", "0.25", "--out", out]) == 0
        assert "p=0.25" in read(os.path.join(out, "config.txt"))

    def test_env_seed_fallback(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CAAT_SEED", "99")
        out = str(tmp_path / "envseed")
        args = train_args(out)
        seed_at = args.index("--seed")
        del args[seed_at : seed_at + 2]
        assert main(args) == 0
        assert "seed=99" in read(os.path.join(out, "config.txt"))

    def test_missing_data_choice_rejected(self, tmp_path):
        argv = train_args(str(tmp_path / "x"))
        argv.remove("--synthetic")
        assert main(argv) == 2

    def test_divergence_exits_1(self, tmp_path):
        import warnings

        out = str(tmp_path / "blowup")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert main(train_args(out, **{"--lr": "1e14", "--steps": "30"})) == 1


class TestInfer:
    @pytest.fixture()
    def run_dir(self, tmp_path):
        out = str(tmp_path / "train")
        assert main(train_args(out, **{"--vocab": "256"})) == 0
        return out

    def test_check_logical_reports_zero_diff(self, run_dir, capsys):
        assert main(["infer", "--ckpt", os.path.join(run_dir, "checkpoint"),
                     "--check-logical"]) == 0
        out = capsys.readouterr().out
        assert "max_diff=0\n" in out
        assert "logical_comm_elems=0" in out

    def test_generation_deterministic(self, run_dir, capsys):
        argv = ["infer", "--ckpt", os.path.join(run_dir, "checkpoint"),
                "--prompt-bytes", "ab", "--max-new", "5"]
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first
        assert len(first.split()) == 5

    def test_missing_checkpoint_exit_2(self, tmp_path):
        assert main(["infer", "--ckpt", str(tmp_path / "nope")]) == 2


class TestPerfmodel:
    def test_full_sync_zero_speedup(self, capsys):
        assert main(["perfmodel", "--h", "768", "--s", "1024", "--r", "8",
                     "--C", "1000", "--p", "1"]) == 0
        assert "speedup=0.0" in capsys.readouterr().out

    def test_missing_required_flag_exit_2(self):
        assert main(["perfmodel", "--h", "768", "--s", "1024", "--p", "1"]) == 2

    def test_sweep_csv_file(self, tmp_path, capsys):
        target = str(tmp_path / "sweep.csv")
        assert main(["perfmodel", "--h", "768", "--s", "1024", "--r", "8",
                     "--C", "1000", "--sweep", "--csv", target]) == 0
        lines = read(target).splitlines()
        assert lines[0] == "p,G,P,T,speedup"
        assert lines[-1].startswith("# p_star=")


class TestCommstats:
    def test_measured_reduction_matches_p(self, tmp_path, capsys):
        out = str(tmp_path / "half")
        assert main(train_args(out)) == 0
        assert main(["commstats", "--run", out]) == 0
        text = capsys.readouterr().out
        assert "measured_reduction=0.5" in text
        assert "analytic_caat_reduction=0.5" in text

    def test_full_sync_no_reduction(self, tmp_path, capsys):
        out = str(tmp_path / "full")
        assert main(train_args(out, **{"--p": "1.0"})) == 0
        assert main(["commstats", "--run", out]) == 0
        assert "measured_reduction=0.0" in capsys.readouterr().out

    def test_analytic_only(self, capsys):
        assert main(["commstats", "--p", "0.5"]) == 0
        text = capsys.readouterr().out
        assert "analytic_caat_reduction=0.5" in text
        assert "analytic_mask_reduction=0.125" in text

    def test_requires_run_or_p(self):
        assert main(["commstats"]) == 2
