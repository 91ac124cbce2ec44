import pytest

from ftfl_lab import cli
from ftfl_lab.config import parse_config
from ftfl_lab.evaluation import METRIC_COLUMNS
from ftfl_lab.replay import ReplayBuffer
from ftfl_lab.sac import NonFiniteError

TINY = """\
[dyna]
total_env_steps = 400
rollouts_per_step = 10
[sac]
hidden_dims = 8, 8
batch_size = 16
updates_per_step = 1
warmup_steps = 250
[ensemble]
hidden_dims = 8, 8
batch_size = 16
n_members = 3
n_elites = 2
max_epochs = 1
epoch_batches = 2
[env]
horizon = 40
[eval]
eval_interval = 100
eval_episodes = 1
final_window = 2
probe_batch = 16
"""


@pytest.fixture
def conf(tmp_path, monkeypatch):
    monkeypatch.setenv("FTFL_THREADS", "1")
    path = tmp_path / "tiny.ini"
    path.write_text(TINY)
    return path


def test_run_writes_one_csv_per_seed(conf, tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(conf), "--seeds", "0,1", "--out", str(out)]) == 0
    csvs = sorted(p.name for p in out.glob("*.csv"))
    assert csvs == ["mbpo_scale_mismatch_s0.csv", "mbpo_scale_mismatch_s1.csv"]
    for name in csvs:
        assert (out / name).read_text().splitlines()[0] == ",".join(METRIC_COLUMNS)
    # config echo reproduces the run
    snap = parse_config(out / "mbpo_scale_mismatch_s1.ini", seed=1)
    assert snap == parse_config(conf, seed=1)


def test_rerun_is_byte_identical(conf, tmp_path, monkeypatch):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", str(conf), "--seeds", "3", "--out", str(a), "--set", "dyna.algo=ftfl"])
    monkeypatch.setenv("FTFL_THREADS", "2")  # worker processes must not change results
    cli.main(["run", "--config", str(conf), "--seeds", "3", "--out", str(b), "--set", "dyna.algo=ftfl"])
    name = "ftfl_scale_mismatch_s3.csv"
    assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize("argv", [
    ["--seeds", "0,0"],
    ["--seeds", "x"],
    ["--seeds", ""],
    ["--set", "dyna.algo=magic"],
    ["--set", "ensemble.target_mode=sideways"],
])
def test_config_errors_exit_one(conf, tmp_path, argv, capsys):
    assert cli.main(["run", "--config", str(conf), "--out", str(tmp_path / "o")] + argv) == 1
    assert "config error" in capsys.readouterr().err


def test_bad_thread_cap_is_a_config_error(conf, tmp_path, monkeypatch):
    monkeypatch.setenv("FTFL_THREADS", "lots")
    assert cli.main(["run", "--config", str(conf), "--seeds", "0", "--out", str(tmp_path / "o")]) == 1


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("FTFL_THREADS", "3")
    assert cli.n_workers(10) == 3 and cli.n_workers(2) == 2
    monkeypatch.delenv("FTFL_THREADS")
    assert cli.n_workers(5) >= 1


def test_io_errors_exit_three(conf, tmp_path):
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 3
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a dump\n")
    assert cli.main(["probe", "--config", str(conf), "--buffer", str(bad), "--seeds", "0",
                     "--set", "dyna.algo=ftfl", "--out", str(tmp_path / "p")]) == 3


def test_non_finite_exits_two(conf, tmp_path, monkeypatch):
    def explode(cfg, csv_path=None):
        raise NonFiniteError("critic loss is nan")
    monkeypatch.setattr(cli, "train_agent", explode)
    assert cli.main(["run", "--config", str(conf), "--seeds", "0", "--out", str(tmp_path / "o")]) == 2


def test_ablate_grid_and_summary(conf, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(conf), "--seeds", "0,1", "--out", str(out)]) == 0
    csvs = sorted(p.stem for p in out.glob("*_s[0-9].csv"))
    assert len(csvs) == 8
    assert {c.split("_")[0] for c in csvs} == {"res", "res+norm", "dir", "dir+norm"}
    summary = (out / "ablation_summary.csv").read_text().splitlines()
    assert summary[0] == "algo,env,iqm,ci_low,ci_high,pct_of_sac" and len(summary) == 5


def test_contact_suite(conf, tmp_path):
    out = tmp_path / "contact"
    argv = ["ablate", "--suite", "contact", "--config", str(conf), "--seeds", "0", "--out", str(out),
            "--set", "env.name=contact_hopper_lite"]
    assert cli.main(argv) == 0
    names = sorted(p.stem for p in out.glob("*_s0.csv"))
    assert names == ["ftfl_contact_hopper_lite-nocontact_s0", "ftfl_contact_hopper_lite_s0",
                     "sac_contact_hopper_lite-nocontact_s0", "sac_contact_hopper_lite_s0"]
    lines = (out / "contact_summary.csv").read_text().splitlines()
    assert lines[0] == "variant,ftfl_iqm,sac_iqm,gap" and len(lines) == 3
    assert cli.main(["ablate", "--suite", "contact", "--config", str(conf), "--seeds", "0",
                     "--out", str(out)]) == 1


def test_dump_buffer_probe_aggregate_loop(conf, tmp_path):
    out = tmp_path / "loop"
    dump = out / "buf.bin"
    assert cli.main(["dump-buffer", "--config", str(conf), "--seeds", "0,1,2", "--out", str(out),
                     "--buffer", str(dump)]) == 0
    header = dump.read_bytes().split(b"\n", 1)[0].decode()
    assert header == "FTFL-BUF v1 d_s=2 d_a=2 n=400"
    loaded = ReplayBuffer.load(dump)
    assert len(loaded) == 400
    again = out / "again.bin"
    loaded.dump(again)
    assert again.read_bytes() == dump.read_bytes()

    before = dump.read_bytes()
    assert cli.main(["probe", "--config", str(conf), "--buffer", str(dump), "--seeds", "0",
                     "--set", "dyna.algo=ablation", "--set", "dyna.reveal_step=50", "--out", str(out)]) == 0
    assert dump.read_bytes() == before  # read-only
    probe = (out / "probe_res_buf_s0.csv").read_text().splitlines()
    assert probe[0].startswith("reveal_k,reward_bias,variance_diag,holdout_mse") and len(probe) == 1 + 400 // 50

    # every metrics CSV written above feeds straight back into aggregate
    assert cli.main(["aggregate", "--config", str(conf), "--runs", str(out), "--out", str(out)]) == 0
    agg = (out / "aggregate.csv").read_text().splitlines()
    assert agg[0] == "algo,env,iqm,ci_low,ci_high,pct_of_sac"
    assert agg[1].startswith("sac,scale_mismatch,") and agg[1].endswith(",100.0")


def test_dump_buffer_keeps_best_seed(conf, tmp_path, capsys):
    out = tmp_path / "best"
    assert cli.main(["dump-buffer", "--config", str(conf), "--seeds", "0,1,2", "--out", str(out)]) == 0
    from ftfl_lab.evaluation import final_performance, read_metrics_csv
    scores = {p.stem: final_performance(read_metrics_csv(p), 2) for p in out.glob("sac_*.csv")}
    best = max(scores, key=scores.get)
    assert best in capsys.readouterr().out
    assert (out / "buffer_scale_mismatch.bin").exists()


def test_aggregate_without_runs(conf, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["aggregate", "--config", str(conf), "--runs", str(empty)]) == 1
    assert cli.main(["aggregate", "--config", str(conf), "--runs", str(tmp_path / "nope")]) == 3


def test_probe_needs_buffer_and_model(conf, tmp_path):
    assert cli.main(["probe", "--config", str(conf), "--out", str(tmp_path)]) == 1
    assert cli.main(["probe", "--config", str(conf), "--buffer", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path)]) == 3
