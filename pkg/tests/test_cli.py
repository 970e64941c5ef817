import csv
import json

import numpy as np
import pytest

from mfpg import cli
from mfpg.stats import bootstrap_diff_ci
from mfpg.trainer import TrainingAborted

SLIP = """
[experiment]
name = "smoke"
seeds = [0, 1]

[env]
family = "slip_chain"
[env.high]
slip = 0.1
[env.low]
slip = 0.2
[env.options]
n_states = 3

[trainer]
mode = "hf-only"
budget = 300
hidden = [8]

[eval]
interval = 100
episodes = 3
"""

POINT = """
[experiment]
seeds = [0, 1]

[env]
family = "point_mass"
[env.high]
friction = 1.2

[trainer]
mode = "hf-only"
budget = 400
hidden = [8, 8]
low_multiplier = 3
checkpoint_steps = [0, 200, 400]

[eval]
interval = 200
episodes = 2
"""


def write(tmp_path, text, name="c.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_run_smoke(tmp_path):
    cfg = write(tmp_path, SLIP)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "curves").iterdir()) == ["seed_0.csv", "seed_1.csv"]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and "final_return_ci" in summary
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["schema_version"] == cli.SCHEMA_VERSION
    assert set(manifest["files"]["curves"]) == {"0", "1"}
    with open(out / "curves" / "seed_0.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["seed", "hf_step", "mean_return", "episode_1", "episode_2", "episode_3"]
    # evaluations fire at the first update that crosses each 100-step mark
    steps = [int(r[1]) for r in rows[1:]]
    assert steps[0] == 0 and steps == sorted(steps) and len(steps) >= 3
    head = (out / "diagnostics" / "seed_0.csv").read_text().splitlines()[0]
    assert head.split(",")[:5] == ["seed", "iter", "hf_steps", "rho_batch", "rho_ema"]


def test_rerun_is_byte_identical(tmp_path):
    cfg = write(tmp_path, SLIP)
    for d in ("a", "b"):
        assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / d)]) == 0
    for sub in ("curves", "diagnostics"):
        for f in (tmp_path / "a" / sub).iterdir():
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_csv_uses_lf_and_dot_decimals(tmp_path):
    cfg = write(tmp_path, SLIP)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seeds", "4"])
    raw = (tmp_path / "r" / "curves" / "seed_4.csv").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    float(raw.splitlines()[1].split(b",")[2])


def test_refuses_non_empty_output_without_force(tmp_path, capsys):
    cfg = write(tmp_path, SLIP)
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--force", "--seeds", "0"]) == 0


def test_bad_config_reports_field_path(tmp_path, capsys):
    cfg = write(tmp_path, SLIP.replace("budget = 300", "budget = \"lots\""))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "trainer.budget" in capsys.readouterr().err


def test_missing_output_dir_is_a_usage_error(tmp_path):
    assert cli.main(["run", "--config", str(write(tmp_path, SLIP))]) == cli.EXIT_CONFIG


def test_abort_exit_code(tmp_path, monkeypatch):
    def boom(config, pair, seed):
        raise TrainingAborted("non-finite loss at iteration 0", [])
    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(write(tmp_path, SLIP)), "--out", str(out)]) == cli.EXIT_ABORT
    manifest = json.loads((out / "manifest.json").read_text())
    assert [a["seed"] for a in manifest["aborted"]] == [0, 1]


def test_paired_run_delta_matches_stats_module(tmp_path):
    hf = tmp_path / "hf"
    cli.main(["run", "--config", str(write(tmp_path, SLIP)), "--out", str(hf), "--seeds", "0-3"])
    mf_text = SLIP.replace('mode = "hf-only"', 'mode = "mfpg"').replace(
        'name = "smoke"', f'name = "paired"\nbaseline = "{hf}"')
    mf = tmp_path / "mf"
    assert cli.main(["run", "--config", str(write(tmp_path, mf_text, "m.toml")), "--out", str(mf),
                     "--seeds", "0-3"]) == 0
    s_mf = json.loads((mf / "summary.json").read_text())
    s_hf = json.loads((hf / "summary.json").read_text())
    expect = bootstrap_diff_ci(list(s_mf["final_return"].values()), list(s_hf["final_return"].values()),
                               10_000, 0.95, 0)
    assert s_mf["delta_final_return_ci"] == expect.as_dict()
    assert isinstance(s_mf["collapsed"], bool)


def test_sweep_eta_grid(tmp_path):
    cfg = write(tmp_path, SLIP.replace('mode = "hf-only"', 'mode = "mfpg"'))
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", "trainer.eta_ma",
                     "--values", "0.92,0.95,0.99", "--seeds", "0,1"]) == 0
    runs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert runs == ["trainer.eta_ma=0.92", "trainer.eta_ma=0.95", "trainer.eta_ma=0.99"]
    for r in runs:
        assert (out / r / "manifest.json").is_file()
    hashes = {json.loads((out / r / "manifest.json").read_text())["config_hash"] for r in runs}
    assert len(hashes) == 3
    assert len(cli.read_csv(out / "sweep.csv")) == 3


def test_sweep_batch_axis_returns_one_manifest_per_value(tmp_path):
    doc = cli.tomllib.loads(SLIP)
    manifests = cli.run_sweep(doc, "trainer.batch_transitions", [100, 200, 500, 2000], tmp_path / "s",
                              seeds=(0,))
    assert len(manifests) == 4


def test_sweep_errors(tmp_path, capsys):
    cfg = write(tmp_path, SLIP)
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "a"), "--axis", "trainer.colour",
                     "--values", "1"]) == cli.EXIT_CONFIG
    assert "valid axes" in capsys.readouterr().err
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "b"), "--axis", "trainer.eta_ma",
                     "--values", ","]) == cli.EXIT_CONFIG


@pytest.fixture(scope="module")
def checkpoint_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("ckpt")
    cfg = root / "p.toml"
    cfg.write_text(POINT)
    assert cli.main(["run", "--config", str(cfg), "--out", str(root / "run")]) == 0
    return cfg, root / "run" / "checkpoints"


def test_variance_report_shape_and_ratio(checkpoint_run, tmp_path):
    cfg, ckpts = checkpoint_run
    assert len(list(ckpts.iterdir())) == 6
    out = tmp_path / "var"
    assert cli.main(["variance-report", "--config", str(cfg), "--checkpoints", str(ckpts), "--out", str(out),
                     "--repeats", "10"]) == 0
    rows = cli.read_csv(out / "variance.csv")
    # 2 seeds x 3 checkpoints x (hf-only, mfpg) x (baseline on, off)
    assert len(rows) == 24
    for r in rows:
        if r["kind"] == "mfpg":
            ref = next(x for x in rows if x["kind"] == "hf-only" and x["seed"] == r["seed"]
                       and x["step"] == r["step"] and x["baseline"] == r["baseline"]
                       and x["batch_transitions"] == r["batch_transitions"])
            assert float(r["ratio"]) == pytest.approx(float(r["variance"]) / float(ref["variance"]), rel=1e-12)
        else:
            assert r["ratio"] == ""
    assert len(cli.read_csv(out / "variance_median.csv")) == 12


def test_variance_report_single_deterministic_checkpoint(tmp_path):
    text = SLIP.replace("slip = 0.1", "slip = 0.0").replace("slip = 0.2", "slip = 0.0").replace(
        "hidden = [8]", "hidden = [8]\ncheckpoint_steps = [0]")
    cfg = write(tmp_path, text)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seeds", "0"])
    ckpt = tmp_path / "r" / "checkpoints" / "seed_0_step_0.npz"
    # push the saved policy to always step right, so every rollout is identical
    with np.load(ckpt) as data:
        arrays = {k: data[k] for k in data.files}
    for k in list(arrays):
        if k.startswith("policy/W"):
            arrays[k] = np.zeros_like(arrays[k])
    last_bias = max(k for k in arrays if k.startswith("policy/b"))
    arrays[last_bias] = np.array([-1000.0, 0.0])
    np.savez(ckpt, **arrays)
    out = tmp_path / "v"
    assert cli.main(["variance-report", "--config", str(cfg), "--checkpoints", str(ckpt.parent),
                     "--out", str(out), "--repeats", "5"]) == 0
    rows = cli.read_csv(out / "variance.csv")
    assert rows and all(float(r["variance"]) == 0.0 for r in rows)


def test_variance_report_without_checkpoints(tmp_path, capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    assert cli.main(["variance-report", "--config", str(write(tmp_path, SLIP)), "--checkpoints", str(empty),
                     "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "no checkpoints" in capsys.readouterr().err


def test_summarize_prints_table(tmp_path, capsys):
    cfg = write(tmp_path, SLIP)
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a")])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seeds", "2,3"])
    capsys.readouterr()
    assert cli.main(["summarize", str(tmp_path / "b"), "--baseline", str(tmp_path / "a")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split(",") == list(cli.SUMMARY_COLUMNS + cli.DELTA_COLUMNS)
    assert lines[-1].startswith("collapse_count,")
    assert cli.main(["summarize", str(tmp_path / "missing")]) == cli.EXIT_CONFIG
