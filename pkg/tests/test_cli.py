import csv
import io
from dataclasses import replace
from pathlib import Path

import pytest

from exfm import pipeline
from exfm.cli import Check, build_parser, main, parse_grid, staleness_checks, sweep_checks
from exfm.distill import DistillMode
from exfm.errors import ConfigError

SMALL = """
# tiny desk run
[stream]
examples_per_day = 150
n_days = 5
n_traffics = 2
feature_dim = 6

[models]
fm_hidden = 24, 24
vm_backbone = 8
vm_head_hidden = 4

[protocol]
fm_days = 2

[seeds]
seeds = 0, 1
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(SMALL)
    return path


def read(path: Path) -> bytes:
    return path.read_bytes()


# Config parsing


def test_parse_sections_and_dotted_keys():
    cfg = pipeline.parse_config(SMALL + "\ndistill.grad_scale = 3\n[das]\nenabled = false\n")
    assert cfg.stream.examples_per_day == 150
    assert cfg.models.fm_hidden == (24, 24)
    assert cfg.seeds == (0, 1)
    assert cfg.das.enabled is False
    # a dotted key after [seeds] keeps its own prefix
    assert cfg.distill.grad_scale == 3.0


def test_parse_modes():
    cfg = pipeline.parse_config("[distill]\nmodes = NoDistill, AH\n")
    assert cfg.distill.modes == (DistillMode.NO_DISTILL, DistillMode.AH)


@pytest.mark.parametrize(
    "text",
    [
        "[stream]\nbogus = 1\n",
        "[nowhere]\nx = 1\n",
        "stream.seed = 4\n",
        "just words\n",
        "[stream]\nrho = abc\n",
        "[stream]\nrho = 1.5\n",
        "[protocol]\nfm_days = 9\n",
        "[seeds]\nseeds = \n",
    ],
)
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        pipeline.parse_config(text)


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[models]\nwidth = 3\n")
    assert main(["--config", str(bad), "run"]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["--config", str(tmp_path / "nope.cfg"), "run"]) == 2


def test_invalid_theorem_name_exits_2():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["theorem", "xyz"])
    assert exc.value.code == 2


def test_parse_grid():
    assert parse_grid("0,1.5,2; 1,1,1") == [(0.0, 1.5, 2.0), (1.0, 1.0, 1.0)]
    for bad in ("", "1,2", "a,b,c"):
        with pytest.raises(ConfigError):
            parse_grid(bad)


def test_staleness_needs_history():
    cfg = pipeline.parse_config(SMALL)
    with pytest.raises(ConfigError):
        pipeline.cmd_staleness(cfg, max_delay=2)
    with pytest.raises(ConfigError):
        pipeline.cmd_staleness(cfg, max_delay=0)


# Pipeline behaviour


def test_freshness_gap(small_cfg):
    cfg = pipeline.load_config(small_cfg)
    data = pipeline.prepare_seed(cfg, 0)
    for delay in (0, 1):
        records, trace = pipeline.run_das(cfg, data, delay)
        assert records
        for eid, rec in records.items():
            day = data.day_of[eid]
            # version v was trained on days < v
            assert rec.fm_version <= day - delay
        assert all(r.supervision is None for r in data.rows)


def test_no_distill_matches_das_disabled(small_cfg):
    cfg = pipeline.load_config(small_cfg)
    cfg = replace(cfg, distill=replace(cfg.distill, modes=(DistillMode.NO_DISTILL,)))
    off = replace(cfg, das=replace(cfg.das, enabled=False))
    a = pipeline.run_seed(cfg, 0)
    b = pipeline.run_seed(off, 0)
    assert not a.supervision and not b.supervision
    assert a.das_trace and not b.das_trace
    for key in a.results:
        ta = [r.as_list() for r in a.results[key].trace]
        tb = [r.as_list() for r in b.results[key].trace]
        assert ta == tb


def test_run_is_byte_identical(small_cfg, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["--config", str(small_cfg), "--out", str(out), "run"]) == 0
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    assert "metrics.csv" in names
    for name in names:
        assert read(outs[0] / name) == read(outs[1] / name), name


def test_run_artifacts_shape(small_cfg, tmp_path):
    out = tmp_path / "run"
    assert main(["--config", str(small_cfg), "--seed", "3", "--out", str(out), "run"]) == 0
    names = {p.name for p in out.iterdir()}
    # one supervision log, one VM trace per traffic
    assert names == {
        "metrics.csv",
        "supervision_seed3.jsonl",
        "das_trace_seed3.csv",
        "vm_trace_seed3_traffic0.csv",
        "vm_trace_seed3_traffic1.csv",
    }
    rows = list(csv.reader(io.StringIO((out / "metrics.csv").read_text())))
    assert rows[0] == pipeline.METRIC_HEADER
    assert len(rows) == 1 + 2 * len(DistillMode)
    assert (out / "vm_trace_seed3_traffic0.csv").read_text().startswith("step,examples_seen")


def test_staleness_zero_delay_matches_run(small_cfg):
    cfg = replace(pipeline.load_config(small_cfg), protocol=pipeline.ProtocolConfig(fm_days=2))
    cfg = replace(cfg, stream=replace(cfg.stream, n_days=5), seeds=(0,))
    rows, summary = pipeline.cmd_staleness(cfg, max_delay=1, modes=(DistillMode.AH,))
    direct = pipeline.metric_rows(cfg, pipeline.run_seed(cfg, 0, modes=(DistillMode.AH,)), 0)
    assert [r for r in rows if r[1] == 0] == direct
    assert {r[0] for r in summary} == {0, 1}


def test_sweep_zero_weight_gives_no_gain(small_cfg):
    cfg = replace(pipeline.load_config(small_cfg), seeds=(0,))
    table = pipeline.cmd_sweep(cfg, [(0, 1.5, 2), (1, 1.5, 2)])
    assert float(table[0][3]) == pytest.approx(0.0, abs=1e-12)
    assert [c.ok for c in sweep_checks(table)] == [True]
    with pytest.raises(ConfigError):
        pipeline.cmd_sweep(cfg, [])


def test_capacity_check():
    pipeline.capacity_check(pipeline.ExperimentConfig())
    tiny = pipeline.parse_config("[models]\nfm_hidden = 4\n")
    with pytest.raises(ValueError):
        pipeline.capacity_check(tiny)


# Subcommands and reports


def test_staleness_checks_shape():
    summary = [[0, "AH", "0.70", "0", 10], [0, "AH_plus_SA", "0.69", "0", 10],
               [1, "AH", "0.71", "0", 10], [1, "AH_plus_SA", "0.70", "0", 10]]
    assert all(c.ok for c in staleness_checks(summary))
    summary[3][2] = "0.72"
    assert [c.ok for c in staleness_checks(summary)] == [True, True, False, True]


def test_check_line():
    assert Check("x", True, "d").line() == "PASS  x  d"
    assert Check("y", False).line() == "FAIL  y"


def test_das_verify_single_task(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "das-verify", "--count", "5", "--tasks", "1", "--versions", "1"])
    assert code == 0
    assert "FAIL" not in capsys.readouterr().out


def test_das_verify_mutation_fails(tmp_path):
    code = main(["--out", str(tmp_path), "das-verify", "--count", "20", "--tasks", "1", "--versions", "2",
                 "--mutation", "skip-lease"])
    assert code == 1
    assert (tmp_path / "das_violation_trace.csv").exists()


def test_das_verify_rejects_zero_count(tmp_path):
    assert main(["--out", str(tmp_path), "das-verify", "--count", "0"]) == 2


def test_gen_stream(tmp_path, small_cfg):
    out = tmp_path / "streams"
    assert main(["--config", str(small_cfg), "--out", str(out), "gen-stream"]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["stream_traffic0.csv", "stream_traffic1.csv"]
