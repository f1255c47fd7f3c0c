import json

import pytest

from risc_nn.cli import main, parse_layer, parse_overrides

UNINIT = """
region r 64 output=1
task main ld=r st=r
class c
  ADD $a, $b, $c
  ST $c, @o
end
instance i c pe=0 a=$0 b=$1 c=$2 o=@0
"""


def test_run_with_oracle_check(tmp_path, capsys):
    code = main(["run", "--cisc", "mmm", "--shape", "8x8", "--check-oracle", "--trace", "--out", str(tmp_path)])
    assert code == 0
    assert "equivalence: pass" in capsys.readouterr().out
    rows = json.loads((tmp_path / "report.json").read_text())
    assert rows["run"]["macs"] == 512
    assert (tmp_path / "trace.csv").exists() and (tmp_path / "report.csv").exists()
    assert main(["report", str(tmp_path / "trace.csv"), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("label,")


def test_translate_writes_artifacts(tmp_path, capsys):
    assert main(["translate", "--layer", "conv12", "--scheme", "all_reuse", "--out", str(tmp_path)]) == 0
    counts = json.loads((tmp_path / "static_counts.json").read_text())
    assert counts["CAL"] > 0
    for name in ("graph.txt", "program.asm", "program.bin"):
        assert (tmp_path / name).stat().st_size > 0


def test_sweep_simd(capsys):
    assert main(["sweep", "--cisc", "vav", "--shape", "64", "--simd", "4,8", "--format", "csv"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["run", "--layer", "nonesuch", "--scheme", "all_reuse"],
        ["run", "--layer", "conv12"],
        ["run", "--cisc", "vexp", "--shape", "64"],
        ["run", "--cisc", "mmm", "--layer", "conv12", "--scheme", "all_reuse"],
        ["run", "--cisc", "mmm", "--shape", "8x8", "--hw", "simd=banana"],
        ["run", "--cisc", "mmm", "--shape", "8x8", "--hw", "no_such_key=1"],
    ],
)
def test_config_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "config error" in capsys.readouterr().err


def test_bad_toml_reports_position(tmp_path, capsys):
    p = tmp_path / "run.toml"
    p.write_text("[hardware]\nsimd = = 4\n")
    assert main(["run", "--config", str(p), "--cisc", "mmm", "--shape", "8x8"]) == 1
    assert "line 2" in capsys.readouterr().err


def test_toml_run_file(tmp_path, capsys):
    p = tmp_path / "run.toml"
    p.write_text('[hardware]\nsimd = 4\n[run]\ncisc = "vav"\nshape = "64"\nformat = "json"\n')
    assert main(["run", "--config", str(p)]) == 0
    out = capsys.readouterr().out
    assert json.loads(out[: out.rindex("}") + 1])["run"]["peak_tops"] > 0


def test_dataflow_violation_exits_2(tmp_path, capsys):
    g = tmp_path / "g.txt"
    g.write_text(UNINIT)
    assert main(["oracle", "--graph", str(g)]) == 2
    assert "DataflowViolation" in capsys.readouterr().err


def test_deadlock_exits_3(capsys):
    argv = ["run", "--cisc", "vav", "--shape", "64", "--hw", "dram_latency=500", "--hw", "watchdog=100"]
    assert main(argv) == 3
    assert "deadlock" in capsys.readouterr().err


def test_helpers():
    assert parse_overrides(["simd=4", "energy.mac=2.5"]) == {"simd": 4, "energy": {"mac": 2.5}}
    layer = parse_layer("H=8,W=8,R=3,C=2,K=4")
    assert (layer.H, layer.K) == (8, 4)


def test_shipped_config_matches_defaults():
    from pathlib import Path

    from risc_nn.config import HardwareConfig, load_hardware

    path = Path(__file__).resolve().parents[1] / "configs" / "default.toml"
    assert load_hardware(path) == HardwareConfig()
