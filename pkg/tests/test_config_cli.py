import json
from pathlib import Path

import numpy as np
import pytest

from rcmlab.cli import emit_plot_data, main
from rcmlab.config import EXPERIMENT_KINDS, load_config, parse_config
from rcmlab.env import load_container, sample_environment
from rcmlab.errors import ConfigurationError

CONFIGS = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.yaml"))

CLT = """\
experiment: clt-scan
environment:
  dimension: 2
  side: 32
  distribution: {kind: uniform, lower: 0.5}
  seed: 1
ensemble:
  n_samples: 4
params:
  R_list: [1, 2, 4]
  p_list: [1, 2]
"""

GROWTH = """\
experiment: growth
environment:
  dimension: 2
  side: 32
  distribution: {kind: uniform, lower: 0.5}
ensemble:
  n_samples: 3
params:
  x_list: [1, 2, 4]
"""

SCALES = """\
experiment: scales
environment:
  dimension: 2
  side: 16
  distribution: {kind: pareto, gamma_star: 8}
  seed: 2
ensemble:
  n_samples: 2
params:
  C_diamond: 0.05
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, text, out="out", *extra):
    cfg = write(tmp_path, text)
    code = main(["run", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


@pytest.mark.parametrize("path", CONFIGS, ids=[p.stem for p in CONFIGS])
def test_shipped_configs_validate(path, capsys):
    assert main(["validate", str(path)]) == 0
    assert "OK" in capsys.readouterr().out


def test_every_experiment_kind_has_a_config():
    kinds = {load_config(p)[0].experiment for p in CONFIGS}
    assert kinds == set(EXPERIMENT_KINDS)


def test_string_where_number_expected(tmp_path, capsys):
    bad = CLT.replace("side: 32", "side: large")
    code, _ = run(tmp_path, bad)
    err = capsys.readouterr().err
    assert code == 1
    assert "environment.side" in err
    assert "cfg.yaml:4:" in err


def test_unknown_keys_rejected_with_location():
    with pytest.raises(ConfigurationError, match=r"<config>:\d+: params\.R_lst"):
        parse_config(CLT.replace("R_list", "R_lst"))
    with pytest.raises(ConfigurationError, match="environment.colour"):
        parse_config(CLT.replace("  seed: 1", "  colour: red"))


def test_yaml_syntax_error_has_line():
    with pytest.raises(ConfigurationError, match=r"<config>:\d+: YAML syntax error"):
        parse_config("experiment: clt-scan\nenvironment: [1, 2\n")


def test_bad_distribution_parameters_reported():
    with pytest.raises(ConfigurationError, match="environment"):
        parse_config(CLT.replace("lower: 0.5", "lower: 2.0"))


def test_spectral_gap_config_exit_zero(tmp_path):
    path = next(p for p in CONFIGS if p.stem == "spectral-gap-exhaustive")
    code = main(["run", str(path), "--out", str(tmp_path / "sg")])
    assert code == 0
    recs = [json.loads(x) for x in (tmp_path / "sg" / "results.jsonl").read_text().splitlines()]
    assert recs[0]["record"] == "header" and recs[0]["status"] == "ok"
    body = [r for r in recs[1:] if r.get("record") == "spectral_gap"]
    assert body and body[0]["variance"] <= body[0]["bound"]
    assert "margin" in body[0]


def test_clt_scan_summary_and_plot(tmp_path, capsys):
    code, out = run(tmp_path, CLT)
    assert code == 0
    summary = (out / "summary.txt").read_text()
    assert "slope" in summary and "CI" in summary
    assert main(["plot", str(out)]) == 0
    files = sorted(p.name for p in out.glob("plot_*.csv"))
    assert files == ["plot_CR_p1.csv", "plot_CR_p2.csv"]
    lines = (out / "plot_CR_p2.csv").read_text().splitlines()
    assert lines[0].startswith("# rcmlab-schema=1 config_sha256=")
    assert lines[1] == "R,y,ci_lo,ci_hi,non_convergent"
    assert len(lines) == 2 + 3


def test_growth_plot_has_log_reference(tmp_path):
    code, out = run(tmp_path, GROWTH)
    assert code == 0
    emit_plot_data(out)
    header = (out / "plot_growth.csv").read_text().splitlines()[1].split(",")
    assert "log_half_1px" in header and "shape_ref" in header


def test_plot_empty_dir_names_it(tmp_path, capsys):
    empty = tmp_path / "nothing-here"
    empty.mkdir()
    assert main(["plot", str(empty)]) == 1
    assert str(empty) in capsys.readouterr().err
    with pytest.raises(FileNotFoundError, match="nothing-here"):
        emit_plot_data(empty)


def test_runs_are_bitwise_reproducible(tmp_path):
    _, a = run(tmp_path, CLT, "a")
    _, b = run(tmp_path, CLT, "b", "--threads", "2")
    for name in ("results.csv", "results.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()

    def strip(text):
        return [ln for ln in text.splitlines() if not ln.startswith(("started:", "finished:"))]

    assert strip((a / "summary.txt").read_text()) == strip((b / "summary.txt").read_text())


def test_results_share_config_hash(tmp_path):
    cfg = write(tmp_path, CLT)
    _, sha = load_config(cfg)
    _, out = run(tmp_path, CLT)
    assert (out / "results.csv").read_text().splitlines()[0] == f"# rcmlab-schema=1 config_sha256={sha}"
    assert json.loads((out / "results.jsonl").read_text().splitlines()[0])["config_sha256"] == sha


def test_censored_scales_exit_two(tmp_path):
    code, out = run(tmp_path, SCALES)
    assert code == 2
    assert "censored" in (out / "summary.txt").read_text()


def test_env_dump_roundtrip(tmp_path):
    cfg = write(tmp_path, CLT)
    target = tmp_path / "env.rcmb"
    assert main(["env-dump", str(cfg), "--out", str(target)]) == 0
    env, _ = load_container(target)
    ref = sample_environment(load_config(cfg)[0].spec())
    assert np.array_equal(env.a, ref.a)
