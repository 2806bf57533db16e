import json
import subprocess
import sys

import pytest

from photocorr.cli import main
from photocorr.timetag import read_stream, stats


def _run(tmp_path, command, config, out="out", seed=None, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    argv = [command, "--config", str(path), "--out", str(tmp_path / out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv), tmp_path / out


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_simulate_poisson(tmp_path):
    rc, out = _run(tmp_path, "simulate", {"source": {"type": "poisson", "rate_cps": 1e5}, "span_s": 0.1}, seed=3)
    assert rc == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "stream.ptag"]
    m = _manifest(out)
    assert m["seed"] == 3 and m["files"] == ["stream.ptag"]
    assert len(m["config_sha256"]) == 64
    assert len(read_stream(out / "stream.ptag")) == m["summary"]["streams"][0]["count"]


def test_simulate_micromaser_split(tmp_path):
    cfg = {
        "source": {"type": "micromaser", "atom_rate_cps": 3e8, "detection_efficiency": 0.03, "warmup_s": 1e-4},
        "span_s": 0.02,
        "split": 0.44,
    }
    rc, out = _run(tmp_path, "simulate", cfg, seed=1)
    assert rc == 0
    f1 = stats(read_stream(out / "stream_1.ptag")).flux_cps
    f2 = stats(read_stream(out / "stream_2.ptag")).flux_cps
    assert f1 / f2 == pytest.approx(2.6 / 3.3, rel=0.03)


def test_simulate_with_detectors(tmp_path):
    cfg = {
        "source": {"type": "cox", "mean_rate_cps": 1e6, "intensity_law": "two_state"},
        "span_s": 0.05,
        "split": [1, 1, 1],
        "detectors": [{"dead_time_s": 28e-9, "efficiency": 0.9}],
    }
    rc, out = _run(tmp_path, "simulate", cfg)
    assert rc == 0
    assert len(_manifest(out)["files"]) == 3


@pytest.mark.parametrize(
    "config",
    [
        {"source": {"type": "poisson", "rate_cps": 1e6}, "span_s": 1, "detectors": [{"efficiency": 1.5}]},
        {"source": {"type": "poisson", "rate_cps": -1}, "span_s": 1},
        {"source": {"type": "laser"}, "span_s": 1},
        {"source": {"type": "poisson", "rate_cps": 1e6}},
        {"source": {"type": "poisson", "rate_cps": 1e6}, "span_s": 1, "bogus": 1},
        {"source": {"type": "cox", "mean_rate_cps": 1e6, "intensity_law": "two_state", "levels_cps": [0, 1e6]}, "span_s": 1},
    ],
)
def test_config_errors_exit_2(tmp_path, config, capsys):
    rc, _ = _run(tmp_path, "simulate", config)
    assert rc == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_and_input(tmp_path):
    assert main(["scan", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["scan", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    cfg = {"start": "a.ptag", "stop": "b.ptag", "physical_tau_s": 28e-9, "tau_grid_s": [28e-9], "bin_time_s": 1e-6}
    rc, _ = _run(tmp_path, "scan", cfg)
    assert rc == 2


@pytest.fixture
def cox_streams(tmp_path):
    cfg = {
        "source": {"type": "cox", "mean_rate_cps": 3e5, "dwell_time_s": 1e-5},
        "span_s": 4,
        "split": 0.5,
        "detectors": [{"dead_time_s": 28e-9}],
    }
    rc, out = _run(tmp_path, "simulate", cfg, out="sim", seed=11, name="sim.json")
    assert rc == 0
    return out


def _extract_cfg(sim, **kw):
    cfg = {
        "start": str(sim / "stream_1.ptag"),
        "stop": str(sim / "stream_2.ptag"),
        "physical_tau_s": 28e-9,
        "tau_grid_s": {"start_s": 28e-9, "stop_s": 128e-9, "n": 14},
        "bin_time_s": 5e-7,
    }
    cfg.update(kw)
    return cfg


def test_extract_pseudo_thermal(tmp_path, cox_streams):
    rc, out = _run(tmp_path, "extract", _extract_cfg(cox_streams), out="ext")
    assert rc == 0
    result = json.loads((out / "result.json").read_text())
    assert result["g3"] == pytest.approx(6.0, abs=0.5)
    assert result["coefficients"][1] < 0
    assert {"scan.csv", "ratio_series.csv", "scan.svg", "ratio.svg", "result.json"} <= set(_manifest(out)["files"])
    series = (out / "ratio_series.csv").read_text().splitlines()
    assert series[3].startswith("n_points,") and len(series) == 4 + 11
    assert 'stroke-dasharray' in (out / "ratio.svg").read_text()


def test_extract_poisson_ratio_undefined(tmp_path):
    cfg = {"source": {"type": "poisson", "rate_cps": 1e6}, "span_s": 1, "split": 0.5, "detectors": [{"dead_time_s": 28e-9}]}
    _run(tmp_path, "simulate", cfg, out="sim", name="sim.json")
    rc, out = _run(tmp_path, "extract", _extract_cfg(tmp_path / "sim", bin_time_s=1e-6), out="ext")
    assert rc == 0
    result = json.loads((out / "result.json").read_text())
    assert result["ratio_defined"] is False and result["ratio"] is None


def test_extract_regime_error_exit_3(tmp_path, cox_streams, capsys):
    cfg = _extract_cfg(cox_streams, tau_grid_s={"start_s": 28e-9, "stop_s": 5e-6, "n": 5})
    rc, _ = _run(tmp_path, "extract", cfg, out="ext")
    assert rc == 3
    assert "linear regime" in capsys.readouterr().err


def test_other_stream_commands(tmp_path, cox_streams):
    rc, out = _run(tmp_path, "filter", {"input": str(cox_streams / "stream_1.ptag"), "dead_time_s": 1e-7}, out="f")
    assert rc == 0 and (out / "filtered.ptag").exists()
    cfg = {"start": str(cox_streams / "stream_1.ptag"), "stop": str(cox_streams / "stream_2.ptag"), "bin_time_s": 1e-6}
    rc, out = _run(tmp_path, "correlate", cfg, out="c")
    assert rc == 0
    assert json.loads((out / "g2.json").read_text())["g2_zero"] == pytest.approx(2.0, abs=0.1)
    rc, out = _run(tmp_path, "scan", _extract_cfg(cox_streams), out="s")
    assert rc == 0 and (out / "scan.csv").exists()


def test_g3_direct_command(tmp_path):
    cfg = {"source": {"type": "cox", "mean_rate_cps": 1e6, "dwell_time_s": 1e-5}, "span_s": 1, "split": [1, 1, 1]}
    _run(tmp_path, "simulate", cfg, out="sim", name="sim.json")
    sim = tmp_path / "sim"
    cfg = {"inputs": [str(sim / f"stream_{i}.ptag") for i in (1, 2, 3)], "bin_time_s": 3e-7}
    rc, out = _run(tmp_path, "g3-direct", cfg, out="g3")
    assert rc == 0
    assert json.loads((out / "g3_direct.json").read_text())["g3_zero"] == pytest.approx(6.0, rel=0.1)


def test_qmt_panels(tmp_path):
    rc, out = _run(tmp_path, "qmt", {"atom_rate_cps": [5e7, 1e8, 3e8, 1e9]})
    assert rc == 0
    panels = json.loads((out / "moments.json").read_text())["panels"]
    signs = [p["q_mandel"] > 0 for p in panels]
    assert signs == [True, True, False, False]
    assert all("gamma_cqm" in p and "gamma_poi" in p for p in panels)
    rows = (out / "distribution_1.csv").read_text().splitlines()
    assert rows[4] == "n,p,p_poisson"


def test_qmt_zero_pump_and_jump(tmp_path):
    rc, out = _run(tmp_path, "qmt", {"atom_rate_cps": [0, 3.37e9]})
    assert rc == 0
    zero, jump = json.loads((out / "moments.json").read_text())["panels"]
    assert zero["n_max"] == 0 and zero["mean_n"] == 0
    assert (out / "distribution_1.csv").read_text().splitlines()[-1] == "0,1.000000000000e+00,1.000000000000e+00"
    assert jump["multimodal"] is True


def test_qmt_truncation_exit_3(tmp_path):
    rc, _ = _run(tmp_path, "qmt", {"atom_rate_cps": 3e8, "n_max": 100})
    assert rc == 3


def test_plan_snr_command(tmp_path, capsys):
    rc, out = _run(tmp_path, "plan-snr", {"T0_s": 1, "waiting_time_s": 1e-6, "bin_time_s": 1e-6, "order_N": 2})
    assert rc == 0
    doc = json.loads((out / "snr.json").read_text())
    assert doc["snr"] == pytest.approx(1000.0)
    assert '"snr": 1000.0' in capsys.readouterr().out


def test_reproducible_outputs(tmp_path, cox_streams):
    cfg = _extract_cfg(cox_streams)
    _run(tmp_path, "extract", cfg, out="a", name="a.json")
    _run(tmp_path, "extract", cfg, out="b", name="b.json")
    for name in ("result.json", "scan.csv", "ratio_series.csv", "scan.svg", "ratio.svg", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    sim = {"source": {"type": "micromaser", "atom_rate_cps": 1e8, "detection_efficiency": 0.1}, "span_s": 0.002}
    _run(tmp_path, "simulate", sim, out="m1", seed=5, name="m.json")
    _run(tmp_path, "simulate", sim, out="m2", seed=5, name="m.json")
    assert (tmp_path / "m1" / "stream.ptag").read_bytes() == (tmp_path / "m2" / "stream.ptag").read_bytes()


def test_outputs_reference_config_hash(tmp_path, cox_streams):
    _, out = _run(tmp_path, "extract", _extract_cfg(cox_streams), out="ext")
    h = _manifest(out)["config_sha256"]
    assert json.loads((out / "result.json").read_text())["config_sha256"] == h
    for name in ("scan.csv", "ratio_series.csv", "scan.svg", "ratio.svg"):
        assert h in (out / name).read_text()


def test_seed_changes_hash(tmp_path):
    cfg = {"source": {"type": "poisson", "rate_cps": 1e4}, "span_s": 0.01}
    _, a = _run(tmp_path, "simulate", cfg, out="a", seed=1)
    _, b = _run(tmp_path, "simulate", cfg, out="b", seed=2)
    assert _manifest(a)["config_sha256"] != _manifest(b)["config_sha256"]


def test_console_entry_point(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"T0_s": 1, "waiting_time_s": 1e-6, "bin_time_s": 1e-8, "order_N": 3}))
    proc = subprocess.run(
        [sys.executable, "-m", "photocorr.cli", "plan-snr", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["time_multiplier"] == pytest.approx(100.0)
