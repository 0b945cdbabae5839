import hashlib
import json
import os
import subprocess
import sys

import pytest

from arefs.cli import ConfigError, load_config, main, validate


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_unknown_top_level_key_named():
    with pytest.raises(ConfigError, match=r"\$\.colour"):
        load_config({"scenario": "rv-ladder", "colour": 1})


def test_unknown_nested_key_named():
    raw = {"scenario": "pde-decay-sweep", "params": {"flow": {"kind": "cellular", "speed": 2}}}
    with pytest.raises(ConfigError, match=r"\$\.params\.flow"):
        load_config(raw)


def test_minimal_flat_torus_config_validates():
    ok, msgs = validate({"scenario": "pde-decay-sweep", "params": {"target": {"family": "flat-torus"}}})
    assert ok and msgs == ["ok"]


def test_dt_above_cfl_names_the_bound():
    raw = {"scenario": "pde-decay-sweep", "resolution": 64,
           "params": {"amplitudes": [512], "dt": 0.01}}
    ok, msgs = validate(raw)
    assert not ok
    assert any("CFL bound" in m and "$.params.dt" in m for m in msgs)


def test_negative_amplitude_rejected():
    ok, msgs = validate({"scenario": "spectral-report", "params": {"amplitudes": [0, -8]}})
    assert not ok and "$.params.amplitudes[1]" in msgs[0]


def test_resolution_bounds():
    ok, msgs = validate({"scenario": "rv-ladder", "resolution": 4})
    assert not ok and "$.resolution" in msgs[0]
    assert load_config({"scenario": "rv-ladder"}, {"resolution": "48x48"})["resolution"] == [48, 48]


def test_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, {"scenario": "rv-ladder", "extra": 1})
    assert main(["rv-ladder", "--config", bad]) == 2
    assert "$.extra" in capsys.readouterr().err
    mismatch = _write(tmp_path, {"scenario": "rv-ladder"}, "m.json")
    assert main(["sde-race", "--config", mismatch]) == 2
    assert main(["validate", "--config", bad]) == 1
    assert main(["rv-ladder", "--config", str(tmp_path / "missing.json")]) == 2


def test_divergence_audit_cellular_is_rounding_level(tmp_path):
    cfg = {"scenario": "divergence-audit", "resolution": 64, "output": str(tmp_path / "out"),
           "params": {"flows": [{"kind": "cellular", "n": 1}]}}
    assert main(["divergence-audit", "--config", _write(tmp_path, cfg)]) == 0
    m = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert m["summary"]["cellular-1"]["residual"] < 1e-12
    assert m["pass"]


def _run(tmp_path, cfg, out, env=None):
    path = _write(tmp_path, dict(cfg, output=str(out)), f"{out.name}.json")
    r = subprocess.run([sys.executable, "-m", "arefs.cli", cfg["scenario"], "--config", path],
                       env=env, capture_output=True, text=True)
    assert r.returncode in (0, 1), r.stderr
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


SMALL = [
    {"scenario": "spectral-report", "resolution": 16, "params": {"amplitudes": [0, 8], "rv": False}},
    {"scenario": "sde-race", "params": {"N": 2000, "T": 0.01, "cadence": 0.005, "seeds": 1}},
]


@pytest.mark.parametrize("cfg", SMALL, ids=[c["scenario"] for c in SMALL])
def test_reruns_are_byte_identical(tmp_path, cfg):
    env1 = dict(os.environ, OMP_NUM_THREADS="1", OPENBLAS_NUM_THREADS="1")
    env4 = dict(os.environ, OMP_NUM_THREADS="4", OPENBLAS_NUM_THREADS="4")
    a = _run(tmp_path, cfg, tmp_path / "a", env1)
    b = _run(tmp_path, cfg, tmp_path / "b", env4)
    assert a == b


def test_manifest_hashes_every_file(tmp_path):
    cfg = {"scenario": "lyapunov-audit", "resolution": 128, "output": str(tmp_path / "out"),
           "params": {"trials": 10}}
    main(["lyapunov-audit", "--config", _write(tmp_path, cfg)])
    out = tmp_path / "out"
    m = json.loads((out / "manifest.json").read_text())
    emitted = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(m["files"]) == emitted
    for name, digest in m["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert (out / "series.csv").read_text().startswith("series,x,y\n")


def test_inputs_hash_tracks_config(tmp_path):
    base = {"scenario": "lyapunov-audit", "resolution": 128, "params": {"trials": 5}}
    hashes = []
    for seed in (0, 0, 1):
        out = tmp_path / f"o{len(hashes)}"
        cfg = dict(base, seed=seed, output="fixed")
        main(["lyapunov-audit", "--config", _write(tmp_path, cfg), "--out", str(out)])
        hashes.append(json.loads((out / "manifest.json").read_text())["inputs_hash"])
    assert hashes[0] == hashes[1] != hashes[2]


def test_too_few_samples_for_bins():
    ok, msgs = validate({"scenario": "metrics-suite", "params": {"N": 40000, "bins": 24}})
    assert not ok and "$.params.N" in msgs[0] and "57600" in msgs[0]
    assert validate({"scenario": "metrics-suite", "params": {"N": 40000, "bins": 16}})[0]
