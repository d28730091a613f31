import subprocess
import sys

import numpy as np
import pytest

from beamcorr import cli
from beamcorr.config import SCHEMA
from beamcorr.fitting import FitResult, synthetic_histogram
from beamcorr.physics import BeamParameters
from beamcorr.tagio import read_csv, read_g2_csv, read_tags, write_g2_csv


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def hbt_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("hbt")
    assert run("simulate", "--preset", "fig3a", "--duration", 0.2, "--seed", 4,
               "--set", "det.ceff=1.0", "--out", out) == 0
    return out


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        run("simulate", "--help")
    assert exc.value.code == 0
    text = capsys.readouterr().out
    missing = [k for k in SCHEMA if k not in text]
    assert not missing
    assert "BEAMCORR_THREADS" in text


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "beamcorr.cli", "--version"],
                         capture_output=True, text=True, check=True)
    assert out.stdout.startswith("beamcorr ")


class TestExitCodes:
    def test_validation(self, tmp_path, capsys):
        assert run("simulate", "--set", "beam.temp=78", "--out", tmp_path) == 2
        assert "unit suffix" in capsys.readouterr().err

    def test_unknown_preset(self, tmp_path):
        assert run("simulate", "--preset", "fig9z", "--out", tmp_path) == 2

    def test_corrupt_input(self, tmp_path, capsys):
        bad = tmp_path / "bad.attg"
        bad.write_bytes(b"NOPE" + bytes(40))
        assert run("g2", "--a", bad, "--b", bad, "--out", tmp_path / "g2.csv") == 3
        assert "bad magic" in capsys.readouterr().err

    def test_missing_input(self, tmp_path):
        assert run("g2", "--a", tmp_path / "x", "--b", tmp_path / "y", "--out", tmp_path / "o") == 2

    def test_non_convergence(self, tmp_path, monkeypatch):
        hist = synthetic_histogram(
            {"mean_n": 0.138, "fov_length": 25e-6, "rabi_mean": 6.0, "rabi_sigma": 1.5},
            BeamParameters(351.15),
        )
        write_g2_csv(hist, tmp_path / "g2.csv")
        stub = FitResult(0.1, 25e-6, 6.0, 1.5, converged=False, message="stub")
        monkeypatch.setattr(cli, "fit_g2", lambda *a, **k: stub)
        assert run("fit", "--g2", tmp_path / "g2.csv", "--out", tmp_path / "fit.csv") == 4
        # results are still written for inspection
        assert (tmp_path / "fit.csv").exists()


def test_simulate_outputs(hbt_run):
    for name in ("A.attg", "B.attg", "ledger.csv", "manifest.txt"):
        assert (hbt_run / name).exists()
    manifest = (hbt_run / "manifest.txt").read_text()
    assert "config_sha256 = " in manifest and "seed = 4" in manifest
    assert "recipe: beamcorr simulate --preset fig3a" in manifest
    a, b = read_tags(hbt_run / "A.attg"), read_tags(hbt_run / "B.attg")
    assert a.channel == 0 and b.channel == 1 and len(a) > 1000


def test_simulate_is_deterministic(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert run("simulate", "--preset", "fig3a", "--duration", 0.02, "--seed", 9,
                   "--emissions", "--out", out) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    assert names == sorted(p.name for p in outs[1].iterdir())
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes(), n


def test_g2_subcommand(hbt_run, tmp_path):
    out = tmp_path / "g2.csv"
    assert run("g2", "--a", hbt_run / "A.attg", "--b", hbt_run / "B.attg", "--out", out) == 0
    h = read_g2_csv(out)
    assert h.counts.size == 200 and h.tau_min == pytest.approx(-200e-9)
    k = np.argmax(h.normalized)
    assert 4e-9 <= abs(h.left[k]) <= 20e-9
    assert h.normalized[k] > 5
    # determinism of the analysis step
    again = tmp_path / "g2b.csv"
    run("g2", "--a", hbt_run / "A.attg", "--b", hbt_run / "B.attg", "--out", again)
    assert out.read_bytes() == again.read_bytes()


def test_g3_subcommand(hbt_run, tmp_path):
    out = tmp_path / "g3.csv"
    assert run("g3", "--a", hbt_run / "A.attg", "--b", hbt_run / "B.attg", "--out", out) == 0
    header, cols = read_csv(out)
    assert header == ["tau1_s", "tau2_s", "counts", "g3"]
    assert cols["counts"].size == 400
    assert np.isnan(cols["g3"]).sum() == 40


def test_fit_subcommand(hbt_run, tmp_path):
    g2 = tmp_path / "g2.csv"
    run("g2", "--a", hbt_run / "A.attg", "--b", hbt_run / "B.attg", "--range-ns", 400, "--out", g2)
    out = tmp_path / "fit.csv"
    assert run("fit", "--g2", g2, "--fix", "L=25,sigma=1.5", "--out", out) == 0
    rows = dict(line.split(",") for line in out.read_text().splitlines()[1:])
    assert float(rows["fov_length"]) == pytest.approx(25e-6)
    assert 0.05 < float(rows["mean_n"]) < 0.3
    header, cols = read_csv(tmp_path / "fit_residuals.csv")
    assert header == ["tau_s", "g2", "model", "residual"]


def test_fit_bad_fix(tmp_path):
    hist = synthetic_histogram(
        {"mean_n": 0.138, "fov_length": 25e-6, "rabi_mean": 6.0, "rabi_sigma": 1.5},
        BeamParameters(351.15),
    )
    write_g2_csv(hist, tmp_path / "g2.csv")
    assert run("fit", "--g2", tmp_path / "g2.csv", "--fix", "zeta=1", "--out", tmp_path / "f.csv") == 2


def test_theory_subcommand(tmp_path):
    out = tmp_path / "th.csv"
    assert run("theory", "--mean-n", 0.138, "--out", out) == 0
    _, cols = read_csv(out)
    assert cols["tau_s"][0] == 0.0 and cols["g2"][0] == 1.0
    assert 9 < cols["g2"].max() < 11
    out2 = tmp_path / "tf.csv"
    assert run("theory", "--kind", "two-fiber", "--temp-c", 70, "--mean-n", 0.1,
               "--bin-ns", 4, "--max-ns", 4000, "--out", out2) == 0
    _, cols = read_csv(out2)
    assert cols["tau_s"][0] == pytest.approx(4e-9) and cols["g2"].max() > 1


def test_dual_fiber_pipeline(tmp_path):
    out = tmp_path / "f1c"
    assert run("simulate", "--preset", "fig1c", "--duration", 1.0, "--seed", 3,
               "--set", "det.ceff=0.5", "--out", out) == 0
    a, b = out / "A.attg", out / "B.attg"
    xc = tmp_path / "x.csv"
    assert run("xcorr", "--a", a, "--b", b, "--out", xc) == 0
    h = read_g2_csv(xc).window(0.0, 20e-6).rebin(10)
    assert 450e-9 <= h.centers[np.argmax(h.normalized)] <= 700e-9
    vel = tmp_path / "v.csv"
    assert run("velocity", "--a", a, "--b", b, "--kind", "coincidence", "--out", vel) == 0
    _, cols = read_csv(vel)
    assert 80 <= cols["v_mps"][np.argmax(cols["density"])] <= 120
    # a run used as its own background leaves nothing to reconstruct
    assert run("velocity", "--a", a, "--b", b, "--background", f"{a},{b}", "--weight", 1,
               "--out", tmp_path / "v0.csv") == 2
    assert run("velocity", "--a", a, "--b", b, "--background", str(a), "--out", tmp_path / "v1.csv") == 2
