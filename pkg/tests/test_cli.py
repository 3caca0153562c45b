import csv
import json
import subprocess
import sys

import pytest

from uvb import cli

AR3 = """\
[experiment]
name = ar3
replications = 2
seed = 5
methods = svb, uvb, uvb-is, mcmc
K = 1
schedule = 100, 125

[sga]
max_iterations = 300

[mcmc]
iterations = 1500
burn_in = 1000
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def ar3_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ar3")
    cfg = write(tmp, AR3)
    codes = [cli.main(["evaluate", "--config", cfg, "--out", str(tmp / d)]) for d in ("a", "b")]
    return tmp, codes


def test_ar3_row_accounting(ar3_runs):
    tmp, codes = ar3_runs
    assert codes == [0, 0]
    assert len(rows(tmp / "a" / "metrics.csv")) == 2 * 4 * 2
    assert "cum_wall_time" not in rows(tmp / "a" / "metrics.csv")[0]
    assert len(rows(tmp / "a" / "timing.csv")) == 2 * 4 * 2


def test_rerun_is_byte_identical(ar3_runs):
    tmp, _ = ar3_runs
    for name in ("metrics.csv", "traces.ndjson", "snapshots.ndjson"):
        assert (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()


def test_metadata_records_defaults_and_seed(ar3_runs):
    tmp, _ = ar3_runs
    meta = json.loads((tmp / "a" / "metadata.json").read_text())
    assert meta["seed"] == 5 and meta["replications"] == 2
    assert meta["settings"]["S"] == 25 and meta["settings"]["S_is"] == 100
    assert meta["settings"]["stop"]["max_iterations"] == 300
    assert meta["settings"]["schedule"] == [100, 125]


def test_unknown_method_exit_code(tmp_path, capsys):
    cfg = write(tmp_path, AR3.replace("mcmc\n", "gibbs\n"))
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "methods" in err and "gibbs" in err and "c.ini:5" in err


@pytest.mark.parametrize("text,needle", [
    ("[experiment]\nname = ar3\nthis is not a key\n", "line  3"),
    ("[experiment]\nname = nope\n", "c.ini:2"),
    ("[experiment]\nname = ar3\nreplications = 0\n", "c.ini:3"),
    ("[experiment]\nname = ar3\nschedule = 100, 90\n", "c.ini:3"),
    ("[experiment]\nname = mixture\nschedule = 10:200:10\n", "beyond T=100"),
    ("[experiment]\nname = ar3\n[sga]\ntolerance = abc\n", "c.ini:4"),
    ("[data]\nT = 3\n", "missing [experiment]"),
])
def test_config_errors(tmp_path, capsys, text, needle):
    cfg = write(tmp_path, text)
    assert cli.main(["fit", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert needle in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert cli.main(["fit", "--config", str(tmp_path / "none.ini")]) == 2


def test_simulate_mixture_and_ar3(tmp_path):
    mix = write(tmp_path, "[experiment]\nname = mixture\nseed = 1\n[data]\nN = 100\nT = 100\n", "m.ini")
    assert cli.main(["simulate", "--config", mix, "--out", str(tmp_path / "m")]) == 0
    assert len(rows(tmp_path / "m" / "data" / "mixture_rep0.csv")) == 10_000
    assert len(rows(tmp_path / "m" / "data" / "mixture_rep0_labels.csv")) == 100
    ar3 = write(tmp_path, "[experiment]\nname = ar3\nseed = 1\n", "a.ini")
    for d in ("a1", "a2"):
        assert cli.main(["simulate", "--config", ar3, "--out", str(tmp_path / d)]) == 0
    first = (tmp_path / "a1" / "data" / "ar3_rep0.csv").read_bytes()
    assert len(rows(tmp_path / "a1" / "data" / "ar3_rep0.csv")) == 500
    assert first == (tmp_path / "a2" / "data" / "ar3_rep0.csv").read_bytes()


def test_simulate_schools(tmp_path):
    cfg = write(tmp_path, "[experiment]\nname = schools\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    data = rows(tmp_path / "data" / "schools.csv")
    assert [float(r["y"]) for r in data] == [28.0, 8.0, -3.0, 7.0, -1.0, 1.0, 18.0, 12.0]


def test_update_runs_only_updating_methods(tmp_path):
    cfg = write(tmp_path, "[experiment]\nname = mixture\nreplications = 1\nschedule = 10, 20\n"
                          "[data]\nN = 10\nT = 20\n[sga]\nmax_iterations = 200\n")
    assert cli.main(["update", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert {r["method"] for r in rows(tmp_path / "metrics.csv")} == {"uvb", "uvb-is"}


def test_lanes_prep(tmp_path):
    lines = ["vehicle_id,frame,x,y,lane"]
    for v, off in ((1, 0.2), (2, -0.2)):
        lines += [f"{v},{f},{f * 0.5},{off},2" for f in range(40)]
    (tmp_path / "traj.csv").write_text("\n".join(lines) + "\n")
    cfg = write(tmp_path, f"[experiment]\nname = lanes-prep\n[lanes]\ninput = {tmp_path / 'traj.csv'}\nT = 30\n")
    assert cli.main(["lanes-prep", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    panel = rows(tmp_path / "o" / "panel.csv")
    assert len(panel) == 60 and set(panel[0]) == {"unit", "t", "y"}
    # mismatched command and experiment is a config error
    assert cli.main(["evaluate", "--config", cfg]) == 2


def test_runtime_failure_exit_code(tmp_path):
    cfg = write(tmp_path, f"[experiment]\nname = lanes-prep\n[lanes]\ninput = {tmp_path / 'missing.csv'}\n")
    assert cli.main(["lanes-prep", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "uvb", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "evaluate" in out.stdout
