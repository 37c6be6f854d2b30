import json
import subprocess
import sys

import numpy as np
import pytest

from fmps.cli import ABLATE_HEADER, main
from fmps.imageio import read_csv_vectors

GAUSS = """
[model]
kind = "gaussian"
dim = 2
mean = [0.0, 0.0]
var = [1.0, 1.0]

[task]
energy = "inpaint-mask"
mask = [1, 0]
condition = [2.0, 0.0]

[sampler]
variant = "{variant}"
steps = 20
r = {r}
chains = 64
seed = 3
r_values = [0.0, 1.0]

[output]
dir = "{out}"
"""


def gauss_cfg(tmp_path, variant="unconditional", r=0.0, out="out", name="g.toml", extra=""):
    p = tmp_path / name
    p.write_text(GAUSS.format(variant=variant, r=r, out=out) + extra)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def outputs(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if not p.name.endswith(".manifest.json")}


def test_sample_writes_files_and_manifest(tmp_path):
    assert run("sample", "--config", gauss_cfg(tmp_path)) == 0
    out = tmp_path / "out"
    names = set(p.name for p in out.iterdir())
    assert {"samples.csv", "trajectory.csv", "samples_density.ppm", "samples.png", "sample.manifest.json"} <= names
    assert read_csv_vectors(out / "samples.csv").shape == (64, 2)
    m = json.loads((out / "sample.manifest.json").read_text())
    for key in ("config_hash", "seed", "numpy", "scipy", "python", "fmps_version", "threads", "config", "outputs"):
        assert key in m
    assert m["seed"]["sampler"] == 3
    assert set(m["outputs"]) == {"samples.csv", "trajectory.csv", "samples_density.ppm", "samples.png"}


@pytest.mark.parametrize("variant", ["fmps-gradient", "fmps-free"])
def test_r_zero_sample_files_match_unconditional(tmp_path, variant):
    run("sample", "--config", gauss_cfg(tmp_path, out="u"))
    run("sample", "--config", gauss_cfg(tmp_path, variant=variant, out="g", name="v.toml"))
    assert outputs(tmp_path / "u") == outputs(tmp_path / "g")


def test_rerun_is_byte_identical_and_manifest_replays(tmp_path):
    cfg = gauss_cfg(tmp_path, variant="fmps-free", r=1.0)
    run("sample", "--config", cfg, "--out", tmp_path / "a")
    run("sample", "--config", cfg, "--out", tmp_path / "b", "--threads", "3")
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")
    run("sample", "--config", tmp_path / "a" / "sample.manifest.json", "--out", tmp_path / "c")
    assert outputs(tmp_path / "a") == outputs(tmp_path / "c")
    ma = json.loads((tmp_path / "a" / "sample.manifest.json").read_text())
    mc = json.loads((tmp_path / "c" / "sample.manifest.json").read_text())
    assert ma["outputs"] == mc["outputs"]


def test_seed_override_changes_output(tmp_path):
    cfg = gauss_cfg(tmp_path)
    run("sample", "--config", cfg, "--out", tmp_path / "a")
    run("sample", "--config", cfg, "--out", tmp_path / "b", "--seed", "4")
    assert (tmp_path / "a" / "samples.csv").read_bytes() != (tmp_path / "b" / "samples.csv").read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert run("sample", "--config", tmp_path / "missing.toml") == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("[sampler]\nstepz = 3\n")
    assert run("sample", "--config", bad) == 2
    assert "bad.toml:2" in capsys.readouterr().err
    mlp = tmp_path / "mlp.toml"
    mlp.write_text('[model]\nkind = "mlp"\n')
    assert run("sample", "--config", mlp) == 3  # no checkpoint trained yet
    assert run("sample", "--config", gauss_cfg(tmp_path), "--threads", "0") == 2
    assert run("train", "--config", gauss_cfg(tmp_path)) == 2
    unguided = tmp_path / "n.toml"
    unguided.write_text('[model]\nkind = "gaussian"\n[sampler]\nvariant = "fmps-free"\nr = 1.0\n')
    assert run("sample", "--config", unguided) == 2


def test_divergence_exit_status(tmp_path):
    text = gauss_cfg(tmp_path, variant="fmps-gradient", r=1e300).read_text()
    text = text.replace("[sampler]", "[sampler]\nnormalization = false\ncorrection_cap = 0.0")
    (tmp_path / "div.toml").write_text(text)
    assert run("sample", "--config", tmp_path / "div.toml") == 4


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "fmps.cli", "sample", "--config", str(gauss_cfg(tmp_path))],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "sample: wrote" in res.stdout


def test_eval_against_posterior(tmp_path):
    cfg = gauss_cfg(tmp_path, variant="fmps-gradient", r=1.0,
                    extra='\n[eval]\nreference = "posterior"\nreference_count = 256\n')
    assert run("sample", "--config", cfg) == 0
    assert run("eval", "--config", cfg) == 0
    lines = (tmp_path / "out" / "eval.csv").read_text().splitlines()
    assert lines[0] == "task,variant,r,T,metric,value"
    metrics = {tuple(l.split(",")[1:5:3]): float(l.split(",")[5]) for l in lines[1:]}
    assert ("samples", "mmd2_biased") in metrics and ("reference-vs-reference", "mmd2_biased") in metrics


def test_eval_needs_samples(tmp_path):
    assert run("eval", "--config", gauss_cfg(tmp_path)) == 3


def test_ablate_grid(tmp_path):
    assert run("ablate", "--config", gauss_cfg(tmp_path)) == 0
    lines = (tmp_path / "out" / "ablate.csv").read_text().splitlines()
    assert lines[0].split(",") == ABLATE_HEADER
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 2 * 2 * 2
    assert {(r[0], r[1], r[2]) for r in rows} == {
        (v, n, r) for v in ("fmps-gradient", "fmps-free") for n in ("on", "off") for r in ("0.0", "1.0")}
    assert (tmp_path / "out" / "ablate.png").exists()


def _speed_ratio(csv_text):
    rows = [l.split(",") for l in csv_text.splitlines()[1:]]
    per = {v: np.median([float(r[8]) for r in rows if r[0] == v]) for v in ("fmps-gradient", "fmps-free")}
    return per["fmps-free"] / per["fmps-gradient"]


@pytest.mark.xfail(strict=False, reason="the analytic field's backward pass is almost free, so there is no time to save")
def test_ablate_speed_on_gaussian_field(tmp_path):
    p = gauss_cfg(tmp_path).read_text().replace("steps = 20", "steps = 100").replace("chains = 64", "chains = 1024")
    (tmp_path / "s.toml").write_text(p)
    run("ablate", "--config", tmp_path / "s.toml")
    assert _speed_ratio((tmp_path / "out" / "ablate.csv").read_text()) <= 0.7


MLP = """
[model]
kind = "mlp"
hidden = [64, 64]
time_embed = 16

[train]
dataset = "gauss-mixture-8"
steps = 1500
lr = 2e-3

[task]
energy = "inpaint-mask"
mask = [1, 0]
condition = [2.0, 0.0]

[sampler]
steps = 50
r = 1.0
chains = 256
r_values = [1.0]

[output]
dir = "mlp"
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("mlp")
    (d / "m.toml").write_text(MLP)
    assert run("train", "--config", d / "m.toml") == 0
    return d


def test_train_outputs(trained):
    out = trained / "mlp"
    assert {"model.ckpt", "loss.csv", "loss.png", "train.manifest.json"} <= {p.name for p in out.iterdir()}
    losses = read_csv_vectors(out / "loss.csv")[:, 1]
    assert len(losses) == 1500 and losses[-100:].mean() < losses[:20].mean()


def test_invert_inpainting_beats_unconditional(trained):
    assert run("invert", "--config", trained / "m.toml") == 0
    rows = [l.split(",") for l in (trained / "mlp" / "metrics.csv").read_text().splitlines()[1:]]
    res = {r[1]: float(r[5]) for r in rows if r[4] == "residual_mean"}
    assert set(res) == {"unconditional", "fmps-gradient", "fmps-free"}
    assert res["fmps-gradient"] < res["unconditional"] and res["fmps-free"] < res["unconditional"]


def test_ablate_speed_on_mlp(trained):
    text = MLP.replace("steps = 50", "steps = 100").replace('dir = "mlp"', 'dir = "speed"')
    (trained / "s.toml").write_text(text.replace("[model]", '[model]\ncheckpoint = "mlp/model.ckpt"'))
    assert run("ablate", "--config", trained / "s.toml") == 0
    assert _speed_ratio((trained / "speed" / "ablate.csv").read_text()) <= 0.7
