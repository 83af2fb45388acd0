import json

import numpy as np
import pytest

from specsched import harness, tensorio
from specsched.cli import build_parser, main
from specsched.diffusion import forward_noise
from specsched.harness import ExperimentConfig
from specsched.schedule import KappaBounds, discretize, make_schedule
from specsched.specsampler import GmmFitConfig, GmmParams, fit_gmm, manipulate_spectrum, sample_spectrum
from specsched.spectral import PowerLawFit, SpectrumCurve, fit_power_law, rapsd, synthesize_field

SUBCOMMANDS = ["rapsd", "fit", "schedule", "noise", "fit-gmm", "sample-spectrum", "train-toy", "sample",
               "sweep", "grid", "trend"]


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def image(tmp_path):
    field = synthesize_field(PowerLawFit(-2.0, 1.0, 16), 32, np.random.default_rng(0))
    path = tmp_path / "img.pgm"
    tensorio.save_image(tensorio.ImageTensor(0.9 * field / np.abs(field).max()), path)
    return path


@pytest.fixture
def config(tmp_path):
    cfg = {
        "dataset": {"side": 16, "count": 16, "labels": {"0": {"alpha": -2.0, "beta": 100.0}}},
        "training": {"steps": 20, "batch_size": 8, "eval_draws": 32},
        "sampler": {"steps": 8},
        "sampling": {"count": 3},
        "check": {"max_distance": 10.0},
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for name in SUBCOMMANDS:
        assert name in text


def test_usage_errors_exit_2(capsys):
    for argv in (["schedule", "--bogus"], ["nope"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_every_stochastic_subcommand_accepts_seed():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name in ("noise", "fit-gmm", "sample-spectrum", "train-toy", "sample", "sweep", "grid", "trend"):
        opts = {o for a in sub.choices[name]._actions for o in a.option_strings}
        assert "--seed" in opts, name


def test_rapsd_matches_library(image, capsys, tmp_path):
    code, out, _ = run(["rapsd", image], capsys)
    assert code == 0
    curve = rapsd(tensorio.load_image(image))
    assert out == curve.to_csv()
    assert SpectrumCurve.from_csv(out) == curve
    code, _, _ = run(["rapsd", image, "--out", tmp_path / "c.csv"], capsys)
    assert (tmp_path / "c.csv").read_text() == curve.to_csv()


def test_fit_exact_and_malformed(tmp_path, capsys):
    fit = PowerLawFit(-2.0, 5.0, 16)
    path = tmp_path / "c.csv"
    path.write_text(fit.to_curve().to_csv())
    code, out, _ = run(["fit", path], capsys)
    got = json.loads(out)
    assert code == 0
    assert got["alpha"] == pytest.approx(-2.0, abs=1e-12) and got["beta"] == pytest.approx(5.0, rel=1e-12)
    assert out == fit_power_law(SpectrumCurve.from_csv(path.read_text())).to_json() + "\n"
    path.write_text("k,power\n0,1\n")
    code, _, err = run(["fit", path], capsys)
    assert code == 3 and "error" in err


def test_schedule_matches_discretize(capsys):
    code, out, _ = run(["schedule", "--kind", "mixed", "--alpha", -2, "--beta", 100, "--nf", 32, "--steps", 1],
                       capsys)
    assert code == 0
    spec = make_schedule("mixed", PowerLawFit(-2.0, 100.0, 32), KappaBounds(0.2, 200.0))
    assert out == discretize(spec, 1).to_csv()
    assert len(out.splitlines()) == 3
    code, out, _ = run(["schedule", "--steps", 64, "--nf", 32, "--kmin", 0.1, "--kmax", 100], capsys)
    lam = np.array([float(r.split(",")[2]) for r in out.splitlines()[1:]])
    assert np.all(np.diff(lam) < 0)
    code, out, _ = run(["schedule", "--steps", 4, "--json"], capsys)
    assert len(json.loads(out)["rows"]) == 5


def test_noise_matches_library(image, tmp_path, capsys):
    code, _, _ = run(["noise", image, "--t", 0.3, "--seed", 5, "--out", tmp_path / "n.pgm",
                      "--tensor-out", tmp_path / "n.tns"], capsys)
    assert code == 0
    img = tensorio.load_image(image)
    spec = make_schedule("mixed", fit_power_law(rapsd(img)))
    x_t, _ = forward_noise(img.data, 0.3, spec, np.random.default_rng(5))
    np.testing.assert_array_equal(tensorio.load_tensor(tmp_path / "n.tns").data, x_t.astype(np.float32))
    tensorio.save_image(tensorio.ImageTensor(x_t), tmp_path / "lib.pgm")
    assert (tmp_path / "n.pgm").read_bytes() == (tmp_path / "lib.pgm").read_bytes()


def test_fit_gmm_and_sample_spectrum(tmp_path, capsys):
    rng = np.random.default_rng(0)
    fits = [{"label": "a", **PowerLawFit(-2 + 0.1 * rng.normal(), float(np.exp(rng.normal() + 3)), 16).to_dict()}
            for _ in range(30)]
    (tmp_path / "fits.json").write_text(json.dumps(fits))
    code, _, _ = run(["fit-gmm", tmp_path / "fits.json", "--components", 2, "--seed", 4,
                      "--out", tmp_path / "gmm.json"], capsys)
    assert code == 0
    pairs = [(r["label"], PowerLawFit.from_dict(r)) for r in fits]
    params, _ = fit_gmm(pairs, 2, GmmFitConfig(components=2, seed=4))
    assert json.loads((tmp_path / "gmm.json").read_text()) == json.loads(json.dumps(params.to_dict()))

    code, out, _ = run(["sample-spectrum", tmp_path / "gmm.json", "--label", "a", "--count", 3, "--seed", 2,
                        "--manipulate-factor", 2.5], capsys)
    rng = np.random.default_rng(2)
    loaded = GmmParams.load(tmp_path / "gmm.json")
    expect = [manipulate_spectrum(sample_spectrum(loaded, "a", rng), 2.5).to_dict() for _ in range(3)]
    assert out == json.dumps(expect) + "\n"
    code, _, err = run(["sample-spectrum", tmp_path / "gmm.json", "--label", "zzz"], capsys)
    assert code == 3 and "unknown label" in err


def test_train_toy_matches_library(config, capsys):
    code, out, _ = run(["train-toy", config], capsys)
    assert code == 0
    outcome = harness.run_training(ExperimentConfig.load(config))
    assert out == harness.loss_trace_csv(outcome.loss_trace)


def test_sample_matches_library_and_identity_factor(config, capsys):
    code, out, _ = run(["--json", "sample", config, "--seed", 3], capsys)
    assert code == 0
    lib = harness.run_sampling(ExperimentConfig.load(config).replace(seed=3))
    assert json.loads(out)["distance"] == lib.summary
    _, out_flag, _ = run(["sample", config, "--manipulate-factor", 1.0], capsys)
    _, out_plain, _ = run(["sample", config], capsys)
    assert out_flag == out_plain


def test_sample_check_failure_exit_4(config, tmp_path, capsys):
    cfg = json.loads(config.read_text())
    cfg["check"] = {"max_distance": 0.0}
    strict = tmp_path / "strict.json"
    strict.write_text(json.dumps(cfg))
    code, _, err = run(["sample", strict, "--check"], capsys)
    assert code == 4 and "check failed" in err
    assert run(["sample", config, "--check"], capsys)[0] == 0


def test_sampler_flags_override(config, capsys):
    _, out, _ = run(["--json", "sample", config, "--gamma", 0.5, "--guidance-scale", 2.0,
                     "--guidance-lo", 0.2, "--guidance-hi", 0.8, "--bias", 1.0], capsys)
    cfg = ExperimentConfig.load(config).replace(sampler__gamma=0.5, sampler__guidance_scale=2.0,
                                                sampler__guidance_interval=(0.2, 0.8), sampler__bias=1.0)
    assert json.loads(out)["distance"] == harness.run_sampling(cfg).summary


def test_sweep_matches_library(config, capsys):
    code, out, _ = run(["sweep", config, "--step-counts", "1,4", "--seeds", 2], capsys)
    assert code == 0
    _, text = harness.nfe_sweep(ExperimentConfig.load(config), [1, 4], seeds=2)
    assert out == text


def test_grid_writes_outputs(image, tmp_path, capsys):
    code, out, _ = run(["grid", image, "--kinds", "cosine,mixed", "--t", "0,0.5", "--out-dir", tmp_path / "g"],
                       capsys)
    assert code == 0
    assert len(out.splitlines()) == 4
    lib = harness.noised_grid(image, ["cosine", "mixed"], [0.0, 0.5], tmp_path / "lib", seed=0)
    for e in lib:
        assert (tmp_path / "g" / e.image.name).read_bytes() == e.image.read_bytes()


def test_trend_csv(capsys):
    code, out, _ = run(["trend", "--sides", "8,16", "--count", 4], capsys)
    assert code == 0
    assert out.splitlines()[0] == "t,lambda_8,lambda_16"


def test_missing_file_is_data_error(capsys):
    assert run(["rapsd", "/nonexistent.pgm"], capsys)[0] == 3
    assert run(["sample", "/nonexistent.json"], capsys)[0] == 3
