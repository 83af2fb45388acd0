import json

import numpy as np
import pytest

from specsched import tensorio
from specsched.harness import (
    CheckFailed, ConfigError, DatasetConfig, ExperimentConfig, build_dataset, check_outcome, loss_trace_csv,
    mean_pool, nfe_sweep, noised_grid, resolution_trend, resolution_trend_csv, run_sampling, run_training,
    spectral_distance,
)
from specsched.schedule import alpha_sigma, lambda_mixed, make_schedule
from specsched.specsampler import degenerate_params
from specsched.spectral import PowerLawFit, power_grid, rapsd, synthesize_field


def small_config(**changes):
    base = {
        "name": "small",
        "seed": 0,
        "dataset": {"side": 16, "count": 32, "labels": {"0": {"alpha": -2.0, "beta": 100.0}}},
        "training": {"steps": 50, "batch_size": 8, "eval_draws": 64},
        "sampler": {"steps": 16},
        "sampling": {"count": 4},
    }
    cfg = ExperimentConfig.from_dict(base)
    return cfg.replace(**changes) if changes else cfg


# configuration ---------------------------------------------------------------------

def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="dataset"):
        ExperimentConfig.from_dict({"dataset": {"sidez": 4}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schedule": "nope"})


def test_config_round_trip_and_replace(tmp_path):
    cfg = small_config()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert cfg.replace(sampler__steps=3).sampler.steps == 3
    assert cfg.replace(seed=9).seed == 9
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.load(tmp_path / "bad.json")


# data and metrics ------------------------------------------------------------------

def test_build_dataset_powerlaw():
    cfg = DatasetConfig(side=16, count=8, labels={"a": {"alpha": -2, "beta": 10}, "b": {"alpha": -1, "beta": 3}})
    data = build_dataset(cfg, np.random.default_rng(0))
    assert data.fields.shape == (16, 16, 16)
    assert data.labels == ["a"] * 8 + ["b"] * 8
    assert len(data.fits) == 16 and data.truth["b"] == PowerLawFit(-1, 3, 8)
    again = build_dataset(cfg, np.random.default_rng(0))
    assert data.fields.tobytes() == again.fields.tobytes()


def test_build_dataset_from_images(tmp_path):
    rng = np.random.default_rng(0)
    for label in ("cats", "dogs"):
        (tmp_path / label).mkdir()
        for i in range(2):
            tensorio.write_pnm(tmp_path / label / f"{i}.pgm", rng.integers(0, 256, (8, 8)).astype(np.uint8))
    data = build_dataset(DatasetConfig(kind="images", image_dir=str(tmp_path)), rng)
    assert data.fields.shape == (4, 8, 8) and sorted(set(data.labels)) == ["cats", "dogs"]
    with pytest.raises(ConfigError):
        build_dataset(DatasetConfig(kind="images", image_dir=str(tmp_path / "cats" / "none")), rng)


def test_mean_pool():
    x = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(mean_pool(x, 2), [[2.5, 4.5], [10.5, 12.5]])
    with pytest.raises(ValueError):
        mean_pool(x, 3)


def test_spectral_distance_properties():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0.1, 5, 16), rng.uniform(0.1, 5, 16)
    assert spectral_distance(a, a).summary == 0.0
    assert spectral_distance(a, b).summary == spectral_distance(b, a).summary
    assert spectral_distance(a, b).summary >= 0
    fit = PowerLawFit(-2, 5, 16)
    assert spectral_distance(fit, fit.to_curve()).summary == 0.0
    with pytest.raises(ValueError):
        spectral_distance(a, a[:-1])


# training ------------------------------------------------------------------------------

def test_one_step_training_emits_one_loss():
    outcome = run_training(small_config(training__steps=1))
    assert len(outcome.loss_trace) == 1


def test_training_deterministic_and_progressing(tmp_path):
    cfg = small_config(training__steps=400, output_dir=str(tmp_path / "run"))
    a = run_training(cfg)
    b = run_training(cfg)
    assert a.loss_trace == b.loss_trace
    assert a.denoiser.log_power.tobytes() == b.denoiser.log_power.tobytes()
    assert a.final_eval_loss < a.initial_eval_loss
    for name in ("loss_trace.csv", "denoiser.json", "fits.json", "gmm.json", "training_summary.json"):
        assert (tmp_path / "run" / name).exists()
    assert (tmp_path / "run" / "loss_trace.csv").read_text() == loss_trace_csv(a.loss_trace)


def test_training_covers_logsnr_range():
    outcome = run_training(small_config(training__steps=40, training__batch_size=32))
    lam = outcome.lambdas
    assert lam.size >= 1000
    lam0 = outcome.instance_endpoints[:, 0]
    lam1 = outcome.instance_endpoints[:, 1]
    assert lam.min() <= np.max(lam1) + 0.1
    assert lam.max() >= np.min(lam0) - 0.1


# sampling ------------------------------------------------------------------------------

def test_sampling_deterministic_and_written(tmp_path):
    cfg = small_config(output_dir=str(tmp_path / "s"))
    a, b = run_sampling(cfg), run_sampling(cfg)
    assert a.samples["0"].tobytes() == b.samples["0"].tobytes()
    assert a.summary == b.summary
    assert (tmp_path / "s" / "samples_0.tns").exists()
    summary = json.loads((tmp_path / "s" / "sampling_summary.json").read_text())
    assert summary["distance"] == a.summary


def test_oracle_equals_degenerate_gmm():
    cfg = small_config()
    truth = PowerLawFit(-2.0, 100.0, 8)
    gmm = degenerate_params({"0": truth}, 8, sigma=1e-12)
    oracle = run_sampling(cfg)
    sampled = run_sampling(cfg.replace(sampling__spectrum="gmm"), gmm=gmm)
    np.testing.assert_allclose(sampled.samples["0"], oracle.samples["0"], atol=1e-9)


def test_manipulate_factor_one_is_identity():
    cfg = small_config()
    assert run_sampling(cfg.replace(sampling__manipulate_factor=1.0)).samples["0"].tobytes() == \
        run_sampling(cfg).samples["0"].tobytes()


def test_manipulated_sampling_shifts_high_frequencies():
    cfg = small_config(sampling__manipulate_factor=10.0)
    out = run_sampling(cfg)
    fit = out.fits["0"][0]
    assert fit(8) / PowerLawFit(-2.0, 100.0, 8)(8) == pytest.approx(10.0)


def test_sampling_with_learned_denoiser_and_errors(tmp_path):
    trained = run_training(small_config(training__steps=20, output_dir=str(tmp_path)))
    cfg = small_config(sampling__denoiser="learned", sampling__denoiser_path=str(tmp_path / "denoiser.json"))
    out = run_sampling(cfg)
    assert out.samples["0"].shape == (4, 16, 16)
    assert run_sampling(cfg.replace(sampling__denoiser_path=None), denoiser=trained.denoiser).summary == out.summary
    with pytest.raises(ConfigError):
        run_sampling(small_config(sampling__spectrum="gmm"))
    with pytest.raises(ConfigError):
        run_sampling(small_config(sampling__denoiser="learned"))


@pytest.mark.parametrize("kind", ["cosine", "fixed_median", "cosine_minmax", "frequency", "power"])
def test_sampling_other_schedules(kind):
    out = run_sampling(small_config(schedule=kind))
    assert np.isfinite(out.summary)


def test_check_outcome():
    cfg = small_config(check={"max_distance": 0.1})
    check_outcome(cfg, 0.05)
    with pytest.raises(CheckFailed):
        check_outcome(cfg, 0.2)
    check_outcome(small_config(), 1e9)


# noised grid -------------------------------------------------------------------------

@pytest.fixture
def grid_image(tmp_path):
    field = synthesize_field(PowerLawFit(-2.0, 1.0, 32), 64, np.random.default_rng(0))
    field = 0.9 * field / np.abs(field).max()
    path = tmp_path / "scene.pgm"
    tensorio.save_image(tensorio.ImageTensor(field), path)
    return path


def test_noised_grid_outputs(grid_image, tmp_path):
    out = tmp_path / "grid"
    entries = noised_grid(grid_image, ["cosine", "mixed"], [0.0, 0.5, 1.0], out, seed=3)
    assert len(entries) == 6
    assert (out / "grid.pgm").exists() and (out / "grid.csv").exists()
    rows = (out / "grid.csv").read_text().splitlines()
    assert len(rows) == 7
    cos_mid = [e for e in entries if e.kind == "cosine" and e.t == 0.5][0]
    assert cos_mid.lam == pytest.approx(0.0, abs=1e-12)
    x0 = tensorio.load_image(grid_image).data
    for e in entries:
        assert e.image.exists() and e.tensor.exists() and e.rapsd.exists()
        np.testing.assert_array_equal(tensorio.load_tensor(e.tensor).data, e.noised.astype(np.float32))
        if e.t == 0.0:
            a, s = alpha_sigma(e.lam)
            assert np.abs(e.noised - x0).max() <= (1 - a) * np.abs(x0).max() + 6 * s


def test_noised_grid_rapsd_matches_prediction(grid_image, tmp_path):
    entries = noised_grid(grid_image, ["mixed", "cosine"], [0.2, 0.5, 0.8], tmp_path / "g", seed=4)
    x0 = tensorio.load_image(grid_image).channel(0)
    p0 = power_grid(x0)
    from specsched.spectral import radial_index
    idx = radial_index(64)
    within = []
    for e in entries:
        a, s = alpha_sigma(e.lam)
        pred = e.predicted.power[1:]
        got = rapsd(tensorio.ImageTensor(e.noised)).power[1:]
        for k in range(1, 33):
            cells = idx == k
            n_k = cells.sum()
            var = 2.0 * np.sum(s**4 + 2 * a**2 * p0[cells] * s**2) / n_k**2
            within.append(abs(got[k - 1] - pred[k - 1]) <= 4 * np.sqrt(var))
    assert np.mean(within) >= 0.95


# sweeps --------------------------------------------------------------------------------

def test_nfe_sweep_rows(tmp_path):
    cfg = small_config(sampling__count=8)
    rows, text = nfe_sweep(cfg, [1, 4, 16, 64], seeds=3, out_path=tmp_path / "sweep.csv")
    assert len(rows) == 4 and text.splitlines()[0] == "steps,distance"
    assert (tmp_path / "sweep.csv").read_text() == text
    d = dict(rows)
    assert d[64] <= d[1]


def test_resolution_trend_identical_images():
    scene = synthesize_field(PowerLawFit(-2.0, 50.0, 16), 32, np.random.default_rng(5))
    t, curves = resolution_trend(np.stack([scene] * 3), sides=(32,))
    np.testing.assert_array_equal(t, np.linspace(0, 1, 1024))
    from specsched.spectral import fit_power_law
    np.testing.assert_allclose(curves[32], lambda_mixed(t, fit_power_law(rapsd(scene))), atol=1e-12)
    text = resolution_trend_csv(t, curves)
    assert text.splitlines()[0] == "t,lambda_32" and len(text.splitlines()) == 1025
    with pytest.raises(ValueError):
        resolution_trend(np.stack([scene]), sides=(24,))
