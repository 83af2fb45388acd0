"""Desk-scale experiments: training loop, sampling loop, noised grids, sweeps.

Every experiment is a pure function of its :class:`ExperimentConfig`; all
randomness is derived from ``config.seed`` through ``numpy.random.SeedSequence``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import tensorio
from .diffusion import (
    SamplerConfig,
    SpectralDenoiser,
    WienerDenoiser,
    denoiser_loss_and_grad,
    forward_noise,
    loss_weight,
    sample_chain,
    train_spectral_denoiser,
)
from .schedule import KappaBounds, ScheduleSpec, alpha_sigma, lambda_mixed, make_schedule, median_schedule
from .specsampler import (
    GmmFitConfig,
    GmmParams,
    feature_from_fit,
    fit_from_feature,
    fit_gmm,
    manipulate_spectrum,
    sample_spectrum,
)
from .spectral import (
    PowerLawFit,
    SpectrumCurve,
    bin_counts,
    fit_power_law,
    predicted_noised_rapsd,
    rapsd,
    rapsd_batch,
    synthesize_field,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class CheckFailed(AssertionError):
    pass


# configuration ------------------------------------------------------------------


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in dc_fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetConfig:
    kind: str = "powerlaw"
    side: int = 64
    count: int = 64
    labels: dict = field(default_factory=lambda: {"0": {"alpha": -2.0, "beta": 100.0}})
    image_dir: str | None = None

    def __post_init__(self):
        if self.kind not in ("powerlaw", "images"):
            raise ValueError(f"dataset kind must be 'powerlaw' or 'images', got {self.kind!r}")
        if self.kind == "images" and not self.image_dir:
            raise ValueError("image datasets need image_dir")
        if self.kind == "powerlaw" and (self.side < 4 or self.count < 1 or not self.labels):
            raise ValueError("powerlaw datasets need side >= 4, count >= 1 and at least one label")


@dataclass
class TrainingConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.05
    bias: float = 0.0
    init: str = "flat"
    eval_draws: int = 256
    gmm_components: int = 3


@dataclass
class SamplingConfig:
    count: int = 16
    spectrum: str = "oracle"
    denoiser: str = "wiener"
    denoiser_path: str | None = None
    gmm_path: str | None = None
    manipulate_factor: float = 1.0

    def __post_init__(self):
        if self.spectrum not in ("oracle", "gmm"):
            raise ValueError(f"spectrum must be 'oracle' or 'gmm', got {self.spectrum!r}")
        if self.denoiser not in ("wiener", "learned"):
            raise ValueError(f"denoiser must be 'wiener' or 'learned', got {self.denoiser!r}")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    schedule: str = "mixed"
    bounds: KappaBounds = field(default_factory=KappaBounds)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    output_dir: str | None = None
    check: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        sampler = d.get("sampler", {}) or {}
        if "guidance_interval" in sampler:
            sampler = {**sampler, "guidance_interval": tuple(sampler["guidance_interval"])}
        out = cls(
            name=d.get("name", "experiment"),
            seed=int(d.get("seed", 0)),
            schedule=d.get("schedule", "mixed"),
            bounds=_build(KappaBounds, d.get("bounds"), "bounds"),
            dataset=_build(DatasetConfig, d.get("dataset"), "dataset"),
            training=_build(TrainingConfig, d.get("training"), "training"),
            sampler=_build(SamplerConfig, sampler, "sampler"),
            sampling=_build(SamplingConfig, d.get("sampling"), "sampling"),
            output_dir=d.get("output_dir"),
            check=d.get("check", {}) or {},
        )
        try:
            make_schedule(out.schedule, PowerLawFit(-2.0, 1.0, 2), out.bounds)
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        return out

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"]["guidance_interval"] = list(self.sampler.guidance_interval)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in changes.items():
            section, _, name = key.partition("__")
            if name:
                d[section][name] = value
            else:
                d[section] = value
        return ExperimentConfig.from_dict(d)


def _streams(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# data --------------------------------------------------------------------------------


@dataclass
class Dataset:
    fields: np.ndarray
    labels: list
    fits: list
    truth: dict

    @property
    def side(self) -> int:
        return self.fields.shape[-1]


def build_dataset(cfg: DatasetConfig, rng: np.random.Generator) -> Dataset:
    """Synthetic stationary Gaussian fields, or every channel of a NetPBM set.

    Per-instance power-law fits are computed from each instance's RAPSD.
    """
    if cfg.kind == "powerlaw":
        nf = cfg.side // 2
        stacks, labels, truth = [], [], {}
        for label, p in cfg.labels.items():
            fit = PowerLawFit(p["alpha"], p["beta"], nf)
            truth[str(label)] = fit
            stacks.append(synthesize_field(fit, cfg.side, rng, cfg.count))
            labels += [str(label)] * cfg.count
        fields = np.concatenate(stacks)
        fits = [fit_power_law(SpectrumCurve(p, bin_counts(cfg.side))) for p in rapsd_batch(fields)]
        return Dataset(fields, labels, fits, truth)
    root = Path(cfg.image_dir)
    paths = sorted(p for p in root.rglob("*") if p.suffix.lower() in (".pgm", ".ppm"))
    if not paths:
        raise ConfigError(f"dataset: no .pgm/.ppm images under {root}")
    fields, labels, fits = [], [], []
    for path in paths:
        img = tensorio.load_image(path)
        fit = fit_power_law(rapsd(img))
        label = path.parent.name if path.parent != root else "0"
        for c in range(img.channels):
            fields.append(img.channel(c))
            labels.append(label)
            fits.append(fit)
    sides = {f.shape[0] for f in fields}
    if len(sides) != 1:
        raise ConfigError(f"dataset: images must share one side, got {sorted(sides)}")
    return Dataset(np.stack(fields), labels, fits, {})


def mean_pool(x, factor: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n % factor:
        raise ValueError(f"side {n} not divisible by {factor}")
    m = n // factor
    return x.reshape(x.shape[:-2] + (m, factor, m, factor)).mean(axis=(-3, -1))


# metrics ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpectralDistance:
    """Per-bin ``log(Psi_gen / Psi_ref)`` over ``k = 1..N_f``; summary is the median magnitude."""

    log_ratio: np.ndarray

    @property
    def summary(self) -> float:
        return float(np.median(np.abs(self.log_ratio)))


def _bins(source) -> np.ndarray:
    if isinstance(source, PowerLawFit):
        return source(np.arange(1, source.nyquist + 1))
    if isinstance(source, SpectrumCurve):
        return source.power[1:]
    return np.asarray(source, dtype=np.float64)


def spectral_distance(generated, reference) -> SpectralDistance:
    """Compare spectra given as curves, fits, or power arrays over ``k = 1..N_f``."""
    g, r = _bins(generated), _bins(reference)
    if g.shape != r.shape:
        raise ValueError(f"spectra disagree on bins: {g.shape} vs {r.shape}")
    return SpectralDistance(np.log(g) - np.log(r))


# training ------------------------------------------------------------------------------


@dataclass
class TrainingOutcome:
    loss_trace: list
    denoiser: SpectralDenoiser
    gmm: GmmParams | None
    fits: list
    lambdas: np.ndarray
    instance_endpoints: np.ndarray
    initial_eval_loss: float
    final_eval_loss: float


def _instance_schedules(kind, fits, bounds):
    if kind == "fixed_median":
        shared = median_schedule(fits, bounds)
        return [shared] * len(fits)
    if kind == "cosine":
        shared = ScheduleSpec("cosine")
        return [shared] * len(fits)
    return [make_schedule(kind, f, bounds) for f in fits]


def _init_log_power(mode, data: Dataset):
    nf = data.side // 2
    if mode == "flat":
        return np.zeros(nf)
    if mode == "median_fit":
        alpha = float(np.median([f.alpha for f in data.fits]))
        beta = float(np.median([f.beta for f in data.fits]))
        return PowerLawFit(alpha, beta, nf).log_power(np.arange(1, nf + 1))
    raise ConfigError(f"training.init must be 'flat' or 'median_fit', got {mode!r}")


def run_training(config: ExperimentConfig) -> TrainingOutcome:
    """Training loop: per-instance RAPSD -> fit -> schedule -> noise -> loss."""
    data_rng, train_rng, eval_rng = _streams(config.seed, 3)
    data = build_dataset(config.dataset, data_rng)
    specs = _instance_schedules(config.schedule, data.fits, config.bounds)
    tc = config.training

    # fixed evaluation draws so initial and final losses are comparable
    m = len(data.fields)
    idx = eval_rng.integers(0, m, size=tc.eval_draws)
    t_eval = eval_rng.uniform(0.0, 1.0, size=tc.eval_draws)
    lam = np.array([specs[i].lam(t) for i, t in zip(idx, t_eval)])
    w = np.array([loss_weight(t, specs[i], tc.bias) for i, t in zip(idx, t_eval)])
    a, s = alpha_sigma(lam)
    x0 = data.fields[idx]
    xt = a[:, None, None] * x0 + s[:, None, None] * eval_rng.standard_normal(x0.shape)

    def eval_loss(psi):
        return denoiser_loss_and_grad(psi, x0, xt, a, s, w)[0]

    psi0 = _init_log_power(tc.init, data)
    result = train_spectral_denoiser(
        data.fields, specs, epochs=0, lr=tc.learning_rate, bias=tc.bias, rng=train_rng,
        init=psi0, batch_size=tc.batch_size, max_steps=tc.steps,
    )
    gmm = None
    counts = {lab: data.labels.count(lab) for lab in set(data.labels)}
    if min(counts.values()) >= tc.gmm_components:
        gmm, _ = fit_gmm(zip(data.labels, data.fits), tc.gmm_components, GmmFitConfig(seed=config.seed))
    outcome = TrainingOutcome(
        loss_trace=result.loss_trace,
        denoiser=result.denoiser,
        gmm=gmm,
        fits=data.fits,
        lambdas=np.asarray(result.lambdas),
        instance_endpoints=np.array([sp.endpoints for sp in specs]),
        initial_eval_loss=eval_loss(psi0),
        final_eval_loss=eval_loss(result.denoiser.log_power),
    )
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss_trace.csv").write_text(loss_trace_csv(outcome.loss_trace))
        (out / "denoiser.json").write_text(json.dumps(outcome.denoiser.to_dict()))
        (out / "fits.json").write_text(json.dumps(
            [{"label": lab, **f.to_dict()} for lab, f in zip(data.labels, data.fits)]
        ))
        if gmm is not None:
            gmm.save(out / "gmm.json")
        (out / "training_summary.json").write_text(json.dumps({
            "steps": len(outcome.loss_trace),
            "initial_eval_loss": outcome.initial_eval_loss,
            "final_eval_loss": outcome.final_eval_loss,
        }, indent=2))
    return outcome


def loss_trace_csv(trace) -> str:
    lines = ["step,loss"] + [f"{i},{float(v)!r}" for i, v in enumerate(trace)]
    return "\n".join(lines) + "\n"


# sampling ---------------------------------------------------------------------------


@dataclass
class SamplingOutcome:
    samples: dict
    fits: dict
    distances: dict
    reference: dict

    @property
    def summary(self) -> float:
        return float(np.mean([d.summary for d in self.distances.values()]))


def _reference_spectra(config, gmm):
    """Per-label target spectra: ground truth when known, else the GMM's mean feature."""
    ds = config.dataset
    if ds.kind == "powerlaw":
        return {str(k): PowerLawFit(v["alpha"], v["beta"], ds.side // 2) for k, v in ds.labels.items()}
    if gmm is None:
        raise ConfigError("image datasets need a GMM (sampling.gmm_path) for reference spectra")
    return {
        lab: fit_from_feature(gmm[lab].weights @ gmm[lab].means, gmm.nyquist) for lab in gmm.labels
    }


def run_sampling(config: ExperimentConfig, gmm: GmmParams | None = None,
                 denoiser: SpectralDenoiser | None = None) -> SamplingOutcome:
    """Sampling loop: draw a spectrum, build its schedule, run the chain.

    Samples of one label are generated one chain at a time, sample ``j`` using
    its own random stream, so results do not depend on batching.
    """
    sc = config.sampling
    if sc.spectrum == "gmm" and gmm is None:
        if not sc.gmm_path:
            raise ConfigError("sampling.spectrum='gmm' needs sampling.gmm_path or a fitted sampler")
        gmm = GmmParams.load(sc.gmm_path)
    if sc.denoiser == "learned" and denoiser is None:
        if not sc.denoiser_path:
            raise ConfigError("sampling.denoiser='learned' needs sampling.denoiser_path")
        denoiser = SpectralDenoiser.from_dict(json.loads(Path(sc.denoiser_path).read_text()))
    reference = _reference_spectra(config, gmm)
    side = config.dataset.side if config.dataset.kind == "powerlaw" else 2 * gmm.nyquist
    uncond = fit_from_feature(np.mean([feature_from_fit(f) for f in reference.values()], axis=0), side // 2)
    median_spec = None
    if config.schedule == "fixed_median":
        median_spec = median_schedule(reference.values(), config.bounds)

    labels = sorted(reference)
    label_seqs = np.random.SeedSequence(config.seed).spawn(len(labels))
    samples, fits_used, distances = {}, {}, {}
    for label, label_seq in zip(labels, label_seqs):
        spec_seq, chain_seq = label_seq.spawn(2)
        spec_rng = np.random.default_rng(spec_seq)
        chain_seeds = chain_seq.spawn(sc.count)
        out, used = [], []
        for j in range(sc.count):
            fit = reference[label] if sc.spectrum == "oracle" else sample_spectrum(gmm, label, spec_rng)
            if sc.manipulate_factor != 1.0:
                fit = manipulate_spectrum(fit, sc.manipulate_factor)
            used.append(fit)
            if median_spec is not None:
                spec = median_spec
            elif config.schedule == "cosine":
                spec = ScheduleSpec("cosine")
            else:
                spec = make_schedule(config.schedule, fit, config.bounds)
            model = denoiser if denoiser is not None else WienerDenoiser(fit, uncond)
            x = sample_chain(config.sampler, spec, model, np.random.default_rng(chain_seeds[j]),
                             (side, side), label=label)
            out.append(x)
        stack = np.stack(out)
        samples[label] = stack
        fits_used[label] = used
        distances[label] = spectral_distance(rapsd_batch(stack).mean(axis=0)[1:], reference[label])
    outcome = SamplingOutcome(samples, fits_used, distances, reference)
    if config.output_dir:
        out_dir = Path(config.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for label, stack in samples.items():
            tensorio.save_array(stack, out_dir / f"samples_{label}.tns")
        (out_dir / "sampling_summary.json").write_text(json.dumps({
            "distance": outcome.summary,
            "per_label": {k: d.summary for k, d in distances.items()},
            "spectra": {k: [f.to_dict() for f in v] for k, v in fits_used.items()},
        }, indent=2))
    return outcome


def check_outcome(config: ExperimentConfig, distance: float) -> None:
    """Raise :class:`CheckFailed` if ``distance`` violates ``config.check``."""
    limit = config.check.get("max_distance")
    if limit is not None and not distance <= limit:
        raise CheckFailed(f"spectral distance {distance:.4g} exceeds max_distance {limit}")


# noised grid ---------------------------------------------------------------------


@dataclass
class GridEntry:
    kind: str
    t: float
    lam: float
    image: Path
    tensor: Path
    rapsd: Path
    noised: np.ndarray = field(repr=False)
    predicted: SpectrumCurve = field(repr=False)


def noised_grid(image_path, kinds, ts, out_dir, seed: int = 0, bounds: KappaBounds = KappaBounds()):
    """Noise one image at every ``(kind, t)``; write images, tensors and RAPSD CSVs.

    Also writes ``grid.p[gp]m`` with one row per kind and one column per t.
    """
    img = tensorio.load_image(image_path)
    fit = fit_power_law(rapsd(img))
    clean = rapsd(img)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    ext = "pgm" if img.channels == 1 else "ppm"
    for kind in kinds:
        spec = make_schedule(kind, None if kind == "cosine" else fit, bounds)
        for t in ts:
            x_t, _ = forward_noise(img.data, t, spec, rng)
            lam = float(spec.lam(t))
            a, s = alpha_sigma(lam)
            stem = f"{kind}_t{t:.3f}"
            noised = tensorio.ImageTensor(x_t)
            tensorio.save_image(noised, out / f"{stem}.{ext}")
            tensorio.save_tensor(noised, out / f"{stem}.tns")
            rapsd(noised).save(out / f"{stem}_rapsd.csv")
            entries.append(GridEntry(kind, float(t), lam, out / f"{stem}.{ext}", out / f"{stem}.tns",
                                     out / f"{stem}_rapsd.csv", x_t, predicted_noised_rapsd(clean, float(a), float(s))))
    rows = [np.concatenate([e.noised for e in entries[i * len(ts):(i + 1) * len(ts)]], axis=1)
            for i in range(len(kinds))]
    tensorio.write_pnm(out / f"grid.{ext}", tensorio.denormalize(np.concatenate(rows, axis=0)))
    with open(out / "grid.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "t", "lambda", "image", "rapsd"])
        for e in entries:
            writer.writerow([e.kind, repr(e.t), repr(e.lam), e.image.name, e.rapsd.name])
    return entries


# sweeps and trends -------------------------------------------------------------------


def nfe_sweep(config: ExperimentConfig, step_counts, seeds: int = 3, out_path=None):
    """Mean spectral distance over ``seeds`` runs for each step count."""
    rows = []
    for n in step_counts:
        dists = [
            run_sampling(config.replace(sampler__steps=int(n), seed=config.seed + k, output_dir=None)).summary
            for k in range(seeds)
        ]
        rows.append((int(n), float(np.mean(dists))))
    text = "steps,distance\n" + "".join(f"{n},{d!r}\n" for n, d in rows)
    if out_path:
        Path(out_path).write_text(text)
    return rows, text


def resolution_trend(scenes, sides=(32, 64, 128), bounds: KappaBounds = KappaBounds(), grid: int = 1024):
    """Median mixed schedules per resolution, mean-pooling from the largest side.

    ``scenes`` is a stack ``(M, S, S)`` with ``S`` the largest side. Returns
    ``(t, {side: median lambda})``.
    """
    scenes = np.asarray(scenes, dtype=np.float64)
    top = scenes.shape[-1]
    t = np.linspace(0.0, 1.0, grid)
    curves = {}
    for side in sorted(sides):
        if top % side:
            raise ValueError(f"side {side} does not divide source side {top}")
        pooled = mean_pool(scenes, top // side) if side != top else scenes
        fits = [fit_power_law(SpectrumCurve(p, bin_counts(side))) for p in rapsd_batch(pooled)]
        curves[side] = np.median(np.stack([lambda_mixed(t, f, bounds) for f in fits]), axis=0)
    return t, curves


def resolution_trend_csv(t, curves) -> str:
    out = io.StringIO()
    sides = sorted(curves)
    out.write("t," + ",".join(f"lambda_{s}" for s in sides) + "\n")
    for i, ti in enumerate(t):
        out.write(repr(float(ti)) + "," + ",".join(repr(float(curves[s][i])) for s in sides) + "\n")
    return out.getvalue()
