"""
Main Noise Lab class
Coordinates synthesis, training, estimation, evaluation, denoising and reporting runs.
"""

import logging
import os
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from .baselines import DctBlockSpec, global_std_from_map, local_dct_estimate
from .config import DEFAULT_CHECKPOINT_NAME, MIN_IMAGE_SIZE, Config
from .core import Prng, Raster, SigmaMap
from .dct_denoiser import DenoiseSpec, denoise
from .errors import DimensionError, UsageError
from .estimator import EstimatorConfig, EstimatorParams, TrainSchedule, estimate, load_estimator, save_estimator, train
from .fileio import (load_image, load_raster, load_sigma_map, read_raster_size, save_float_raster, save_raster,
                     save_sigma_map)
from .metrics import (EvalRecord, EvalReport, check_threshold, map_error_norms, psnr, relative_map_error,
                      relative_std_error, ssim)
from .noise_synth import NoiseSpec, TestMapModel, apply_noise, awgn_map, generate_test_map, scale_map_to_target
from .patch_pipeline import Corpus, read_manifest
from .report import (DENOISE_METHOD, DENOISE_REPORT_FILE, EVAL_REPORT_FILE, LOSS_LOG_FILE, NOISY_METHOD,
                     build_tables, default_report_paths, load_loss_log, load_records)
from .utils import ensure_dir, print_summary, write_provenance

logger = logging.getLogger(__name__)

SYNTH_MANIFEST_FILE = "synth_manifest.csv"
SYNTH_COLUMNS = ["image_id", "clean_path", "model", "sigma_av", "clip", "noisy_path", "raw_path", "map_path", "seed",
                 "stream"]
ESTIMATES_FILE = "estimates.csv"
MAP_SOURCES = ("true", "file", "checkpoint", "local_dct")

Estimator = Callable[[Raster], SigmaMap]


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _resolve(path: str, base: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base, path)


def read_suite(path: str) -> pd.DataFrame:
    """Synthesized test suite manifest with file paths resolved against its directory"""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"Test suite manifest not found: {path}")
    suite = pd.read_csv(path)
    missing = [c for c in SYNTH_COLUMNS if c not in suite.columns]
    if missing:
        raise UsageError(f"{path}: not a synth manifest (missing columns {', '.join(missing)})")
    base = os.path.dirname(os.path.abspath(path))
    for column in ("clean_path", "noisy_path", "raw_path", "map_path"):
        suite[column] = [_resolve(p, base) for p in suite[column]]
    return suite


class NoiseLab:
    """
    Main class for sigma-map experiments
    One method per CLI verb; every output lands under config.out_dir next to a provenance record
    """

    def __init__(self, config: Config = None, progress: bool = True, verbose: bool = True):
        """Initialize the lab with a validated configuration"""
        self.config = config or Config()
        self.config.validate()
        self.progress = progress
        self.verbose = verbose

    # Shared settings

    @property
    def out_dir(self) -> str:
        return self.config.out_dir

    def _path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def noise_spec(self, clip: Optional[bool] = None) -> NoiseSpec:
        noise = self.config.values["noise"]
        return NoiseSpec(R=noise["R"], clip=noise["clip"] if clip is None else clip,
                         color_shared_map=noise["color_shared_map"])

    def estimator_config(self) -> EstimatorConfig:
        est = self.config.values["estimator"]
        return EstimatorConfig(channels=tuple(est["channels"]), blocks=est["blocks"],
                               input_channels=est["input_channels"], beta1=est["beta1"],
                               beta2=est["beta2"], epsilon=est["epsilon"])

    def schedule(self) -> TrainSchedule:
        s = self.config.values["schedule"]
        return TrainSchedule(total_iterations=s["iterations"], lr_stage1=s["lr_stage1"],
                             lr_stage2=s["lr_stage2"], batch=s["batch"], patch=s["patch"],
                             stage1_fraction=s["stage1_fraction"], checkpoint_every=s["checkpoint_every"],
                             log_every=s["log_every"])

    def block_spec(self) -> DctBlockSpec:
        return DctBlockSpec(**self.config.values["baseline"])

    def denoise_spec(self) -> DenoiseSpec:
        d = self.config.values["denoise"]
        return DenoiseSpec(step=d["step"], threshold_factor=d["threshold_factor"])

    def _manifest(self, manifest: Optional[str]) -> str:
        manifest = manifest or self.config.get("global", "manifest")
        if not manifest:
            raise UsageError("A corpus manifest is required (--manifest or [global] manifest)")
        return manifest

    def _suite_path(self, suite: Optional[str]) -> str:
        return suite or self._path(SYNTH_MANIFEST_FILE)

    def _bar(self, items, desc: str):
        return tqdm(items, desc=desc, unit="img", disable=not self.progress)

    def _estimators(self, methods: Sequence[str], checkpoint: Optional[str]) -> Dict[str, Estimator]:
        """Name -> sigma-map estimator; 'truth' is resolved by the caller"""
        estimators: Dict[str, Estimator] = {}
        for method in methods:
            if method == "cnn":
                if not checkpoint:
                    raise UsageError("The cnn estimator needs --checkpoint")
                params, est_config = load_estimator(checkpoint)
                tile = self.config.get("estimator", "tile")
                estimators["cnn"] = lambda image, p=params, c=est_config: estimate(p, c, image, tile=tile)
            elif method == "local_dct":
                spec = self.block_spec()
                estimators["local_dct"] = lambda image, s=spec: local_dct_estimate(image, s)
            elif method != "truth":
                raise UsageError(f"Unknown estimation method {method!r}")
        return estimators

    # Verbs

    def synth(self, manifest: Optional[str] = None) -> pd.DataFrame:
        """
        Generate the test suite: one noisy image and ground-truth map per (image, model, sigma_av)

        Args:
            manifest: Plain-text list of clean test images

        Returns:
            The suite manifest (also written to synth_manifest.csv)
        """
        noise = self.config.values["noise"]
        models, levels = list(noise["models"]), self.config.float_list("noise", "sigma_av")
        if not models:
            raise UsageError("At least one map model is required")
        if not levels:
            raise UsageError("At least one sigma_av value is required")
        images = read_manifest(self._manifest(manifest))
        stems = [_stem(p) for p in images]
        if len(set(stems)) != len(stems):
            raise UsageError("Test image file names must be unique (they name the outputs)")
        for path in images:
            width, height, _ = read_raster_size(path)
            if min(width, height) < MIN_IMAGE_SIZE:
                raise DimensionError(f"{path}: {width}x{height} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")

        for folder in ("noisy", "raw", "maps"):
            ensure_dir(self._path(folder))
        spec = self.noise_spec()
        rng = Prng(self.config.seed)
        if self.verbose:
            print(f"Synthesizing {len(images) * len(models) * len(levels):,} noisy images "
                  f"({len(images)} images x {len(models)} models x {len(levels)} levels)")

        rows, stream = [], 0
        for path in self._bar(images, "Synthesizing"):
            clean = load_raster(path)
            for model_id in models:
                model = TestMapModel(model_id, jitter=noise["jitter"])
                for sigma_av in levels:
                    child = rng.child(stream)
                    image_id = f"{_stem(path)}_{model_id}_s{sigma_av:g}"
                    shape = generate_test_map(model, clean.width, clean.height, child)
                    truth = scale_map_to_target(shape, sigma_av)
                    noisy = apply_noise(clean, truth, spec, child)
                    noisy_path = os.path.join("noisy", f"{image_id}.png")
                    raw_path = os.path.join("raw", f"{image_id}.npy")
                    map_path = os.path.join("maps", f"{image_id}.smap")
                    save_raster(noisy, self._path(noisy_path))
                    save_float_raster(noisy, self._path(raw_path))
                    save_sigma_map(truth, self._path(map_path))
                    rows.append({"image_id": image_id, "clean_path": path, "model": model_id,
                                 "sigma_av": sigma_av, "clip": spec.clip, "noisy_path": noisy_path,
                                 "raw_path": raw_path, "map_path": map_path, "seed": self.config.seed,
                                 "stream": stream})
                    stream += 1

        suite = pd.DataFrame(rows, columns=SYNTH_COLUMNS)
        suite_path = self._path(SYNTH_MANIFEST_FILE)
        suite.to_csv(suite_path, index=False, float_format="%.10g", lineterminator="\n")
        provenance = write_provenance(self.out_dir, "synth", self.config)
        if self.verbose:
            print_summary("synth", {"Images": len(images), "Models": ", ".join(models),
                                    "sigma_av levels": ", ".join(f"{s:g}" for s in levels),
                                    "Clipped": spec.clip, "Noisy images": len(suite)},
                          [suite_path, provenance])
        return suite

    def train(self, manifest: Optional[str] = None, checkpoint: Optional[str] = None,
              downscale: int = 1) -> Tuple[EstimatorParams, pd.DataFrame]:
        """
        Train the estimator on a corpus of clean images

        Args:
            manifest: Plain-text list of training images
            checkpoint: Optional checkpoint to resume from
            downscale: Corpus averaging factor applied on load

        Returns:
            Trained parameters and the loss log
        """
        corpus = Corpus.from_manifest(self._manifest(manifest), downscale=downscale)
        schedule = self.schedule()
        params, est_config = None, self.estimator_config()
        if checkpoint:
            params, est_config = load_estimator(checkpoint)
            logger.info("Resuming from %s at iteration %d", checkpoint, params.iteration)

        log: List[Dict[str, float]] = []

        def record(iteration: int, lr: float, loss: float):
            log.append({"iteration": iteration, "lr": lr, "loss": loss})

        ensure_dir(self.out_dir)
        params = train(corpus, est_config, schedule, self.noise_spec(), Prng(self.config.seed),
                       params=params, on_step=record, checkpoint_dir=self._path("checkpoints"),
                       brightness_source=self.config.get("noise", "brightness_source"),
                       progress=self.progress)

        loss_log = pd.DataFrame(log, columns=["iteration", "lr", "loss"])
        loss_path = self._path(LOSS_LOG_FILE)
        loss_log.to_csv(loss_path, index=False, float_format="%.10g", lineterminator="\n")
        checkpoint_path = self._path(DEFAULT_CHECKPOINT_NAME)
        save_estimator(params, est_config, checkpoint_path)
        provenance = write_provenance(self.out_dir, "train", self.config,
                                      {"resumed_from": checkpoint, "iteration": params.iteration})
        if self.verbose:
            final = loss_log["loss"].iloc[-1] if len(loss_log) else float("nan")
            print_summary("train", {"Corpus images": len(corpus), "Iterations": params.iteration,
                                    "Final loss": float(final)},
                          [checkpoint_path, loss_path, provenance])
        return params, loss_log

    def estimate(self, inputs: Sequence[str], checkpoint: Optional[str] = None,
                 method: str = "cnn") -> pd.DataFrame:
        """Write one estimated sigma-map per input image to estimates/<stem>.smap"""
        if not inputs:
            raise UsageError("No input images given")
        if method == "truth":
            raise UsageError("'truth' is not an estimator")
        estimator = self._estimators([method], checkpoint)[method]
        ensure_dir(self._path("estimates"))
        rows = []
        for path in self._bar(list(inputs), "Estimating"):
            sigma_map = estimator(load_image(path))
            map_path = os.path.join("estimates", f"{_stem(path)}.smap")
            save_sigma_map(sigma_map, self._path(map_path))
            rows.append({"image_id": _stem(path), "path": path, "method": method,
                         "sigma_median": global_std_from_map(sigma_map), "map_path": map_path})
        frame = pd.DataFrame(rows, columns=["image_id", "path", "method", "sigma_median", "map_path"])
        csv_path = self._path(ESTIMATES_FILE)
        frame.to_csv(csv_path, index=False, float_format="%.10g", lineterminator="\n")
        provenance = write_provenance(self.out_dir, "estimate", self.config,
                                      {"method": method, "checkpoint": checkpoint})
        if self.verbose:
            print_summary("estimate", {"Method": method, "Images": len(frame)}, [csv_path, provenance])
        return frame

    def evaluate(self, methods: Sequence[str], checkpoint: Optional[str] = None, suite: Optional[str] = None,
                 awgn: bool = False, manifest: Optional[str] = None) -> EvalReport:
        """
        Score estimators against ground truth

        Map mode reads a synthesized suite and records eps_m per noisy image.
        AWGN mode noises clean images in memory with constant maps at every sigma_t,
        both without and with clipping, and records the median-of-map estimate.
        """
        if not methods:
            raise UsageError("No estimation method selected (use --checkpoint and/or --baseline)")
        estimators = self._estimators(methods, checkpoint)
        records = self._evaluate_awgn(methods, estimators, manifest) if awgn else \
            self._evaluate_maps(methods, estimators, suite)
        report = EvalReport(records, aggregation=self.config.get("metrics", "aggregation"))
        ensure_dir(self.out_dir)
        report_path = self._path(EVAL_REPORT_FILE)
        report.to_csv(report_path)
        provenance = write_provenance(self.out_dir, "evaluate", self.config,
                                      {"methods": list(methods), "awgn": awgn, "checkpoint": checkpoint})
        if self.verbose:
            stats: Dict[str, object] = {"Records": len(records), "Mode": "AWGN" if awgn else "sigma-map"}
            for row in report.aggregate().itertuples(index=False):
                value = row.eps if awgn else row.eps_m
                stats[f"{row.method} sigma={row.sigma:g}{' clipped' if row.clip else ''}"] = float(value)
            print_summary("evaluate", stats, [report_path, provenance])
        return report

    def _evaluate_maps(self, methods, estimators, suite: Optional[str]) -> List[EvalRecord]:
        frame = read_suite(self._suite_path(suite))
        records = []
        for row in self._bar(list(frame.itertuples(index=False)), "Evaluating"):
            if not os.path.isfile(row.map_path):
                raise FileNotFoundError(f"Ground-truth map missing: {row.map_path}")
            truth = load_sigma_map(row.map_path)
            noisy = load_image(row.raw_path)
            for method in methods:
                estimated = truth if method == "truth" else estimators[method](noisy)
                eps_m = relative_map_error([estimated], [truth])
                err_norm, truth_norm = map_error_norms(estimated, truth)
                records.append(EvalRecord(
                    image_id=row.image_id, method=method, sigma=float(row.sigma_av), model=row.model,
                    clip=bool(row.clip), eps_m=eps_m, map_err_norm=err_norm, map_truth_norm=truth_norm,
                    sigma_est=global_std_from_map(estimated),
                    within_threshold=check_threshold(eps_m),
                ))
        return records

    def _evaluate_awgn(self, methods, estimators, manifest: Optional[str]) -> List[EvalRecord]:
        images = read_manifest(self._manifest(manifest))
        levels = self.config.float_list("noise", "sigma_t")
        if not levels:
            raise UsageError("At least one sigma_t value is required")
        rng = Prng(self.config.seed)
        records, stream = [], 0
        for path in self._bar(images, "Evaluating AWGN"):
            clean = load_raster(path)
            for sigma_t in levels:
                truth = awgn_map(clean.width, clean.height, sigma_t)
                for clip in (False, True):
                    noisy = apply_noise(clean, truth, self.noise_spec(clip=clip), rng.child(stream))
                    stream += 1
                    for method in methods:
                        estimated = truth if method == "truth" else estimators[method](noisy)
                        sigma_est = global_std_from_map(estimated)
                        eps_m = relative_map_error([estimated], [truth])
                        err_norm, truth_norm = map_error_norms(estimated, truth)
                        records.append(EvalRecord(
                            image_id=_stem(path), method=method, sigma=sigma_t, sigma_kind="sigma_t",
                            clip=clip, eps_m=eps_m, map_err_norm=err_norm, map_truth_norm=truth_norm,
                            sigma_est=sigma_est,
                            eps=relative_std_error([sigma_est], sigma_t),
                            within_threshold=check_threshold(eps_m),
                        ))
        return records

    def denoise(self, map_sources: Sequence[str], checkpoint: Optional[str] = None,
                suite: Optional[str] = None, maps_dir: Optional[str] = None) -> EvalReport:
        """
        Denoise every suite image with each map source and score against the clean image

        Args:
            map_sources: Any of 'true', 'file', 'checkpoint', 'local_dct'
            checkpoint: Estimator checkpoint for the 'checkpoint' source
            suite: Synth manifest (default: <out>/synth_manifest.csv)
            maps_dir: Directory of <image_id>.smap files for the 'file' source

        Returns:
            EvalReport with one 'noisy' row and one row per map source for each image
        """
        if not map_sources:
            raise UsageError("At least one map source is required")
        unknown = [s for s in map_sources if s not in MAP_SOURCES]
        if unknown:
            raise UsageError(f"Unknown map source(s): {', '.join(unknown)}")
        estimators = self._estimators(
            (["cnn"] if "checkpoint" in map_sources else []) +
            (["local_dct"] if "local_dct" in map_sources else []), checkpoint)
        maps_dir = maps_dir or self._path("estimates")
        spec = self.denoise_spec()
        frame = read_suite(self._suite_path(suite))
        for source in map_sources:
            ensure_dir(self._path("denoised", source))

        records = []
        for row in self._bar(list(frame.itertuples(index=False)), "Denoising"):
            clean = load_raster(row.clean_path)
            noisy = load_image(row.raw_path)
            truth = load_sigma_map(row.map_path)
            base = dict(image_id=row.image_id, sigma=float(row.sigma_av), model=row.model, clip=bool(row.clip))
            records.append(EvalRecord(method=NOISY_METHOD, psnr=psnr(clean, noisy), ssim=ssim(clean, noisy), **base))
            for source in map_sources:
                sigma_map = self._map_for(source, row.image_id, noisy, truth, estimators, maps_dir)
                restored = denoise(noisy, sigma_map, spec)
                save_raster(restored, self._path("denoised", source, f"{row.image_id}.png"))
                err_norm, truth_norm = map_error_norms(sigma_map, truth)
                records.append(EvalRecord(
                    method=DENOISE_METHOD, map_source=source, psnr=psnr(clean, restored),
                    ssim=ssim(clean, restored), eps_m=relative_map_error([sigma_map], [truth]),
                    map_err_norm=err_norm, map_truth_norm=truth_norm, **base,
                ))

        report = EvalReport(records, aggregation=self.config.get("metrics", "aggregation"))
        report_path = self._path(DENOISE_REPORT_FILE)
        report.to_csv(report_path)
        provenance = write_provenance(self.out_dir, "denoise", self.config,
                                      {"map_sources": list(map_sources), "checkpoint": checkpoint})
        if self.verbose:
            stats = {}
            means = report.aggregate().groupby(["method", "map_source"], sort=True)[["psnr", "ssim"]].mean()
            for row in means.itertuples():
                method, source = row.Index
                label = source if method == DENOISE_METHOD else method
                stats[f"{label} PSNR (dB)"] = float(row.psnr)
                stats[f"{label} SSIM"] = float(row.ssim)
            print_summary("denoise", stats, [report_path, provenance])
        return report

    def _map_for(self, source: str, image_id: str, noisy: Raster, truth: SigmaMap,
                 estimators: Dict[str, Estimator], maps_dir: str) -> SigmaMap:
        if source == "true":
            return truth
        if source == "file":
            path = os.path.join(maps_dir, f"{image_id}.smap")
            if not os.path.isfile(path):
                raise FileNotFoundError(f"Estimated map missing: {path}")
            return load_sigma_map(path)
        if source == "checkpoint":
            return estimators["cnn"](noisy)
        return estimators["local_dct"](noisy)

    def report(self, paths: Optional[Sequence[str]] = None) -> Dict[str, pd.DataFrame]:
        """Pivot report CSVs (and the run's loss log) into tables, write report_<name>.csv and print them"""
        paths = list(paths) if paths else default_report_paths(self.out_dir)
        loss_path = self._path(LOSS_LOG_FILE)
        loss_log = load_loss_log(loss_path) if os.path.isfile(loss_path) else None
        if not paths and loss_log is None:
            raise FileNotFoundError(f"No report files found in {self.out_dir}")
        tables = build_tables(load_records(paths), self.config.get("metrics", "aggregation"), loss_log)
        ensure_dir(self.out_dir)
        outputs = []
        for name, table in tables.items():
            path = self._path(f"report_{name}.csv")
            table.to_csv(path, float_format="%.6g", lineterminator="\n")
            outputs.append(path)
            if self.verbose:
                print(f"\n{name}:")
                print(table.to_string(float_format=lambda v: f"{v:.4g}"))
        if self.verbose:
            print_summary("report", {"Report files": len(paths), "Tables": len(tables)}, outputs)
        return tables
