import csv
import json
import time
from pathlib import Path

import numpy as np
import structlog
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from src.geoblend.factorization import factorize
from src.geoblend.forward import observe
from src.geoblend.inference import (
    count_modes,
    density_estimate,
    estimate_blend_range,
    fit_ml,
    posterior_mean,
    relative_error,
    sample_gmrf,
)
from src.geoblend.models import (
    FitResult,
    HyperParams,
    ModelKind,
    ObservationSet,
    PosteriorResult,
    SineInterface,
)
from src.geoblend.prior import build_model
from src.harness.config import ExperimentConfig, ExperimentKind, config_hash, field_of
from src.harness.fields import common_scale, render_heatmap, write_field

logger = structlog.get_logger(__name__)

Row = dict[str, str | int | float | bool | None]


class RunManifest(BaseModel):
    """
    Reproducible record of a run: config, seed, per-replicate metrics and their summary.

    Wall-clock timings are kept out of the manifest (see timings.json) so that reruns with
    the same config and seed write identical bytes.
    """

    name: str
    kind: ExperimentKind
    config_hash: str
    seed: int
    replicates: int
    config: dict
    summary: dict[str, float | int]
    rows: list[Row]

    model_config = ConfigDict(frozen=True)


class ReplicateOutcome(BaseModel):
    rows: list[Row]
    seconds: float


def _csv_cell(value: str | int | float | bool | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _correlation_columns(prefix: str, n_fields: int) -> list[str]:
    return [
        f"{prefix}_{i + 1}{j + 1}" for i in range(n_fields) for j in range(i + 1, n_fields)
    ]


class ExperimentRunner:
    """
    Runs an experiment config replicate by replicate: simulate the truth, observe it, fit the
    models, predict, and write the manifest, the results table, field files and heatmaps.

    Replicate r draws its truth and noise from SeedSequence(seed).spawn(replicates)[r], so
    results do not depend on the number of workers.

    Attributes:
        config: Validated experiment config.
        output_dir: Directory receiving all outputs.
        threads: Number of joblib workers for the replicates.
    """

    def __init__(self, config: ExperimentConfig, output_dir: Path, threads: int = 1):
        self.config = config
        self.output_dir = Path(output_dir)
        self.threads = threads

    @property
    def n_fields(self) -> int:
        return self.config.truth.n_fields

    def _seeds(self, replicate: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
        child = np.random.SeedSequence(self.config.seed).spawn(self.config.replicates)[replicate]
        truth_seed, noise_seed = child.spawn(2)
        return truth_seed, noise_seed

    def simulate(self, replicate: int) -> tuple[np.ndarray, ObservationSet]:
        """
        Draw the generating field and its observations for one replicate.

        :return: (truth field vector, observation set).
        """
        config = self.config
        truth_seed, noise_seed = self._seeds(replicate)
        model = build_model(config.model, config.truth_hyper(), config.grid, config.bc)
        truth = sample_gmrf(factorize(model.Q), truth_seed)
        operator = config.observation.operator(config.grid, self.n_fields)
        obs = observe(operator, truth, noise_seed, truth_ref=f"replicate-{replicate}")
        return truth, obs

    def fit(self, obs: ObservationSet, kind: ModelKind) -> FitResult | None:
        """Maximum-likelihood fit of one model, or None when estimation is switched off."""
        if not self.config.fit.estimate:
            return None
        return fit_ml(
            [obs],
            kind,
            self.config.grid,
            self.config.initial_hyper(kind),
            bc=self.config.bc,
            maxiter=self.config.fit.maxiter,
            gtol=self.config.fit.gtol,
        )

    def predict(
        self,
        obs: ObservationSet,
        hyper: HyperParams,
        kind: ModelKind,
        truth: np.ndarray | None = None,
    ) -> PosteriorResult:
        """
        Posterior mean under the given hyperparameters; a lambda2 parametrization is turned
        into tau2 = lambda2 / sigma2 with the profiled noise variance.
        """
        if hyper.tau2 is None:
            sigma2 = hyper.sigma2
            tau2 = hyper.lambda2 / sigma2
        else:
            sigma2 = hyper.sigma2 or self.config.noise_sigma2
            tau2 = hyper.tau2
        model = build_model(
            kind, hyper.model_copy(update={"tau2": tau2}), self.config.grid, self.config.bc
        )
        noisy = obs.model_copy(
            update={"operator": obs.operator.model_copy(update={"sigma2": sigma2})}
        )
        return posterior_mean(model.Q, noisy, truth)

    def _hyper_for(self, fit: FitResult | None) -> HyperParams:
        return fit.estimate if fit is not None else self.config.truth_hyper()

    def _save_panels(
        self, replicate: int, truth: np.ndarray, panels: dict[str, np.ndarray]
    ) -> None:
        if replicate >= self.config.save_fields:
            return
        grid = self.config.grid
        directory = self.output_dir / "fields" / f"replicate-{replicate:03d}"
        meta = {"experiment": self.config.name, "replicate": replicate}
        write_field(directory / "truth", truth, grid, self.n_fields, meta)
        for label, values in panels.items():
            write_field(directory / label, values, grid, self.n_fields, meta | {"panel": label})

        images = {"truth": field_of(truth, grid, 0)} | {
            label: field_of(values, grid, 0) for label, values in panels.items()
        }
        scale = common_scale(*images.values())
        for label, image in images.items():
            render_heatmap(
                image, directory / f"{label}-field1", shared_scale=scale, png=self.config.png
            )

    def _reconstruction_replicate(self, replicate: int) -> list[Row]:
        truth, obs = self.simulate(replicate)
        rows: list[Row] = []
        panels: dict[str, np.ndarray] = {}
        for kind in self.config.fit_models:
            fit = self.fit(obs, kind)
            hyper = self._hyper_for(fit)
            posterior = self.predict(obs, hyper, kind, truth)
            per_field = relative_error(posterior.mean, truth, self.n_fields)
            row: Row = {"replicate": replicate, "model": str(kind)}
            row |= {f"err_field{k + 1}": float(e) for k, e in enumerate(per_field)}
            row |= {
                "err_joint": float(posterior.relative_error),
                "kappa2": hyper.kappa2,
                "lambda2": hyper.lambda2,
                "sigma2": hyper.sigma2,
                "loglik": fit.loglik if fit else None,
                "converged": fit.converged if fit else True,
            }
            rows.append(row)
            panels[f"prediction-{kind}"] = posterior.mean
            logger.info(
                "Reconstructed replicate",
                replicate=replicate,
                model=str(kind),
                err_field1=row["err_field1"],
            )
        self._save_panels(replicate, truth, panels)
        return rows

    def _identifiability_replicate(self, replicate: int) -> list[Row]:
        _, obs = self.simulate(replicate)
        kind = self.config.fit_models[0]
        fit = fit_ml(
            [obs],
            kind,
            self.config.grid,
            self.config.initial_hyper(kind),
            bc=self.config.bc,
            maxiter=self.config.fit.maxiter,
            gtol=self.config.fit.gtol,
        )
        estimate = fit.estimate
        tau2 = estimate.tau2 if estimate.tau2 is not None else estimate.lambda2 / estimate.sigma2
        row: Row = {"replicate": replicate}
        row |= dict(zip(_correlation_columns("above", self.n_fields), estimate.rho_above))
        row |= dict(zip(_correlation_columns("below", self.n_fields), estimate.below))
        row |= {
            "kappa2": estimate.kappa2,
            "tau2": tau2,
            "loglik": fit.loglik,
            "converged": fit.converged,
        }
        logger.info("Estimated replicate", replicate=replicate, loglik=fit.loglik)
        return [row]

    def _blend_range_replicate(self, replicate: int) -> list[Row]:
        config = self.config
        search = config.blend_search
        truth, obs = self.simulate(replicate)
        guess = config.guess_hyper()
        estimate = estimate_blend_range(
            obs,
            guess,
            config.model,
            config.grid,
            (search.lo, search.hi),
            n_grid=search.n_grid,
            bc=config.bc,
            profile=False,
        )
        no_blend = self.predict(obs, guess.model_copy(update={"blend_range": 0.0}), config.model, truth)
        blended = self.predict(
            obs, guess.model_copy(update={"blend_range": estimate.range}), config.model, truth
        )
        err_no_blend = float(relative_error(no_blend.mean, truth, self.n_fields)[0])
        err_blend = float(relative_error(blended.mean, truth, self.n_fields)[0])

        interface = config.truth.interface
        amplitude = abs(interface.amplitude) if isinstance(interface, SineInterface) else 0.0
        row: Row = {
            "replicate": replicate,
            "blend_range": estimate.range,
            "loglik": estimate.loglik,
            "covers_interface": estimate.range >= amplitude,
            "err_no_blend": err_no_blend,
            "err_blend": err_blend,
            "improvement": err_no_blend - err_blend,
        }
        logger.info("Estimated blend range", replicate=replicate, blend_range=estimate.range)
        self._save_panels(
            replicate, truth, {"prediction-no-blend": no_blend.mean, "prediction-blend": blended.mean}
        )
        return [row]

    def run_replicate(self, replicate: int) -> ReplicateOutcome:
        start = time.perf_counter()
        handlers = {
            ExperimentKind.RECONSTRUCTION: self._reconstruction_replicate,
            ExperimentKind.IDENTIFIABILITY: self._identifiability_replicate,
            ExperimentKind.BLEND_RANGE: self._blend_range_replicate,
        }
        rows = handlers[self.config.kind](replicate)
        return ReplicateOutcome(rows=rows, seconds=time.perf_counter() - start)

    def _summarize(self, rows: list[Row]) -> dict[str, float | int]:
        summary: dict[str, float | int] = {}
        if self.config.kind == ExperimentKind.RECONSTRUCTION:
            by_model = {
                str(kind): [r for r in rows if r["model"] == str(kind)]
                for kind in self.config.fit_models
            }
            for model, model_rows in by_model.items():
                summary[f"mean_err_field1_{model}"] = float(
                    np.mean([r["err_field1"] for r in model_rows])
                )
                summary[f"mean_err_joint_{model}"] = float(
                    np.mean([r["err_joint"] for r in model_rows])
                )
            models = list(by_model)
            if len(models) > 1:
                first, last = by_model[models[0]], by_model[models[-1]]
                summary[f"wins_{models[0]}_over_{models[-1]}"] = int(
                    sum(a["err_field1"] < b["err_field1"] for a, b in zip(first, last))
                )
        elif self.config.kind == ExperimentKind.IDENTIFIABILITY:
            columns = _correlation_columns("above", self.n_fields) + _correlation_columns(
                "below", self.n_fields
            )
            for column in columns + ["kappa2", "tau2"]:
                summary[f"mean_{column}"] = float(np.mean([r[column] for r in rows]))
            if len(rows) > 1:
                for column in columns:
                    values = [r[column] for r in rows]
                    if np.ptp(values) > 0:
                        _, density = density_estimate(values, -1.0, 1.0)
                        summary[f"modes_{column}"] = count_modes(density)
        else:
            summary["mean_blend_range"] = float(np.mean([r["blend_range"] for r in rows]))
            summary["fraction_covering"] = float(np.mean([r["covers_interface"] for r in rows]))
            summary["mean_improvement"] = float(np.mean([r["improvement"] for r in rows]))
        return summary

    def _write_densities(self, rows: list[Row]) -> None:
        columns = _correlation_columns("above", self.n_fields) + _correlation_columns(
            "below", self.n_fields
        )
        curves: dict[str, np.ndarray] = {}
        points = None
        for column in columns:
            values = [r[column] for r in rows]
            if np.ptp(values) > 0:
                points, curves[column] = density_estimate(values, -1.0, 1.0)
        if points is None:
            return
        with open(self.output_dir / "densities.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["point", *curves])
            for k, point in enumerate(points):
                writer.writerow([repr(float(point)), *(repr(float(c[k])) for c in curves.values())])

    def _write_results(self, rows: list[Row]) -> None:
        columns = list(dict.fromkeys(key for row in rows for key in row))
        with open(self.output_dir / "results.csv", "w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow(
                    [_csv_cell(row.get(c)) for c in columns]
                )

    def run(self) -> RunManifest:
        """
        Run every replicate and write manifest.json, results.csv and timings.json.
        """
        config = self.config
        self.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info(
            "Starting experiment",
            name=config.name,
            kind=str(config.kind),
            replicates=config.replicates,
            threads=self.threads,
            output_dir=str(self.output_dir),
        )

        start = time.perf_counter()
        outcomes: list[ReplicateOutcome] = Parallel(n_jobs=self.threads)(
            delayed(self.run_replicate)(r) for r in range(config.replicates)
        )
        rows = [row for outcome in outcomes for row in outcome.rows]

        manifest = RunManifest(
            name=config.name,
            kind=config.kind,
            config_hash=config_hash(config),
            seed=config.seed,
            replicates=config.replicates,
            config=config.model_dump(mode="json"),
            summary=self._summarize(rows),
            rows=rows,
        )
        (self.output_dir / "manifest.json").write_text(
            json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        )
        self._write_results(rows)
        if config.kind == ExperimentKind.IDENTIFIABILITY and len(rows) > 1:
            self._write_densities(rows)

        timings = {
            "replicate_seconds": [outcome.seconds for outcome in outcomes],
            "total_seconds": time.perf_counter() - start,
        }
        (self.output_dir / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")

        logger.info("Finished experiment", name=config.name, **manifest.summary)
        return manifest
