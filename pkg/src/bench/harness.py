"""
Regression benchmark harness.
Trains each optimizer on repeated random splits, evaluates test RMSE and
posterior-predictive log-likelihood in original target units, and folds the
per-split records into mean +/- standard error.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import logsumexp

from src.bench.data import Dataset, SplitSpec, Standardizer, make_splits, normalize_split
from src.core.network import GaussianNoiseModel
from src.core.trainer import Trainer
from src.utils.config import TrainConfig

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

# batch size / width / repeats by dataset size class
LARGE_DATASETS = ("kin8nm", "naval", "power")
PROTOCOL_OVERRIDES: Dict[str, Dict[str, int]] = {
    **{name: {"batch_size": 100} for name in LARGE_DATASETS},
    "protein": {"batch_size": 100, "hidden_units": 100, "repeats": 5},
    "year": {"batch_size": 500, "hidden_units": 100, "repeats": 1},
}


class Predictor(Protocol):
    def predict_mean(self, x: np.ndarray) -> np.ndarray: ...

    def predict_samples(self, x: np.ndarray, n_mc: int, rng: np.random.Generator) -> np.ndarray: ...


class SplitRecord(BaseModel):
    """Result of training and evaluating on one split."""
    dataset: str
    optimizer: str
    split: int
    rmse: Optional[float] = None
    test_ll: Optional[float] = None
    final_elbo: Optional[float] = None
    wall_clock: float = Field(0.0, description="Seconds spent on the split")
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


class RunResult(BaseModel):
    """Aggregate over splits. Standard errors are None (NA) for a single split."""
    dataset: str
    optimizer: str
    splits: List[SplitRecord]
    n_ok: int
    rmse_mean: Optional[float] = None
    rmse_se: Optional[float] = None
    ll_mean: Optional[float] = None
    ll_se: Optional[float] = None
    elbo_mean: Optional[float] = None
    elbo_se: Optional[float] = None

    def summary(self) -> Dict:
        """Aggregate fields only, without per-split wall-clock times."""
        return self.model_dump(exclude={"splits"})


def mean_and_se(values: Sequence[float]) -> Tuple[Optional[float], Optional[float]]:
    """Sample mean and standard error sd/sqrt(k) (ddof=1); SE is None for k == 1."""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return None, None
    mean = float(np.mean(values))
    if values.size == 1:
        return mean, None
    return mean, float(np.std(values, ddof=1) / math.sqrt(values.size))


def evaluate(
    predictor: Predictor,
    test: Dataset,
    transforms: Standardizer,
    noise: GaussianNoiseModel,
    n_mc: int,
    rng: np.random.Generator,
) -> Tuple[float, float]:
    """
    Test RMSE and mean per-point log-likelihood in original target units.

    RMSE uses the posterior-mean prediction. The log-likelihood is the
    log-mean-exp over ``n_mc`` posterior samples of a Gaussian whose
    precision E[gamma] is rescaled by the target standardization.

    Args:
        predictor: fitted model working in standardized units
        test: standardized features, raw targets
        transforms: train-set standardization
        noise: fitted noise-precision posterior
        n_mc: number of posterior samples
        rng: generator for posterior sampling

    Returns:
        (rmse, test_loglik)
    """
    y = test.targets
    mean_pred = transforms.inverse_targets(predictor.predict_mean(test.features))
    rmse = float(np.sqrt(np.mean((mean_pred - y) ** 2)))

    samples = transforms.inverse_targets(predictor.predict_samples(test.features, n_mc, rng))
    tau = noise.precision / transforms.y_std ** 2
    log_p = -0.5 * LOG_2PI + 0.5 * math.log(tau) - 0.5 * tau * (y[None, :] - samples) ** 2
    per_point = logsumexp(log_p, axis=0) - math.log(samples.shape[0])
    return rmse, float(np.mean(per_point))


def protocol_config(cfg: TrainConfig, dataset_name: str) -> TrainConfig:
    """Apply the per-dataset batch size, width and repeat conventions."""
    overrides = PROTOCOL_OVERRIDES.get(dataset_name.lower())
    return cfg.with_overrides(**overrides) if overrides else cfg


def run_split(
    cfg: TrainConfig,
    ds: Dataset,
    split: int,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
) -> SplitRecord:
    """Train ``cfg.optimizer`` on one split and evaluate it. Failures are recorded, not raised."""
    started = time.perf_counter()
    try:
        train, test, transforms = normalize_split(ds, train_idx, test_idx)
        trainer = Trainer(cfg.with_overrides(seed=(cfg.seed + split) % 2 ** 64))
        trainer.setup(train.features, train.targets)
        trainer.run()
        rmse, test_ll = evaluate(trainer, test, transforms, trainer.noise, cfg.n_mc_eval, trainer.rng)
        record = SplitRecord(
            dataset=ds.name,
            optimizer=cfg.optimizer,
            split=split,
            rmse=rmse,
            test_ll=test_ll,
            final_elbo=trainer.final_elbo(),
        )
    except Exception as e:
        logger.warning("%s/%s split %d failed: %s", ds.name, cfg.optimizer, split, e)
        record = SplitRecord(dataset=ds.name, optimizer=cfg.optimizer, split=split, error=str(e))
    record.wall_clock = time.perf_counter() - started
    return record


def _run_split_job(job: Tuple[TrainConfig, Dataset, int, np.ndarray, np.ndarray]) -> SplitRecord:
    return run_split(*job)


def aggregate(dataset: str, optimizer: str, records: List[SplitRecord]) -> RunResult:
    """Fold split records (in split order) into a RunResult."""
    ok = [r for r in sorted(records, key=lambda r: r.split) if r.ok]
    rmse_mean, rmse_se = mean_and_se(r.rmse for r in ok)
    ll_mean, ll_se = mean_and_se(r.test_ll for r in ok)
    elbo_mean, elbo_se = mean_and_se(r.final_elbo for r in ok)
    return RunResult(
        dataset=dataset,
        optimizer=optimizer,
        splits=sorted(records, key=lambda r: r.split),
        n_ok=len(ok),
        rmse_mean=rmse_mean,
        rmse_se=rmse_se,
        ll_mean=ll_mean,
        ll_se=ll_se,
        elbo_mean=elbo_mean,
        elbo_se=elbo_se,
    )


def run_benchmark(
    cfg: TrainConfig,
    datasets: Sequence[Dataset],
    optimizers: Sequence[str],
    jobs: int = 1,
    on_record: Optional[Callable[[SplitRecord], None]] = None,
) -> List[RunResult]:
    """
    Train and evaluate every optimizer on every dataset.

    Args:
        cfg: base configuration (optimizer is replaced per row)
        datasets: datasets in original units
        optimizers: optimizer names
        jobs: worker processes for independent splits
        on_record: called with each split record in deterministic order

    Returns:
        One RunResult per dataset x optimizer, in input order
    """
    jobs_list = []
    for ds in datasets:
        ds_cfg = protocol_config(cfg, ds.name)
        splits = make_splits(ds.size, SplitSpec(ds_cfg.train_fraction, ds_cfg.repeats, ds_cfg.seed))
        for name in optimizers:
            run_cfg = ds_cfg.with_overrides(optimizer=name)
            for split, (train_idx, test_idx) in enumerate(splits):
                jobs_list.append((run_cfg, ds, split, train_idx, test_idx))

    logger.info("running %d split jobs with %d worker(s)", len(jobs_list), jobs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_split_job, jobs_list))
    else:
        records = [_run_split_job(job) for job in jobs_list]

    grouped: Dict[Tuple[str, str], List[SplitRecord]] = {}
    for record in records:
        if on_record is not None:
            on_record(record)
        grouped.setdefault((record.dataset, record.optimizer), []).append(record)
    return [aggregate(ds_name, opt, recs) for (ds_name, opt), recs in grouped.items()]


def _fmt(mean: Optional[float], se: Optional[float]) -> str:
    if mean is None:
        return "failed"
    return f"{mean:.3f} ± {'NA' if se is None else f'{se:.3f}'}"


def render_table(results: Sequence[RunResult]) -> str:
    """Aligned text table of aggregate metrics."""
    header = ["dataset", "optimizer", "splits", "test RMSE", "test LL", "ELBO"]
    rows = [
        [
            r.dataset,
            r.optimizer,
            f"{r.n_ok}/{len(r.splits)}",
            _fmt(r.rmse_mean, r.rmse_se),
            _fmt(r.ll_mean, r.ll_se),
            _fmt(r.elbo_mean, r.elbo_se),
        ]
        for r in results
    ]
    widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip() for row in [header] + rows]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)
