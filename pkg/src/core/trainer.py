"""
Training orchestration for one optimizer on one (normalized) dataset.
Handles mini-batching, the step-size schedule, noise-precision updates and
posterior-predictive sampling.
"""

import logging
import math
from typing import Callable, Dict, List, Optional

import numpy as np

from src.core.network import GaussianNoiseModel, Network, update_noise_precision
from src.core.optimizers import VariationalOptimizer, estimate_elbo, make_optimizer
from src.core.posteriors import posterior_mean, sample
from src.core.state import StepReport
from src.utils.config import TrainConfig

logger = logging.getLogger(__name__)

ReportCallback = Callable[[StepReport], None]


class Trainer:
    """
    Owns a network, its noise model and an optimizer.

    Workflow: ``setup(x, y)`` builds everything from the config seed,
    ``run()`` trains and returns the StepReport stream, the ``predict_*``
    methods serve evaluation.
    """

    def __init__(self, cfg: TrainConfig):
        """Initialize the trainer without allocating any model state."""
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.net: Optional[Network] = None
        self.noise: Optional[GaussianNoiseModel] = None
        self.optimizer: Optional[VariationalOptimizer] = None
        self.x: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None
        self._is_initialized = False

    def setup(self, x: np.ndarray, y: np.ndarray) -> None:
        """
        Build the network and optimizer for a training set.

        Args:
            x: N x d standardized training features
            y: N standardized training targets

        Raises:
            RuntimeError: If setup fails
        """
        try:
            self.x = np.asarray(x, dtype=float)
            self.y = np.asarray(y, dtype=float).ravel()
            sizes = [self.x.shape[1], self.cfg.hidden_units, 1]
            self.net = Network.build(sizes, self.rng, task="regression")
            self.noise = GaussianNoiseModel.from_prior(self.cfg.noise_a0, self.cfg.noise_b0)
            self.optimizer = make_optimizer(self.net, self.cfg, self.x.shape[0], self.noise, self.rng)
            self._is_initialized = True
        except Exception as e:
            raise RuntimeError(f"Failed to setup trainer: {e}") from e

    def _require_setup(self) -> None:
        if not self._is_initialized:
            raise RuntimeError("Trainer not initialized. Call setup() first.")

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.x.shape[0] / self.cfg.batch_size)

    @property
    def total_iterations(self) -> int:
        if self.cfg.max_iterations is not None:
            return self.cfg.max_iterations
        return self.cfg.epochs * self.batches_per_epoch

    def step_size(self, k: int) -> float:
        """Base alpha, decayed by ``lr_decay`` for the second half of training."""
        if k >= self.total_iterations // 2:
            return self.cfg.alpha * self.cfg.lr_decay
        return self.cfg.alpha

    def run(self, on_report: Optional[ReportCallback] = None) -> List[StepReport]:
        """
        Train for the configured number of iterations.

        Args:
            on_report: called with every StepReport as soon as it is produced

        Returns:
            All StepReports in iteration order
        """
        self._require_setup()
        reports: List[StepReport] = []
        total = self.total_iterations
        k = 0
        epoch = 0
        while k < total:
            order = self.rng.permutation(self.x.shape[0])
            for start in range(0, order.shape[0], self.cfg.batch_size):
                if k >= total:
                    break
                idx = order[start:start + self.cfg.batch_size]
                report = self.optimizer.step(self.x[idx], self.y[idx], k, self.step_size(k))
                reports.append(report)
                if on_report is not None:
                    on_report(report)
                k += 1
            self._update_noise()
            epoch += 1
            logger.info(
                "%s epoch %d done (iteration %d/%d, elbo %.4f, noise precision %.4f)",
                self.optimizer.name, epoch, k, total, reports[-1].elbo, self.noise.precision,
            )
        return reports

    def _update_noise(self) -> None:
        residuals = self.y - self.predict_mean(self.x)
        self.noise = update_noise_precision(self.noise, residuals)
        self.optimizer.noise = self.noise

    def predict_mean(self, x: np.ndarray) -> np.ndarray:
        """Network output at the posterior mean weights, in training units."""
        self._require_setup()
        self.net.set_weights([posterior_mean(post) for post in self.optimizer.posteriors()])
        return self.net.forward(x)[:, 0]

    def predict_samples(self, x: np.ndarray, n_mc: int, rng: np.random.Generator) -> np.ndarray:
        """
        Outputs under ``n_mc`` posterior weight samples, shape (n_mc, len(x)).

        Point-estimate optimizers return a single deterministic row.
        """
        self._require_setup()
        if not self.cfg.is_bayesian:
            return self.predict_mean(x)[None, :]
        posteriors = self.optimizer.posteriors()
        rows = []
        for _ in range(n_mc):
            self.net.set_weights([sample(post, rng) for post in posteriors])
            rows.append(self.net.forward(x)[:, 0])
        return np.stack(rows)

    def final_elbo(self, n_mc: Optional[int] = None) -> float:
        """Full-training-set ELBO estimate under the current posterior."""
        self._require_setup()
        kl_weight = self.cfg.kl_weight if self.cfg.is_bayesian else 0.0
        return estimate_elbo(
            self.net,
            self.optimizer.posteriors(),
            self.x,
            self.y,
            self.noise,
            kl_weight,
            self.cfg.eta,
            n_mc or self.cfg.n_mc_elbo,
            self.rng,
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Arrays describing the fitted posterior, suitable for ``np.savez``."""
        self._require_setup()
        arrays: Dict[str, np.ndarray] = {
            "optimizer": np.array(self.optimizer.name),
            "noise": np.array([self.noise.a0, self.noise.b0, self.noise.alpha, self.noise.beta]),
        }
        for idx, post in enumerate(self.optimizer.posteriors()):
            arrays[f"layer{idx}_mean"] = post.mean
            if hasattr(post, "log_sigma"):
                arrays[f"layer{idx}_log_sigma"] = post.log_sigma
            else:
                arrays[f"layer{idx}_eigvals_A"] = post.eig_A.eigvals
                arrays[f"layer{idx}_eigvals_S"] = post.eig_S.eigvals
                arrays[f"layer{idx}_variance_grid"] = post.variance_grid()
        return arrays
