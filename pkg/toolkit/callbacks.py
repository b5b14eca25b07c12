"""Some basic callbacks for the Boltzmann machine training loop"""

import logging
import time

import numpy as np


logger = logging.getLogger(__name__)


class TrainingCallback:
    """Hooks called by `toolkit.learning.train`; every hook is a no-op by default.

    `state` is the training loop's `TrainingState` (iteration index, current network,
    the row just recorded, the config).
    """

    def on_train_begin(self, state, **kwargs):
        pass

    def on_train_end(self, state, **kwargs):
        pass

    def on_iteration_begin(self, state, **kwargs):
        pass

    def on_iteration_end(self, state, **kwargs):
        pass


class TrackingCallback(TrainingCallback):
    def __init__(self, verbose: bool = False):
        self.verbose = verbose
        self.all_iteration_times = []

    def on_train_begin(self, state, **kwargs):
        self.all_iteration_times = []
        self.train_start_time = time.time()

    def on_train_end(self, state, **kwargs):
        self.train_end_time = time.time()
        self.mean_iteration_time = float(np.mean(self.all_iteration_times)) if self.all_iteration_times else 0.0
        self.total_train_time = self.train_end_time - self.train_start_time
        logger.info(
            f"[{self.__class__.__name__}] Mean Iteration Time = {self.mean_iteration_time} seconds, Total Train Time = {self.total_train_time}"
        )

    def on_iteration_begin(self, state, **kwargs):
        self.iteration_start_time = time.time()

    def on_iteration_end(self, state, **kwargs):
        self.iteration_end_time = time.time()
        self.last_iteration_time = self.iteration_end_time - self.iteration_start_time
        if self.verbose:
            logger.info(f"[{self.__class__.__name__}] Iteration Time = {self.last_iteration_time} seconds")
        self.all_iteration_times.append(self.last_iteration_time)


class ProgressCallback(TrainingCallback):
    """Logs the objective of every `every`-th iteration at INFO."""

    def __init__(self, every: int = 10):
        if every < 1:
            raise ValueError(f"`every` must be at least 1, received {every}")
        self.every = every

    def on_iteration_end(self, state, **kwargs):
        if (state.iteration + 1) % self.every == 0:
            row = state.last_row
            logger.info(
                f"[{self.__class__.__name__}] iteration {state.iteration + 1}: objective={row['objective']:.6g} "
                f"kl={row['kl_divergence']:.6g}"
            )
