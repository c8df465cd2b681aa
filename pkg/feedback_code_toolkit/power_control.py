"""
The power control layer shared by both code families.

For channel use ``t`` the raw encoder output ``x̃[t]`` is standardized over the batch
and then scaled by a trainable weight ``w_t``; the weights are reparameterized as
``w = √N·v/‖v‖₂`` so that ``Σ_t w_t² = N`` holds after every optimizer step.

In training mode the batch mean and population variance are used (and differentiated
through); an exponential running average of them is kept for inference mode, and
``PowerControl.calibrating`` replaces it by a plain average over calibration batches.
"""

import contextlib
import enum
import logging
import math
from typing import Iterator

import numpy as np

from feedback_code_toolkit.autodiff import (
    ParameterStore,
    Tensor,
    batch_standardize,
    normalized_weight_mul,
    shift_scale,
)
from feedback_code_toolkit.exceptions import (
    CheckpointMismatchError,
    ContractError,
    UninitializedStatisticsError,
)

__all__ = [
    "Mode",
    "PowerControl",
    "normalize_batch",
    "apply_weight",
    "freeze_statistics",
    "DEFAULT_MOMENTUM",
    "DEFAULT_EPS",
]

logger = logging.getLogger(__name__)

DEFAULT_MOMENTUM = 0.1
DEFAULT_EPS = 1e-8


class Mode(enum.Enum):
    TRAIN = 1
    INFERENCE = 2


class PowerControl:
    """Power control state for a block of ``n`` channel uses.

    Attributes:
        v: The unconstrained weight vector, registered in the store as ``{prefix}.v``.
        running_mean: Per-t running mean of x̃.
        running_var: Per-t running population variance of x̃.
        observed: Per-t flag, set once a training batch has been seen at that t.
        mode: Mode.TRAIN or Mode.INFERENCE.
        update_statistics: Whether training-mode calls move the running statistics.
    """

    def __init__(
        self,
        store: ParameterStore,
        prefix: str,
        n: int,
        momentum: float = DEFAULT_MOMENTUM,
        eps: float = DEFAULT_EPS,
    ):
        if not 0 < momentum < 1:
            raise ContractError(f"momentum must lie in (0, 1), got {momentum}")
        if eps <= 0:
            raise ContractError(f"eps must be positive, got {eps}")
        self.name = f"{prefix}.v"
        self.v = store.add(self.name, np.ones(n))
        self.n = n
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.observed = np.zeros(n, dtype=bool)
        self.mode = Mode.TRAIN
        self.update_statistics = True
        self._calibration_counts = None

    def rebind(self, store: ParameterStore) -> None:
        """Points ``v`` at the same-named parameter of another store."""
        self.v = store[self.name]

    def weights(self) -> np.ndarray:
        """The effective weights ``w = √N·v/‖v‖₂``."""
        vv = self.v.values
        return math.sqrt(self.n) * vv / np.linalg.norm(vv)

    def train(self) -> None:
        self.mode = Mode.TRAIN

    @contextlib.contextmanager
    def inference_mode(self) -> Iterator["PowerControl"]:
        """Temporarily switches to inference mode, leaving the statistics untouched."""
        previous = self.mode
        self.mode = Mode.INFERENCE
        try:
            yield self
        finally:
            self.mode = previous

    @contextlib.contextmanager
    def statistics_frozen(self) -> Iterator["PowerControl"]:
        """Temporarily stops training-mode calls from moving the running statistics."""
        previous = self.update_statistics
        self.update_statistics = False
        try:
            yield self
        finally:
            self.update_statistics = previous

    @contextlib.contextmanager
    def calibrating(self) -> Iterator["PowerControl"]:
        """Re-estimates the running statistics from the training-mode batches run inside.

        On entry the layer switches to training mode with updates enabled; every batch
        seen inside the block counts equally and the first one replaces the old
        statistics. Mode and update flag are restored on exit.
        """
        previous = (self.mode, self.update_statistics)
        self.mode = Mode.TRAIN
        self.update_statistics = True
        self._calibration_counts = np.zeros(self.n, dtype=np.int64)
        try:
            yield self
        finally:
            self._calibration_counts = None
            self.mode, self.update_statistics = previous

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            "running_mean": self.running_mean.copy(),
            "running_var": self.running_var.copy(),
            "observed": self.observed.astype(np.float64),
            "inference": np.asarray(float(self.mode is Mode.INFERENCE)),
        }

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key in ("running_mean", "running_var", "observed"):
            if np.shape(state[key]) != (self.n,):
                raise CheckpointMismatchError(
                    f"power control {key}: stored shape {np.shape(state[key])} "
                    f"but layer has {self.n} channel uses"
                )
        self.running_mean = np.array(state["running_mean"], dtype=np.float64)
        self.running_var = np.array(state["running_var"], dtype=np.float64)
        self.observed = np.asarray(state["observed"]) > 0.5
        self.mode = Mode.INFERENCE if float(state["inference"]) > 0.5 else Mode.TRAIN

    def observe(self, values: np.ndarray, t: int) -> None:
        """Folds the batch statistics of channel use ``t`` into the running statistics.

        Outside calibration the first batch sets them and later ones follow the
        exponential average; inside calibration they are the plain average of the
        batches seen so far.
        """
        mean = float(values.mean())
        var = float(np.mean((values - mean) ** 2))
        if self._calibration_counts is not None:
            self._calibration_counts[t] += 1
            rate = 1.0 / self._calibration_counts[t]
        elif self.observed[t]:
            rate = self.momentum
        else:
            rate = 1.0
        self.running_mean[t] += rate * (mean - self.running_mean[t])
        self.running_var[t] += rate * (var - self.running_var[t])
        self.observed[t] = True


def normalize_batch(x_tilde: Tensor, pc: PowerControl, t: int) -> Tensor:
    """Standardizes the batch of raw encoder outputs at channel use ``t``.

    Args:
        x_tilde: Raw outputs, shape ``(B,)``.
        pc: The power control layer.
        t: Channel use, 0-based.

    Returns:
        ``(x̃ − μ)/√(σ² + eps)`` with batch statistics in training mode and the running
        statistics in inference mode.

    Raises:
        ContractError: If training mode gets a batch with fewer than two samples.
        UninitializedStatisticsError: If inference mode has no statistics for ``t``.
    """
    if not 0 <= t < pc.n:
        raise ContractError(f"channel use {t} outside [0, {pc.n})")
    if pc.mode is Mode.TRAIN:
        if x_tilde.shape[0] < 2:
            raise ContractError(
                f"training-mode normalization needs a batch of at least 2, got {x_tilde.shape[0]}"
            )
        if pc.update_statistics:
            pc.observe(x_tilde.values, t)
        return batch_standardize(x_tilde, pc.eps)
    if not pc.observed[t]:
        raise UninitializedStatisticsError(
            f"no normalization statistics stored for channel use {t}"
        )
    return shift_scale(
        x_tilde,
        -pc.running_mean[t],
        1.0 / math.sqrt(pc.running_var[t] + pc.eps),
    )


def apply_weight(normalized: Tensor, pc: PowerControl, t: int) -> Tensor:
    """Multiplies the normalized batch by ``w_t``."""
    return normalized_weight_mul(normalized, pc.v, t)


def freeze_statistics(pc: PowerControl) -> PowerControl:
    """Switches the layer to inference mode with its running statistics locked.

    Raises:
        UninitializedStatisticsError: If some channel use never saw a training batch.
    """
    if not pc.observed.all():
        missing = np.flatnonzero(~pc.observed).tolist()
        raise UninitializedStatisticsError(
            f"cannot freeze power control: channel uses {missing} never observed"
        )
    pc.mode = Mode.INFERENCE
    logger.debug(
        "froze power statistics: mean %s, var %s", pc.running_mean, pc.running_var
    )
    return pc
