"""
Analytic reference schemes without feedback.

The shipped baseline repeats one unit-average-power ``2^K``-PAM symbol over ``n_uses``
channel uses and combines the copies with a matched filter, which gives the combined
SNR ``γ = n_uses/σ_f²`` and the symbol (= block) error probability
``2(1 − 1/M)·Q(√(3γ/(M² − 1)))``.

Any other scheme can be compared in the same sweeps by implementing the Baseline
protocol.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass
from typing import Protocol, Sequence, Union, runtime_checkable

import numpy as np
from scipy.special import erfc

from feedback_code_toolkit.channel import snr_db_to_variance
from feedback_code_toolkit.exceptions import ConfigError

__all__ = [
    "q_function",
    "Baseline",
    "PamRepetitionBaseline",
    "BaselinePoint",
    "pam_levels",
    "pam_baseline_bler",
    "baseline_sweep",
    "write_baseline_csv",
]

logger = logging.getLogger(__name__)


def q_function(x):
    """Gaussian tail probability ``Q(x) = ½·erfc(x/√2)``."""
    return 0.5 * erfc(np.asarray(x) / np.sqrt(2.0))


@runtime_checkable
class Baseline(Protocol):
    name: str

    def bler(self, num_bits: int, n_uses: int, forward_snr_db: float) -> float:
        """Block error probability of one user served over ``n_uses`` channel uses."""


def pam_levels(m: int) -> np.ndarray:
    """Equally spaced M-PAM levels with unit average power."""
    d = math.sqrt(3.0 / (m * m - 1))
    return (2.0 * np.arange(m) - m + 1) * d


@dataclass(frozen=True)
class PamRepetitionBaseline:
    """Repetition of a ``2^K``-PAM symbol with matched-filter combining."""

    name: str = "pam_repetition"

    def bler(self, num_bits: int, n_uses: int, forward_snr_db: float) -> float:
        _check(num_bits, n_uses)
        m = 2**num_bits
        gamma = n_uses / snr_db_to_variance(forward_snr_db)
        return float(2.0 * (1.0 - 1.0 / m) * q_function(math.sqrt(3.0 * gamma / (m * m - 1))))

    def simulate(
        self,
        num_bits: int,
        n_uses: int,
        forward_snr_db: float,
        samples: int,
        rng: np.random.Generator,
    ) -> tuple[float, float]:
        """Monte Carlo estimate of the block error rate and its standard error."""
        _check(num_bits, n_uses)
        m = 2**num_bits
        levels = pam_levels(m)
        spacing = levels[1] - levels[0]
        sent = rng.integers(0, m, size=samples)
        sigma = math.sqrt(snr_db_to_variance(forward_snr_db) / n_uses)
        combined = levels[sent] + rng.normal(0.0, sigma, size=samples)
        detected = np.clip(np.rint((combined - levels[0]) / spacing), 0, m - 1).astype(np.int64)
        p = float(np.mean(detected != sent))
        return p, math.sqrt(p * (1.0 - p) / samples)


def _check(num_bits: int, n_uses: int) -> None:
    if num_bits < 1 or n_uses < 1:
        raise ConfigError(f"baseline needs K ≥ 1 and at least one use, got K={num_bits}, n={n_uses}")


@dataclass(frozen=True)
class BaselinePoint:
    num_bits: int
    n_uses: int
    forward_snr_db: float
    analytic: float
    monte_carlo: float
    std_error: float
    samples: int

    HEADER = (
        "K",
        "n_uses",
        "forward_snr_db",
        "analytic_bler",
        "monte_carlo_bler",
        "std_error",
        "samples",
    )

    def to_csv_row(self) -> list[str]:
        return [
            str(self.num_bits),
            str(self.n_uses),
            repr(float(self.forward_snr_db)),
            repr(self.analytic),
            repr(self.monte_carlo),
            repr(self.std_error),
            str(self.samples),
        ]


def pam_baseline_bler(
    num_bits: int,
    n_uses: int,
    forward_snr_db: float,
    samples: int = 1_000_000,
    seed: int = 0,
) -> BaselinePoint:
    """Closed-form and Monte Carlo block error rate of the PAM repetition baseline."""
    baseline = PamRepetitionBaseline()
    monte_carlo, std_error = baseline.simulate(
        num_bits, n_uses, forward_snr_db, samples, np.random.default_rng(seed)
    )
    return BaselinePoint(
        num_bits,
        n_uses,
        forward_snr_db,
        baseline.bler(num_bits, n_uses, forward_snr_db),
        monte_carlo,
        std_error,
        samples,
    )


def baseline_sweep(
    num_bits: int,
    n_uses: int,
    snr_grid: Sequence[float],
    samples: int = 1_000_000,
    seed: int = 0,
) -> list[BaselinePoint]:
    points = []
    for i, snr in enumerate(snr_grid):
        point = pam_baseline_bler(num_bits, n_uses, snr, samples, seed + i)
        logger.info(
            "PAM baseline K=%d n=%d at %.2f dB: analytic %.4g, monte carlo %.4g",
            num_bits,
            n_uses,
            snr,
            point.analytic,
            point.monte_carlo,
        )
        points.append(point)
    return points


def write_baseline_csv(path: Union[str, os.PathLike], points: Sequence[BaselinePoint]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(BaselinePoint.HEADER)
        for point in points:
            writer.writerow(point.to_csv_row())
