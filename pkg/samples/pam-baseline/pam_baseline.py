"""

Uncoded PAM repetition baseline

This example showcases the following feedback_code_toolkit modules:

baselines for the closed-form block error rate and its Monte Carlo check

Each user's K bits are mapped to one 2^K-PAM symbol with unit average power. The symbol is
repeated over the N/L uses of that user's time slot and combined with a matched filter. The
closed form and a one-million-sample simulation are written side by side to
results/pam-baseline.csv for K=3 and K=6 over 9 uses.

"""

import logging
from pathlib import Path

from feedback_code_toolkit import baselines

SNR_GRID = [-2.0, 0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
N_USES = 9

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    points = []
    for num_bits in (3, 6):
        points.extend(baselines.baseline_sweep(num_bits, N_USES, SNR_GRID, samples=1_000_000, seed=num_bits))

    out = Path("results")
    out.mkdir(exist_ok=True)
    baselines.write_baseline_csv(out / "pam-baseline.csv", points)
    for point in points:
        print(
            f"K={point.num_bits} {point.forward_snr_db:5.1f} dB  "
            f"analytic {point.analytic:.3e}  monte carlo {point.monte_carlo:.3e}"
        )
