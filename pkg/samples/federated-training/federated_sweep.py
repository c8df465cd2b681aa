"""

Federated training over noisy links

This example showcases the following feedback_code_toolkit modules:

train_federated for training with noisy decoder outputs and noisy gradients
experiments for the gradient-link SNR sweep
evaluation for the block error rate of each trained code

An RPC-BC code for two users (K=6, N=18, sum rate 2/3) is trained with the federated protocol.
The decoder outputs reach the encoder over the feedback link, so they pick up the feedback noise
(-20 dB). The gradients return to the decoders over a downlink whose SNR is swept from noiseless
down to 10 dB. Every gradient vector is power-scaled before transmission. Each trained code
writes a .transfer.csv log of the noise that was injected into every batch.

"""

import csv
import logging
from pathlib import Path

from feedback_code_toolkit import experiments
from feedback_code_toolkit.config import load_config

HERE = Path(__file__).parent


def mean_divergence(path):
    """Average replica divergence over the batches of a transfer log."""
    with open(path, newline="") as handle:
        values = [float(row["divergence"]) for row in csv.DictReader(handle)]
    return sum(values) / len(values) if values else 0.0


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = load_config(HERE / "config.json")

    # --------------------------------------------------------------------------
    # Sweep the gradient downlink SNR

    rows = experiments.sweep(config, Path(config.output_dir) / f"{config.name}.csv")

    # --------------------------------------------------------------------------
    # Report BLER and how far the decoders drifted from the encoder's replicas

    for row in rows:
        label = "noiseless" if row.grad_snr_db is None else f"{row.grad_snr_db:.0f} dB"
        log = Path(config.output_dir) / f"{row.experiment_id}.transfer.csv"
        print(f"{label:>10}  BLER {row.average_bler:.3e}  divergence {mean_divergence(log):.3e}")
