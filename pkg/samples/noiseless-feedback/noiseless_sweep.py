"""

Noiseless feedback - BLER against forward SNR

This example showcases the following feedback_code_toolkit modules:

config for loading the two JSON experiment files
experiments for the resumable forward-SNR sweep
baselines for the PAM repetition curve at the same rates

Two users share N=18 channel uses with perfect feedback. rate_1_3.json sends K=3 bits per user
(sum rate 1/3) and rate_2_3.json sends K=6 bits per user (sum rate 2/3). One LightBC code is
trained per forward SNR, and each point is written to results/noiseless/<name>.csv as soon as it
is evaluated. If the script is interrupted, rerunning it skips the finished points.

"""

import logging
from pathlib import Path

from feedback_code_toolkit import baselines
from feedback_code_toolkit import experiments
from feedback_code_toolkit.config import load_config

HERE = Path(__file__).parent
CONFIGS = ["rate_1_3.json", "rate_2_3.json"]

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    reference = baselines.PamRepetitionBaseline()

    for name in CONFIGS:
        config = load_config(HERE / name)
        csv_path = Path(config.output_dir) / f"{config.name}.csv"

        # ----------------------------------------------------------------------
        # Sweep the forward SNR

        rows = experiments.sweep(config, csv_path)

        # ----------------------------------------------------------------------
        # Print the curve next to the uncoded reference

        model = config.model
        n_uses = model.blocklength // model.num_users
        print(f"{config.name}: sum rate {model.sum_rate:.3f}")
        for row in rows:
            pam = reference.bler(model.num_bits, n_uses, row.forward_snr_db)
            print(f"  {row.forward_snr_db:5.1f} dB  LightBC {row.average_bler:.3e}  PAM {pam:.3e}")
