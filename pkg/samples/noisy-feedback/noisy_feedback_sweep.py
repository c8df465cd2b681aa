"""

Noisy feedback - BLER against feedback noise power

This example showcases the following feedback_code_toolkit modules:

config for loading the experiment files
experiments for sweeping the feedback noise power
channel for converting feedback noise powers in dB to variances

The forward SNR stays at 0 dB while the feedback noise power goes from noiseless up to 0 dB. Three
sum rates are compared over N=18 uses: 1/3 (K=3), 5/9 (K=5) and 2/3 (K=6). The gain from feedback
fades as the feedback link gets noisier, and higher rates lose it first.

"""

import logging
from pathlib import Path

from feedback_code_toolkit import channel
from feedback_code_toolkit import experiments
from feedback_code_toolkit.config import load_config

HERE = Path(__file__).parent
CONFIGS = ["rate_1_3.json", "rate_5_9.json", "rate_2_3.json"]

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    # --------------------------------------------------------------------------
    # One sweep per rate

    curves = {}
    for name in CONFIGS:
        config = load_config(HERE / name)
        curves[config.model.sum_rate] = experiments.sweep(config, Path(config.output_dir) / f"{config.name}.csv")

    # --------------------------------------------------------------------------
    # Table of average BLER, one column per rate

    print("feedback noise      sigma_b^2  " + "  ".join(f"R={rate:.3f}" for rate in curves))
    for rows in zip(*curves.values()):
        noise_db = rows[0].feedback_noise_db
        label = "noiseless" if noise_db is None else f"{noise_db:.0f} dB"
        variance = 0.0 if noise_db is None else channel.noise_power_db_to_variance(noise_db)
        print(f"{label:>14}  {variance:11.4g}  " + "  ".join(f"{row.average_bler:.3e}" for row in rows))
