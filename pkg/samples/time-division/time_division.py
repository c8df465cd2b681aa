"""

Joint broadcast code against time division

This example showcases the following feedback_code_toolkit modules:

experiments for the time-division composition and for both sweeps
config for switching the sweep scheme

Each user gets K=6 bits and the block has N=18 uses. The joint broadcast code serves both users
over all 18 uses. Time division gives every user its own single-user code over 9 uses, so each
slot runs at rate 2/3 while the composite keeps the broadcast bookkeeping. Both schemes are swept
over the same feedback noise powers.

"""

import logging
from dataclasses import replace
from pathlib import Path

from feedback_code_toolkit import experiments
from feedback_code_toolkit.config import load_config

HERE = Path(__file__).parent

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = load_config(HERE / "config.json")

    # --------------------------------------------------------------------------
    # The time-division slots

    model = config.model
    for slot in experiments.tdd_compose(model.num_bits, model.blocklength, model.num_users):
        print(f"user {slot.user}: K={slot.num_bits} over {slot.blocklength} uses, rate {slot.rate:.3f}")

    # --------------------------------------------------------------------------
    # Sweep both schemes

    results = {}
    for scheme in ("broadcast", "tdd"):
        scheme_config = replace(config, sweep=replace(config.sweep, scheme=scheme))
        csv_path = Path(config.output_dir) / f"{config.name}.{scheme}.csv"
        results[scheme] = experiments.sweep(scheme_config, csv_path)

    for joint, split in zip(results["broadcast"], results["tdd"]):
        noise = "noiseless" if joint.feedback_noise_db is None else f"{joint.feedback_noise_db:.0f} dB"
        print(f"{noise:>10}  broadcast {joint.average_bler:.3e}  tdd {split.average_bler:.3e}")
