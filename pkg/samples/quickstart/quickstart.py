"""

Quickstart - a two-user LightBC code at the desk

This example showcases the following feedback_code_toolkit modules:

config for describing the experiment
experiments for building the code and the channel, training and writing the checkpoint
evaluation for the Monte Carlo block error rate of every user
baselines for the uncoded PAM repetition reference at the same rate

Two users each receive K=2 bits over N=9 channel uses (sum rate 4/9) at a forward SNR of 2 dB
with noiseless feedback. Training runs at desk scale (50 000 samples), so expect block error
rates in the 1e-1 to 1e-2 range rather than the values reached after full-scale training.

"""

import logging

from feedback_code_toolkit import baselines
from feedback_code_toolkit import experiments
from feedback_code_toolkit.config import parse_config
from feedback_code_toolkit.evaluation import run_bler_eval

# ------------------------------------------------------------------------------
# Describe the experiment

document = {
    "schema_version": 1,
    "name": "quickstart",
    "model": {"family": "light_bc", "num_users": 2, "num_bits": 2, "blocklength": 9},
    "channel": {"forward_snr_db": 2.0, "feedback_noise_db": "noiseless"},
    "evaluation": {"max_samples": 100_000, "target_errors": 200},
    "output_dir": "results",
    "seed": 1,
}

if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    config = parse_config(document)

    # --------------------------------------------------------------------------
    # Train

    point = experiments.base_point(config)
    run_id = experiments.experiment_id(config, point)
    model = experiments.build_model(config)
    channel = experiments.build_channel(config, point)
    records = experiments.train_model(config, model, channel, run_id)
    for record in records:
        print(f"epoch {record.epoch}: loss {record.loss:.4f}, lr {record.learning_rate:.2e}")

    # --------------------------------------------------------------------------
    # Evaluate against the uncoded reference

    evaluation = config.evaluation
    row = run_bler_eval(model, channel, evaluation.max_samples, evaluation.target_errors, experiment_id=run_id)
    reference = baselines.PamRepetitionBaseline()
    n_uses = config.model.blocklength // config.model.num_users
    print(f"LightBC per-user BLER: {row.bler} (average {row.average_bler:.4g} ± {row.ci_half_width:.2g})")
    print(f"PAM repetition over {n_uses} uses: {reference.bler(config.model.num_bits, n_uses, 2.0):.4g}")
