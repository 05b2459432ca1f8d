"""Reproducible desk-scale experiment protocols.

Two protocols are packaged here so tests, demos and users run the exact same
configuration:

* ``toy_fidelity_run``: train on the three-variable toy fixture and report
  synthetic marginal SRMSE against the analytic truth.
* ``mia_run``: overfit a discriminator on 50 agents and attack it with 50
  held-out agents.

The widths are far below the full architecture so that each run finishes in
well under a minute on one CPU core.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attack, data, evaluation as ev, fixture, trainer
from .dpsgd import PrivacyConfig
from .nets import NetConfig

TOY_N = 2000
TOY_MAX_LEN = 4
TOY_NET = dict(latent_dim=8, trunk_width=32, head_hidden=16, gen_lstm=(8,), disc_dense=(64, 32),
               disc_bilstm=8, disc_lstm=8)
TOY_TRAIN = dict(epochs=60, batch_size=64, lr_d=0.1, lr_g=0.002)

MIA_N_TRAIN = 50
MIA_STEPS = 500
MIA_MAX_LEN = 7
MIA_NET = dict(latent_dim=8, trunk_width=16, head_hidden=8, gen_lstm=(8,), disc_dense=(256, 128),
               disc_bilstm=16, disc_lstm=16)
MIA_TRAIN = dict(batch_size=MIA_N_TRAIN, lr_d=0.5, lr_g=0.05)


@dataclass
class FidelityResult:
    seed: int
    noise_multiplier: float
    srmse: dict  # variable -> SRMSE of synthetic marginal vs truth

    @property
    def mean_srmse(self) -> float:
        return float(np.mean(list(self.srmse.values())))


def toy_dataset(seed: int, n: int = TOY_N, max_len: int = TOY_MAX_LEN) -> data.Dataset:
    records = fixture.synth_toy_fixture(seed, n)
    codec = data.fit_codec(records, fixture.toy_schema(), max_len)
    return data.Dataset.from_records(records, codec, f"toy fixture seed={seed}")


def marginal_srmse_vs_truth(records, schema, truth) -> dict:
    out = {}
    for v in truth["variables"]:
        hist = ev.marginal(records, v, schema)
        tm = fixture.truth_marginal(truth, v)
        ref = ev.Histogram.from_probabilities((v,), hist.labels, [tm[lab] for lab in hist.labels])
        out[v] = ev.srmse(hist, ref).srmse
    return out


def toy_fidelity_run(seed: int, noise_multiplier: float, n_samples: int = TOY_N) -> FidelityResult:
    """Train with clipping (C = 1) and the given noise multiplier; score marginals."""
    ds = toy_dataset(seed)
    net = NetConfig.from_codec(ds.codec, **TOY_NET)
    cfg = trainer.TrainConfig(privacy=PrivacyConfig(1.0, noise_multiplier), seed=seed, **TOY_TRAIN)
    g, _, _ = trainer.train(ds, cfg, net)
    synthetic = trainer.sample(g, ds.codec, n_samples, seed + 1000)
    return FidelityResult(seed, noise_multiplier,
                          marginal_srmse_vs_truth(synthetic, ds.schema, fixture.toy_fixture_truth()))


def mia_split(seed: int):
    """50 training and 50 held-out survey-fixture agents."""
    records = data.filter_home_based(fixture.synth_fixture(100 + seed, 2 * MIA_N_TRAIN))
    codec = data.fit_codec(records, data.survey_schema(), MIA_MAX_LEN)
    ds = data.Dataset.from_records(records, codec, f"survey fixture seed={100 + seed}")
    return data.split(ds, 0.5, seed)


def mia_run(seed: int, noise_multiplier: float | None) -> attack.AttackReport:
    """Train ``MIA_STEPS`` full-batch steps, then attack with the discriminator.

    ``noise_multiplier=None`` trains without any privacy mechanism.
    """
    train_set, validation_set = mia_split(seed)
    privacy = (PrivacyConfig(1.0, 0.0, enabled=False) if noise_multiplier is None
               else PrivacyConfig(1.0, noise_multiplier))
    steps_per_epoch = -(-len(train_set) // MIA_TRAIN["batch_size"])
    cfg = trainer.TrainConfig(epochs=MIA_STEPS // steps_per_epoch, privacy=privacy, seed=seed, **MIA_TRAIN)
    net = NetConfig.from_codec(train_set.codec, **MIA_NET)
    _, d, _ = trainer.train(train_set, cfg, net)
    return attack.mia_scores(d, train_set, validation_set, cfg.loss, 0.5)
