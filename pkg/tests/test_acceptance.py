"""One test per acceptance criterion, each at its stated tolerance.

Every test records a ``PASS``/``FAIL criterion N`` line that is repeated in the
pytest terminal summary.
"""
import time

import numpy as np
import pytest

from diarygan import cli, data, evaluation as ev, experiments, fixture, numcore as nc, trainer
from diarygan.dpsgd import (DpSgdState, PrivacyConfig, clip_per_example, discriminator_mean_gradient,
                            discriminator_pair_gradients, dp_discriminator_step, privatize_sum, sgd_update)
from diarygan.nets import init_params

import helpers
from test_dpsgd import _batch

SEEDS = (0, 1, 2)


def _norm(gmap):
    return float(np.sqrt(sum((v ** 2).sum() for v in gmap.values())))


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}
    for make in (helpers.dense_instance, helpers.softmax_head_instance, helpers.lstm_instance):
        errs = []
        for _ in range(10):
            loss, params = make(rng)
            errs.append(helpers.fd_relative_error(loss, params, step=1e-5))
        worst[make.__name__] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 10
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    assert helpers.report_criterion(1, ok, f"{detail}; {elapsed:.1f}s")


def test_criterion_2_dp_mechanics(toy_ds, tiny_net):
    t0 = time.perf_counter()
    # (a) clipping bound on real discriminator gradients and on heavy-tailed random maps
    _, d = init_params(tiny_net, nc.SeededRng(1))
    batch = _batch(toy_ds, tiny_net, n=12)
    per, _ = discriminator_pair_gradients(d, batch)
    maps = [{k: v[i] for k, v in per.items()} for i in range(12)]
    rng = np.random.default_rng(0)
    heavy = [{"a": rng.standard_cauchy((4, 3)), "b": rng.normal(size=7) * s} for s in rng.exponential(5, 200)]
    worst_a = 0.0
    for c in (1e-3, 0.1, 1.0, 10.0):
        for family in (maps, heavy):
            worst_a = max(worst_a, max(_norm(m) for m in clip_per_example(family, c)) - c)
    ok_a = worst_a <= 1e-9

    # (b) sigma = 0 with a clip that never binds equals mean-gradient SGD
    grads, _ = discriminator_mean_gradient(d, batch)
    expected = sgd_update(d.tensors, grads, 0.05)
    new, stats = dp_discriminator_step(d, batch, DpSgdState(0.05, PrivacyConfig(1e6, 0.0), nc.SeededRng(0)))
    diff_b = max(np.abs(new.tensors[k] - expected[k]).max() for k in expected)
    ok_b = diff_b <= 1e-12 and stats.preclip_max < 1e6

    # (c) noise std per coordinate is sigma * C
    sigma, c = 1.5, 0.7
    noise = privatize_sum([{"a": np.zeros(200_000)}], PrivacyConfig(c, sigma), 1, nc.SeededRng(9))["a"]
    rel_c = abs(noise.std() / (sigma * c) - 1)
    ok_c = rel_c < 0.02

    elapsed = time.perf_counter() - t0
    ok = ok_a and ok_b and ok_c and elapsed < 30
    assert helpers.report_criterion(
        2, ok, f"(a) max norm excess {worst_a:.1e}; (b) max diff {diff_b:.1e}; "
               f"(c) std rel err {rel_c:.2%} over {noise.size} coords; {elapsed:.1f}s")


def test_criterion_3_codec_round_trip():
    records = fixture.synth_fixture(2024, 10_000)
    t0 = time.perf_counter()
    codec = data.fit_codec(records, data.survey_schema())
    schema = codec.schema
    cat_mismatch, num_err, geo_err, len_mismatch = 0, 0.0, 0.0, 0
    geo_range = 2 * data.HALF_EXTENT
    for r in records:
        back = data.decode(codec, data.encode(codec, r))
        for v in schema.variables:
            a, b = r.attributes[v.name], back.attributes[v.name]
            if v.is_categorical:
                cat_mismatch += a != b
            else:
                num_err = max(num_err, abs(a - b) / (v.high - v.low))
        len_mismatch += len(r.trips) != len(back.trips)
        for t0_, t1_ in zip(r.trips, back.trips):
            cat_mismatch += t0_.purpose != t1_.purpose
            geo_err = max(geo_err, max(abs(x - y) for x, y in zip(
                (t0_.ox, t0_.oy, t0_.dx, t0_.dy), (t1_.ox, t1_.oy, t1_.dx, t1_.dy))) / geo_range)
    elapsed = time.perf_counter() - t0
    ok = cat_mismatch == 0 and len_mismatch == 0 and num_err <= 1e-9 and geo_err <= 1e-9 and elapsed < 10
    assert helpers.report_criterion(
        3, ok, f"{len(records)} records, {cat_mismatch} categorical mismatches, numeric err {num_err:.1e}·range, "
               f"geo err {geo_err:.1e}·range; {elapsed:.1f}s")


def test_criterion_4_srmse_oracle():
    values = {
        "identity": (ev.srmse_vectors([0.2, 0.3, 0.5], [0.2, 0.3, 0.5]), 0.0),
        "[0.6,0.4] vs [0.5,0.5]": (ev.srmse_vectors([0.6, 0.4], [0.5, 0.5]), 0.2),
        "disjoint unit vectors": (ev.srmse_vectors([0.0, 1.0], [1.0, 0.0]), 2.0),
    }
    errs = {k: abs(got - want) for k, (got, want) in values.items()}
    ok = max(errs.values()) <= 1e-12
    assert helpers.report_criterion(4, ok, ", ".join(f"{k} err {e:.1e}" for k, e in errs.items()))


def test_criterion_5_pca_oracle():
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    cov = q @ np.diag([9.0, 5.0, 3.0, 1.5, 0.7, 0.2]) @ q.T
    x = rng.multivariate_normal(np.zeros(6), cov, size=5000)
    res = ev.pca(x, 6)
    z = (x - x.mean(axis=0)) / x.std(axis=0)
    vals, vecs = helpers.jacobi_eigh(z.T @ z / len(z))
    cos_dist = max(1 - abs(res.components[i] @ vecs[:, i]) for i in range(6))
    ortho = np.abs(res.components @ res.components.T - np.eye(6)).max()
    t = np.linspace(-2, 3, 40)
    perfect = ev.pca(np.column_stack([t, 2 * t + 1]), 1).explained_variance_ratio[0]
    ok = cos_dist <= 1e-6 and ortho <= 1e-9 and abs(perfect - 1) <= 1e-9
    assert helpers.report_criterion(
        5, ok, f"max cosine distance {cos_dist:.1e}, orthonormality err {ortho:.1e}, "
               f"perfect-correlation PC1 ratio {perfect:.12f}")


@pytest.fixture(scope="module")
def noiseless_runs():
    t0 = time.perf_counter()
    runs = {s: experiments.toy_fidelity_run(s, 0.0) for s in SEEDS}
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_criterion_6_toy_fidelity(noiseless_runs):
    runs, elapsed = noiseless_runs
    passing = [s for s, r in runs.items() if max(r.srmse.values()) < 0.5]
    ok = len(passing) >= 2 and elapsed / len(SEEDS) <= 300
    detail = "; ".join(f"seed {s}: " + ", ".join(f"{k} {v:.3f}" for k, v in r.srmse.items())
                       for s, r in runs.items())
    assert helpers.report_criterion(
        6, ok, f"{len(passing)}/3 seeds with every marginal SRMSE < 0.5 ({detail}); "
               f"{elapsed / len(SEEDS):.0f}s per run")


@pytest.mark.slow
def test_criterion_7_noise_utility_trend(noiseless_runs):
    runs, elapsed0 = noiseless_runs
    t0 = time.perf_counter()
    noisy = {s: experiments.toy_fidelity_run(s, 2.0) for s in SEEDS}
    elapsed = elapsed0 + time.perf_counter() - t0
    passing = [s for s in SEEDS if noisy[s].mean_srmse >= runs[s].mean_srmse]
    ok = len(passing) >= 2 and elapsed <= 900
    detail = "; ".join(f"seed {s}: {runs[s].mean_srmse:.3f} -> {noisy[s].mean_srmse:.3f}" for s in SEEDS)
    assert helpers.report_criterion(
        7, ok, f"{len(passing)}/3 seeds with mean SRMSE(sigma=2) >= SRMSE(sigma=0) ({detail}); {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_8_mia_contrast():
    t0 = time.perf_counter()
    open_auc = {s: experiments.mia_run(s, None).auc for s in SEEDS}
    private_auc = {s: experiments.mia_run(s, 1.0).auc for s in SEEDS}
    elapsed = time.perf_counter() - t0
    n_open = sum(a >= 0.7 for a in open_auc.values())
    n_private = sum(a <= 0.65 for a in private_auc.values())
    ok = n_open >= 2 and n_private >= 2 and elapsed <= 600
    fmt = lambda d: ", ".join(f"{v:.3f}" for v in d.values())  # noqa: E731
    assert helpers.report_criterion(
        8, ok, f"non-private AUC [{fmt(open_auc)}] ({n_open}/3 >= 0.7); "
               f"sigma=1 AUC [{fmt(private_auc)}] ({n_private}/3 <= 0.65); {elapsed:.0f}s")


def test_criterion_9_determinism_and_resume(tmp_path):
    ds = helpers.survey_dataset(n=40)
    net = helpers.tiny_config(ds.codec)
    cfg = trainer.TrainConfig(epochs=3, batch_size=8, privacy=PrivacyConfig(1.0, 1.0), lr_d=0.05, lr_g=0.002,
                              seed=4)
    checks = {}

    for name in ("a", "b"):
        tr = trainer.Trainer(ds, cfg, net)
        tr.run()
        trainer.save_checkpoint(tmp_path / f"{name}.dpct", tr.checkpoint())
    checks["checkpoints"] = (tmp_path / "a.dpct").read_bytes() == (tmp_path / "b.dpct").read_bytes()

    real = tmp_path / "real.csv"
    data.write_diary_csv(real, ds.records(), ds.schema)
    outputs = {}
    for name in ("a", "b"):
        assert cli.main(["sample", "--checkpoint", str(tmp_path / "a.dpct"), "--count", "50", "--seed", "2",
                         "--out", str(tmp_path / f"sample_{name}")]) == 0
        assert cli.main(["evaluate", "--real", str(real), "--synthetic", str(tmp_path / f"sample_{name}" /
                         "synthetic.csv"), "--out", str(tmp_path / f"eval_{name}")]) == 0
        outputs[name] = {p.relative_to(tmp_path / f"eval_{name}"): p.read_bytes()
                         for p in (tmp_path / f"eval_{name}").rglob("*")
                         if p.is_file() and p.name != "run_manifest.json"}
    checks["samples"] = ((tmp_path / "sample_a" / "synthetic.csv").read_bytes()
                         == (tmp_path / "sample_b" / "synthetic.csv").read_bytes())
    checks["reports"] = outputs["a"] == outputs["b"] and len(outputs["a"]) > 5

    full = trainer.Trainer(ds, cfg, net)
    full_hist = full.run()
    part = trainer.Trainer(ds, cfg, net)
    part.run(max_steps=7)
    trainer.save_checkpoint(tmp_path / "mid.dpct", part.checkpoint())
    resumed = trainer.Trainer.resume(ds, trainer.load_checkpoint(tmp_path / "mid.dpct"))
    rest = resumed.run()
    trainer.save_checkpoint(tmp_path / "resumed.dpct", resumed.checkpoint())
    checks["resume"] = ((tmp_path / "resumed.dpct").read_bytes() == (tmp_path / "a.dpct").read_bytes()
                        and rest.column("d_loss") == full_hist.column("d_loss")[7:]
                        and rest.column("g_loss") == full_hist.column("g_loss")[7:])

    ok = all(checks.values())
    assert helpers.report_criterion(
        9, ok, ", ".join(f"{k} {'identical' if v else 'DIFFER'}" for k, v in checks.items()))


def test_criterion_10_fixture_statistics():
    ages = np.array([r.attributes["P_AGE"] for r in fixture.synth_fixture(7, 10_000)])
    mean, sd = ages.mean(), ages.std()
    ok = abs(mean - 43) <= 1 and abs(sd - 20) <= 1 and ages.min() >= 5 and ages.max() <= 95
    assert helpers.report_criterion(
        10, ok, f"n={ages.size}, mean {mean:.2f}, sd {sd:.2f}, range [{ages.min()}, {ages.max()}]")
