import numpy as np
import pytest

from ratetip import default_params, fokker_planck as fp, indicators as ind, model, sde_mc
from ratetip.errors import TooFewSurvivors


@pytest.fixture(scope="module")
def headline_run():
    p = default_params()
    cfg = sde_mc.EnsembleConfig(n_paths=100_000, dt_sim=1e-3, seed=42)
    return sde_mc.run_ensemble(cfg, p, (p.t0, 10.0)), p, cfg


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            sde_mc.EnsembleConfig(n_paths=0)
        with pytest.raises(ValueError):
            sde_mc.EnsembleConfig(n_paths=10, dt_sim=-1.0)

    def test_dt_sim_must_divide_reporting_step(self):
        p = default_params()
        cfg = sde_mc.EnsembleConfig(n_paths=10, dt_sim=0.02)
        with pytest.raises(ValueError):
            sde_mc.run_ensemble(cfg, p, (0.0, 1.0))


class TestEscapeFraction:
    def test_headline_value(self, headline_run):
        result, _, cfg = headline_run
        se = np.sqrt(0.36 * 0.64 / cfg.n_paths)
        assert result.escape_fraction == pytest.approx(0.36, abs=0.03)
        assert se < 0.002

    def test_counts_match(self, headline_run):
        result, _, _ = headline_run
        assert result.escape_fraction == result.escape_times.size / result.n_paths

    def test_histogram_mode_with_threshold(self):
        p = default_params()
        curve = fp.threshold_curve(p, 1.5)
        cfg = sde_mc.EnsembleConfig(n_paths=20_000, dt_sim=1e-3, seed=3)
        res = sde_mc.run_ensemble(cfg, p, (p.t0, 10.0), threshold=curve)
        edges = np.arange(-10.0, 10.0 + 0.25, 0.25)
        counts, _ = np.histogram(res.escape_times, bins=edges)
        mode = edges[np.argmax(counts)] + 0.125
        assert mode == pytest.approx(1.5, abs=0.3)

    def test_monotone_in_noise(self):
        # differences far exceed two standard errors on this noise grid
        p = default_params()
        fractions = []
        for D in (0.004, 0.008, 0.016):
            cfg = sde_mc.EnsembleConfig(n_paths=100_000, dt_sim=1e-3, seed=5)
            res = sde_mc.run_ensemble(cfg, default_params(D=D), (p.t0, 6.0))
            fractions.append(res.escape_fraction)
        se = np.sqrt(0.5 * 0.5 / 100_000)
        assert fractions[1] - fractions[0] > 2 * se
        assert fractions[2] - fractions[1] > 2 * se


class TestNoiselessLimit:
    def test_matches_deterministic_trajectory(self):
        # noise amplitude at D = 1e-30 is far below the tolerance, giving
        # the noiseless limit without a zero-noise special case
        p = default_params(D=1e-30)
        cfg = sde_mc.EnsembleConfig(n_paths=4, dt_sim=1e-4, seed=1)
        res = sde_mc.run_ensemble(cfg, p, (p.t0, 10.0))
        ref = model.deterministic_trajectory(p.x0, p.t0, 10.0, p)
        assert res.mean[-1] == pytest.approx(ref.states[-1], abs=1e-6)

    def test_step_halving_changes_endpoint_below_tolerance(self):
        p = default_params(D=1e-30)
        ends = []
        for dt_sim in (1e-4, 5e-5):
            cfg = sde_mc.EnsembleConfig(n_paths=2, dt_sim=dt_sim, seed=1)
            res = sde_mc.run_ensemble(cfg, p, (p.t0, 10.0))
            ends.append(res.mean[-1])
        assert abs(ends[1] - ends[0]) < 1e-6


class TestStrongOrderSanity:
    def test_escape_fraction_stable_under_step_halving(self):
        # common-random-number refinement: the same Brownian increments
        # drive the coarse and the fine integrator, so the difference in
        # the escape fraction isolates the time-discretization bias
        p = default_params()
        n = 20_000
        rng = np.random.default_rng(99)
        t0, t1, dt = p.t0, 6.0, 2e-3
        n_steps = int(round((t1 - t0) / dt))
        x_c = np.full(n, p.x0)
        x_f = np.full(n, p.x0)
        esc_c = np.zeros(n, bool)
        esc_f = np.zeros(n, bool)
        sig = np.sqrt(2 * p.D * dt / 2)
        for k in range(n_steps):
            t = t0 + k * dt
            w1 = rng.standard_normal(n)
            w2 = rng.standard_normal(n)
            # fine: two half steps
            for j, w in ((0, w1), (1, w2)):
                lam = model.lambda_of_t(t + j * dt / 2, p.ramp)
                x_f = np.where(esc_f, x_f,
                               x_f + model.drift(x_f, lam) * dt / 2 + sig * w)
                esc_f |= x_f >= p.xT
            # coarse: one full step with the summed increment
            lam = model.lambda_of_t(t, p.ramp)
            x_c = np.where(esc_c, x_c,
                           x_c + model.drift(x_c, lam) * dt + sig * (w1 + w2))
            esc_c |= x_c >= p.xT
        fc, ff = esc_c.mean(), esc_f.mean()
        se = np.sqrt(ff * (1 - ff) / n)
        assert abs(fc - ff) < se


class TestDeterminism:
    def test_identical_seed_identical_result(self):
        p = default_params()
        a = sde_mc.run_ensemble(sde_mc.EnsembleConfig(20_000, seed=7), p,
                                (p.t0, -5.0))
        b = sde_mc.run_ensemble(sde_mc.EnsembleConfig(20_000, seed=7), p,
                                (p.t0, -5.0))
        assert a.escape_fraction == b.escape_fraction
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.escape_times, b.escape_times)

    def test_worker_count_invariance(self):
        p = default_params()
        cfg = sde_mc.EnsembleConfig(40_000, seed=11)
        a = sde_mc.run_ensemble(cfg, p, (p.t0, -6.0), n_jobs=1)
        b = sde_mc.run_ensemble(cfg, p, (p.t0, -6.0), n_jobs=3)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.variance, b.variance)

    def test_different_seeds_differ(self):
        p = default_params()
        a = sde_mc.run_ensemble(sde_mc.EnsembleConfig(5_000, seed=1), p,
                                (p.t0, -8.0))
        b = sde_mc.run_ensemble(sde_mc.EnsembleConfig(5_000, seed=2), p,
                                (p.t0, -8.0))
        assert not np.array_equal(a.mean, b.mean)


class TestEmpiricalIndicators:
    def test_frozen_window_matches_linear_well(self):
        # early window, stationary start: the sampled indicators sit on
        # the linear-well reference
        p = default_params()
        cfg = sde_mc.EnsembleConfig(n_paths=100_000, dt_sim=1e-3, seed=13,
                                    initial="stationary")
        res = sde_mc.run_ensemble(cfg, p, (-10.0, -7.0))
        series = sde_mc.empirical_indicators(res)
        base = ind.ou_baseline(2.0, p.D, p.dt)
        sel = series.times > -9.0
        a_bar = float(np.mean(series.autocorrelation[sel]))
        v_bar = float(np.mean(series.variance[sel]))
        assert a_bar == pytest.approx(base.a, abs=0.01)
        assert v_bar == pytest.approx(base.V, rel=0.15)

    def test_single_path_degenerate(self):
        p = default_params()
        res = sde_mc.run_ensemble(sde_mc.EnsembleConfig(1, seed=0), p,
                                  (p.t0, p.t0 + 0.1))
        with pytest.raises(TooFewSurvivors):
            sde_mc.empirical_indicators(res)

    def test_agreement_with_density_pipeline(self):
        # cross-method check during the ramp at 20 checkpoints
        p = default_params()
        cfg = sde_mc.EnsembleConfig(n_paths=100_000, dt_sim=5e-4, seed=17,
                                    initial="stationary")
        res = sde_mc.run_ensemble(cfg, p, (-10.0, 0.0))
        series = ind.lag1_series(p, (-10.0, 0.0))
        checks = np.linspace(-9.0, -0.1, 20)
        n = res.survivors.astype(float)
        for tq in checks:
            i = int(np.argmin(np.abs(res.times - tq)))
            j = int(np.argmin(np.abs(series.times - tq)))
            a_mc, a_fp = res.autocorrelation[i], series.autocorrelation[j]
            se_a = (1 - a_fp**2) / np.sqrt(n[i])
            assert abs(a_mc - a_fp) < max(3 * se_a, 3e-4)
            v_mc, v_fp = res.variance[i], series.variance[j]
            se_v = v_fp * np.sqrt(2.0 / n[i])
            assert abs(v_mc - v_fp) < max(3 * se_v, 2e-5)


class TestCsv:
    def test_histogram_metadata_line(self, tmp_path, headline_run):
        result, _, cfg = headline_run
        f = tmp_path / "h.csv"
        with open(f, "w", newline="\n") as fh:
            sde_mc.write_escape_histogram_csv(fh, result)
        lines = f.read_text().splitlines()
        assert lines[0].startswith("# {")
        assert f'"seed": {cfg.seed}' in lines[0]
        assert lines[1] == "bin_left,bin_right,count"

    def test_indicator_csv(self, tmp_path, headline_run):
        result, _, _ = headline_run
        f = tmp_path / "i.csv"
        with open(f, "w", newline="\n") as fh:
            sde_mc.write_mc_indicator_csv(fh, result)
        assert f.read_text().splitlines()[1] == "t,mean,variance,autocorrelation,survivors"
