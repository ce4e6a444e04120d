import math

import numpy as np
import pytest

from latticeblow.drift import get_drift
from latticeblow.kernel import WindowTooNarrow, get_walk, kernel_slice
from latticeblow.lattice import InitialProfile
from latticeblow.noise import NoiseField
from latticeblow.picard import (
    DetVsNoiseReport,
    IndependenceReport,
    PicardConfig,
    SpatialGrowthReport,
    build_iterates,
    det_vs_noise_experiment,
    independence_check,
    iterate_contraction_curve,
    locality_gap,
    spatial_growth_experiment,
)
from latticeblow.splitting import dt_refinement_floor

SRW = get_walk("srw")
LAZY = get_walk("lazy-srw")

DT128 = 1.0 / 128
DT512 = 1.0 / 512

# two-walk collision-time oracle (matrix exponential) for the flat-start
# driftless second moment at the origin, t = 0.25
K2_REF = 1.225304399347
# same oracle, adjacent-site correlation of the full solution
ADJ_CORR_REF = {0.25: 0.110179, 1.0: 0.309678}

# frozen squared successive-iterate differences, beta 16, 6 iterates,
# t = 0.25, grid 2^-7, seed 43, 4000 reps
CONTRACTION_REF = (
    2.010197e-01,
    2.211279e-02,
    1.622190e-03,
    9.401163e-05,
    4.027670e-06,
    1.108051e-07,
)

# frozen coupled gaps to the direct scheme, ladder beta {16, 64, 256},
# 12 iterates, t = 0.25, grid 2^-9, seed 67, 100 reps
LOCALITY_REF = (9.470494e-07, 8.612827e-07, 8.473885e-07)
# closed-form localization tail at the top of that ladder
LOCALITY_TAIL_BOUND = 6.94058366828e-07


def _se(samples: np.ndarray) -> float:
    return samples.std(ddof=1) / math.sqrt(len(samples))


@pytest.fixture(scope="module")
def origin_vals():
    cfg = PicardConfig(beta=16.0, n_iter=3, t=0.25, time_grid=DT128)
    noise = NoiseField(seed=81, dt=DT128)
    return cfg, build_iterates(cfg, (0,), noise, noise.replicate_seeds(5000))


@pytest.fixture(scope="module")
def deep_vals():
    cfg = PicardConfig(beta=64.0, n_iter=6, t=0.25, time_grid=DT128)
    noise = NoiseField(seed=82, dt=DT128)
    return cfg, build_iterates(cfg, (0,), noise, noise.replicate_seeds(5000))


@pytest.fixture(scope="module")
def contraction_q():
    cfg = PicardConfig(beta=16.0, n_iter=6, t=0.25, time_grid=DT128)
    return cfg, iterate_contraction_curve(cfg, NoiseField(seed=43, dt=DT128), 4000)


@pytest.fixture(scope="module")
def det_report():
    return det_vs_noise_experiment(0, 4.0, 0.05, NoiseField(seed=73, dt=1e-3), 10000)


class TestPicardConfig:
    def test_properties(self):
        cfg = PicardConfig(beta=16.0, n_iter=3, t=0.25, time_grid=DT128)
        assert cfg.steps == 32
        assert cfg.radius == 2
        assert cfg.reach == 9

    def test_radius_rounds_down(self):
        cfg = PicardConfig(beta=64.0, n_iter=8, t=0.25, time_grid=DT128)
        assert cfg.radius == 4
        assert cfg.reach == 40

    def test_accepts_integer_valued_float_n_iter(self):
        assert PicardConfig(beta=16.0, n_iter=3.0, t=0.25, time_grid=DT128).n_iter == 3

    def test_validation(self):
        with pytest.raises(ValueError, match="beta must be positive"):
            PicardConfig(beta=0.0, n_iter=2, t=0.25, time_grid=DT128)
        with pytest.raises(ValueError, match="positive integer"):
            PicardConfig(beta=16.0, n_iter=0, t=0.25, time_grid=DT128)
        with pytest.raises(ValueError, match="positive integer"):
            PicardConfig(beta=16.0, n_iter=2.5, t=0.25, time_grid=DT128)
        with pytest.raises(ValueError, match=r"t must lie in \(0, 1\]"):
            PicardConfig(beta=16.0, n_iter=2, t=0.0, time_grid=DT128)
        with pytest.raises(ValueError, match=r"t must lie in \(0, 1\]"):
            PicardConfig(beta=16.0, n_iter=2, t=1.5, time_grid=DT128)
        with pytest.raises(ValueError, match=r"time_grid must lie in \(0, t\]"):
            PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=0.3)
        with pytest.raises(ValueError, match="divide"):
            PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=0.25 / 10.5)
        with pytest.raises(ValueError, match="radius"):
            # sqrt(2 * 0.25) < 1: the iterates would never leave their site
            PicardConfig(beta=2.0, n_iter=2, t=0.25, time_grid=DT128)


class TestBuildIterates:
    def test_depth_zero_is_flat(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=5, dt=DT128)
        vals = build_iterates(cfg, (0, 3), noise, noise.replicate_seeds(7))
        assert vals.shape == (3, 2, 7)
        np.testing.assert_array_equal(vals[0], np.ones((2, 7)))

    def test_zero_noise_fixed_point(self):
        # without increments every depth stays at the flat profile
        cfg = PicardConfig(beta=16.0, n_iter=4, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=5, dt=DT128)
        vals = build_iterates(
            cfg, (0,), noise, noise.replicate_seeds(3), zero_noise=True
        )
        np.testing.assert_array_equal(vals, np.ones_like(vals))

    def test_zero_noise_ignores_granularity(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        coarse = NoiseField(seed=5, dt=1.0 / 64)
        vals = build_iterates(
            cfg, (0,), coarse, coarse.replicate_seeds(2), zero_noise=True
        )
        np.testing.assert_array_equal(vals, np.ones_like(vals))

    def test_deterministic_given_seeds(self):
        cfg = PicardConfig(beta=16.0, n_iter=3, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=9, dt=DT128)
        seeds = noise.replicate_seeds(20)
        a = build_iterates(cfg, (0,), noise, seeds)
        b = build_iterates(cfg, (0,), noise, seeds)
        np.testing.assert_array_equal(a, b)
        other = NoiseField(seed=10, dt=DT128)
        c = build_iterates(cfg, (0,), other, other.replicate_seeds(20))
        assert not np.array_equal(a, c)

    def test_first_depth_matches_exact_variance(self, origin_vals):
        # depth 1 is a Gaussian integral of the kernel against the flat
        # profile; its variance is a finite double sum we can evaluate
        cfg, vals = origin_vals
        u1 = vals[1, 0]
        exact = sum(
            kernel_slice(SRW, u * cfg.time_grid).value_at(j) ** 2 * cfg.time_grid
            for u in range(1, cfg.steps + 1)
            for j in range(-cfg.radius, cfg.radius + 1)
        )
        assert exact == pytest.approx(0.198982634, abs=1e-9)
        mc_var = u1.var(ddof=1)
        se_var = _se((u1 - u1.mean()) ** 2)
        assert abs(mc_var - exact) <= 3.0 * se_var

    def test_every_depth_has_mean_one(self, origin_vals):
        cfg, vals = origin_vals
        for m in range(1, cfg.n_iter + 1):
            samples = vals[m, 0]
            assert abs(samples.mean() - 1.0) <= 3.0 * _se(samples)

    def test_deep_iterate_second_moment_matches_collision_oracle(self, deep_vals):
        cfg, vals = deep_vals
        sq = vals[-1, 0] ** 2
        assert abs(sq.mean() - K2_REF) <= 3.0 * _se(sq)

    def test_second_moments_stay_under_exponential_cap(self, deep_vals):
        cfg, vals = deep_vals
        cap = 2.0 * math.exp(16.0 * cfg.t)
        for m in range(cfg.n_iter + 1):
            sq = vals[m, 0] ** 2
            assert sq.mean() <= cap + 3.0 * _se(sq)

    def test_lazy_walk(self):
        cfg = PicardConfig(beta=16.0, n_iter=3, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=83, dt=DT128)
        ones = build_iterates(
            cfg, (0,), noise, noise.replicate_seeds(4), walk=LAZY, zero_noise=True
        )
        np.testing.assert_array_equal(ones, np.ones_like(ones))
        vals = build_iterates(cfg, (0,), noise, noise.replicate_seeds(500), walk=LAZY)
        samples = vals[-1, 0]
        assert abs(samples.mean() - 1.0) <= 3.0 * _se(samples)

    def test_granularity_mismatch_rejected(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        coarse = NoiseField(seed=1, dt=1.0 / 64)
        with pytest.raises(ValueError, match="granularity"):
            build_iterates(cfg, (0,), coarse, coarse.replicate_seeds(2))

    def test_explicit_window_too_narrow(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=1, dt=DT128)
        with pytest.raises(WindowTooNarrow, match="cannot hold sites"):
            build_iterates(cfg, (0,), noise, noise.replicate_seeds(2), window=3)
        # the reach itself is the minimal window for the origin probe
        vals = build_iterates(
            cfg, (0,), noise, noise.replicate_seeds(2), window=cfg.reach
        )
        assert vals.shape == (3, 1, 2)

    def test_requires_a_site(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=1, dt=DT128)
        with pytest.raises(ValueError, match="at least one site"):
            build_iterates(cfg, (), noise, noise.replicate_seeds(2))


class TestIterateContraction:
    def test_frozen_curve(self, contraction_q):
        _, curve = contraction_q
        for est, ref in zip(curve, CONTRACTION_REF):
            assert est.mean == pytest.approx(ref, rel=1e-5)

    def test_first_difference_under_linear_bound(self, contraction_q):
        cfg, curve = contraction_q
        assert curve[0].mean + 3.0 * curve[0].stderr <= 8.0 * cfg.t

    def test_consecutive_ratios_decay_factorially(self, contraction_q):
        cfg, curve = contraction_q
        for m in range(len(curve) - 1):
            ratio = curve[m + 1].mean / curve[m].mean
            assert ratio <= 8.0 * cfg.t / (m + 1) * 1.25

    def test_ratios_at_longer_horizon(self):
        cfg = PicardConfig(beta=8.0, n_iter=5, t=0.5, time_grid=DT128)
        curve = iterate_contraction_curve(cfg, NoiseField(seed=44, dt=DT128), 3000)
        for m in range(len(curve) - 1):
            ratio = curve[m + 1].mean / curve[m].mean
            assert ratio <= 8.0 * cfg.t / (m + 1) * 1.25

    def test_mid_depth_ratio_is_contractive(self, contraction_q):
        _, curve = contraction_q
        assert curve[4].mean / curve[3].mean <= 1.0

    def test_chunking_does_not_change_estimates(self):
        cfg = PicardConfig(beta=16.0, n_iter=4, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=43, dt=DT128)
        small = iterate_contraction_curve(cfg, noise, 800, chunk=128)
        whole = iterate_contraction_curve(cfg, noise, 800, chunk=10**9)
        for a, b in zip(small, whole):
            assert a.mean == b.mean
            assert a.stderr == b.stderr


class TestLocalityGap:
    def test_gap_shrinks_along_beta_ladder(self):
        cfg = PicardConfig(beta=16.0, n_iter=12, t=0.25, time_grid=DT512)
        noise = NoiseField(seed=67, dt=DT512)
        gaps = locality_gap(cfg, (16.0, 64.0, 256.0), noise, 100)
        for est, ref in zip(gaps, LOCALITY_REF):
            assert est.mean == pytest.approx(ref, rel=1e-5)
        for lo, hi in zip(gaps[1:], gaps[:-1]):
            assert lo.mean <= hi.mean + hi.stderr
        floor = dt_refinement_floor(
            InitialProfile.constant(1.0), get_drift("zero"), 0.0, cfg.t, noise, 14, 200
        )
        assert gaps[-1].mean <= 10.0 * floor.mean
        assert (
            gaps[-1].mean
            <= LOCALITY_TAIL_BOUND + 3.0 * gaps[-1].stderr + floor.mean
        )

    def test_ladder_must_increase(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        noise = NoiseField(seed=1, dt=DT128)
        with pytest.raises(ValueError, match="strictly increasing"):
            locality_gap(cfg, (64.0, 16.0), noise, 4)


class TestIndependenceCheck:
    def test_separated_probes_are_uncorrelated(self):
        cfg = PicardConfig(beta=16.0, n_iter=6, t=0.25, time_grid=DT128)
        report = independence_check(
            cfg, 1.0, 3, NoiseField(seed=71, dt=DT128), 2500
        )
        assert report.sites == (0, 36, 72)
        assert report.separation == 2 * cfg.reach
        assert report.max_abs_correlation == pytest.approx(0.027257, abs=1e-5)
        assert report.max_abs_correlation <= 4.0 / math.sqrt(2500)
        assert report.per_iterate_max[0] == 0.0
        assert report.max_abs_correlation == max(report.per_iterate_max)

    def test_adjacent_probes_are_positively_correlated(self):
        cfg = PicardConfig(beta=16.0, n_iter=10, t=1.0, time_grid=1.0 / 64)
        report = independence_check(
            cfg, 0.5, 2, NoiseField(seed=72, dt=1.0 / 64), 1500
        )
        assert report.separation == 1
        rho = report.correlations[0, 1]
        assert rho == pytest.approx(0.262587, abs=1e-5)
        assert rho >= 0.2
        assert rho >= 4.0 / math.sqrt(1500)

    def test_adjacent_correlation_matches_collision_oracle(self):
        # the two-site covariance of the full solution at t = 0.25 gives
        # correlation 0.110; the localized iterates must reproduce it
        cfg = PicardConfig(beta=64.0, n_iter=8, t=0.25, time_grid=DT128)
        report = independence_check(
            cfg, 0.5, 2, NoiseField(seed=72, dt=DT128), 2500
        )
        rho = report.correlations[0, 1]
        rho_se = (1.0 - rho**2) / math.sqrt(2500)
        assert abs(rho - ADJ_CORR_REF[0.25]) <= 3.0 * rho_se

    def test_single_site_is_vacuous(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        report = independence_check(cfg, 1.0, 1, NoiseField(seed=71, dt=DT128), 50)
        assert report.max_abs_correlation == 0.0
        np.testing.assert_array_equal(report.correlations, np.eye(1))

    def test_site_count_validation(self):
        cfg = PicardConfig(beta=16.0, n_iter=2, t=0.25, time_grid=DT128)
        with pytest.raises(ValueError, match="site_count"):
            independence_check(cfg, 1.0, 0, NoiseField(seed=1, dt=DT128), 4)


class TestSpatialGrowth:
    CFG = dict(beta=16.0, n_iter=4, t=0.25, time_grid=DT128)

    def test_single_probe_identity(self):
        cfg = PicardConfig(**self.CFG)
        report = spatial_growth_experiment(
            cfg, 2.0, 1, NoiseField(seed=74, dt=DT128), 1500
        )
        assert abs(report.probability.mean - (1.0 - report.single_site.mean)) < 1e-12
        assert report.predicted == pytest.approx(report.probability.mean, abs=1e-12)

    def test_factorizes_over_separated_probes(self):
        cfg = PicardConfig(**self.CFG)
        report = spatial_growth_experiment(
            cfg, 2.0, 8, NoiseField(seed=74, dt=DT128), 1500
        )
        assert report.probes == tuple(2 * cfg.reach * i for i in range(8))
        assert report.probability.mean == pytest.approx(0.709333, abs=1e-5)
        assert report.predicted == pytest.approx(0.710936, abs=1e-5)
        slack = math.hypot(report.probability.stderr, report.predicted_stderr)
        assert abs(report.probability.mean - report.predicted) <= 3.0 * slack

    def test_decreasing_in_probe_count(self):
        # probe sets nest and the noise is keyed by absolute site, so the
        # all-below frequency is monotone in the count replicate by
        # replicate, not just in expectation
        cfg = PicardConfig(**self.CFG)
        noise = NoiseField(seed=74, dt=DT128)
        probs = [
            spatial_growth_experiment(cfg, 2.0, n, noise, 1500).probability.mean
            for n in (1, 4, 8)
        ]
        assert probs[2] <= probs[1] <= probs[0]

    def test_vanishing_level(self):
        cfg = PicardConfig(**self.CFG)
        report = spatial_growth_experiment(
            cfg, 1e-9, 4, NoiseField(seed=74, dt=DT128), 400
        )
        assert report.probability.mean == 0.0

    def test_validation(self):
        cfg = PicardConfig(**self.CFG)
        noise = NoiseField(seed=1, dt=DT128)
        with pytest.raises(ValueError, match="level"):
            spatial_growth_experiment(cfg, 0.0, 2, noise, 4)
        with pytest.raises(ValueError, match="probe_count"):
            spatial_growth_experiment(cfg, 2.0, 0, noise, 4)


class TestDetVsNoise:
    def test_threshold_frequency_under_bound(self, det_report):
        report = det_report
        assert report.probability_bound == pytest.approx(4.0 * 0.05 * math.exp(0.05))
        assert report.threshold_probability.mean == pytest.approx(0.0262, abs=1e-12)
        assert (
            report.threshold_probability.mean
            <= report.probability_bound + 3.0 * report.threshold_probability.stderr
        )

    def test_residual_second_moment_under_bound(self, det_report):
        report = det_report
        det = 4.0 * kernel_slice(SRW, 0.05).value_at(0)
        assert report.deterministic_part == pytest.approx(det)
        assert report.second_moment_bound == pytest.approx(det**2 * 0.05 * math.exp(0.05))
        assert report.residual_second_moment.mean == pytest.approx(0.731124, abs=1e-6)
        assert (
            report.residual_second_moment.mean
            <= report.second_moment_bound + 3.0 * report.residual_second_moment.stderr
        )

    def test_residual_is_centered(self, det_report):
        res = det_report.residuals
        assert abs(res.mean()) <= 3.0 * _se(res)

    def test_spike_scale_cancels_exactly(self, det_report):
        # the driftless run is linear in the spike height, and the
        # threshold scales with it, so doubling M doubles every residual
        # pathwise and leaves the exceedance indicators untouched
        hi = det_vs_noise_experiment(0, 8.0, 0.05, NoiseField(seed=73, dt=1e-3), 10000)
        np.testing.assert_array_equal(hi.residuals, 2.0 * det_report.residuals)
        assert (
            hi.threshold_probability.mean
            == det_report.threshold_probability.mean
        )

    def test_off_origin_spike(self):
        report = det_vs_noise_experiment(1, 4.0, 0.05, NoiseField(seed=73, dt=1e-3), 10000)
        assert report.deterministic_part == pytest.approx(
            4.0 * kernel_slice(SRW, 0.05).value_at(1)
        )
        assert (
            report.threshold_probability.mean
            <= report.probability_bound + 3.0 * report.threshold_probability.stderr
        )

    def test_large_t_bound_is_vacuous(self):
        report = det_vs_noise_experiment(0, 2.0, 1.0, NoiseField(seed=73, dt=0.01), 200)
        assert report.probability_bound == 1.0
        assert report.threshold_probability.mean <= 1.0

    def test_validation(self):
        noise = NoiseField(seed=1, dt=1e-3)
        with pytest.raises(ValueError, match="M must be positive"):
            det_vs_noise_experiment(0, 0.0, 0.05, noise, 4)
        with pytest.raises(ValueError, match="t must be positive"):
            det_vs_noise_experiment(0, 4.0, 0.0, noise, 4)


class TestReportShapes:
    def test_report_types_are_frozen(self):
        for cls in (IndependenceReport, SpatialGrowthReport, DetVsNoiseReport):
            assert cls.__dataclass_params__.frozen
