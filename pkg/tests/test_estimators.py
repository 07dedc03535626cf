"""Gradient estimators: oracles, evaluation counts, variance machinery.

The main correctness oracle is a slow path-by-path reimplementation of
each estimator built directly on scalar tape replays; the vectorized
estimators must agree with it to rounding.  Statistical assertions use
fixed seeds and standard-error bands.
"""

import numpy as np
import pytest

import mcadjoint.estimators as est
import mcadjoint.model as mdl
import mcadjoint.tape as tp
from mcadjoint.rng_paths import PathBatch, generate


def linear_toy_tape():
    """y = a1 w + a2: Ey = a2, dy/da1 = w, dy/da2 = 1."""
    return tp.record(lambda p, w: [p[0] * w[0] + p[1]], n_params=2, n_inputs=1)


def constant_tape(value=5.0):
    """y = value regardless of the parameter."""
    return tp.record(lambda p, w: [p[0] * 0.0 + value], n_params=1, n_inputs=1)


def fixture_tape():
    spec, curve = mdl.default_fixture()
    return spec, curve, mdl.build_model_tape(spec, curve)


def slow_est1(tape, params, paths, targets):
    y = np.array([tape.forward(params, w) for w in paths.draws])
    lam = y.mean(axis=0) - targets
    terms = np.array([tape.reverse(params, w, lam) for w in paths.draws])
    return terms.mean(axis=0)


def slow_est2(tape, params, paths, targets):
    y = np.array([tape.forward(params, w) for w in paths.draws])
    terms = [tape.reverse(params, paths.draws[j], y[j - 1] - targets)
             for j in range(1, paths.n_paths)]
    return np.mean(terms, axis=0)


def slow_est3(tape, params, paths, targets):
    y = np.array([tape.forward(params, w) for w in paths.draws])
    terms = []
    for j in range(1, paths.n_paths):
        s = y[:j].sum(axis=0) / j
        terms.append(tape.reverse(params, paths.draws[j], s - targets))
    return np.mean(terms, axis=0)


class TestAlgorithm1:
    def test_constant_payoff_zero_gradient(self):
        tape = constant_tape()
        e = est.grad_est1(tape, [0.3], generate(1, 64, 1), [0.0])
        assert (e.grad == 0.0).all()

    def test_costs_exact(self):
        tape = linear_toy_tape()
        e = est.grad_est1(tape, [0.7, 1.3], generate(2, 100, 1), [0.0])
        assert e.f_evals == 200
        assert e.r_evals == 100
        assert e.algorithm == 1

    def test_matches_slow_oracle(self):
        spec, curve, tape = fixture_tape()
        paths = generate(3, 40, 5)
        e = est.grad_est1(tape, curve.knot_vols, paths, spec.prices)
        oracle = slow_est1(tape, curve.knot_vols, paths, spec.prices)
        np.testing.assert_allclose(e.grad, oracle, rtol=1e-12)

    def test_linear_toy_within_three_ses(self):
        # d G / d a = (Ey - C) * E(dy/da) = (a2 - C) * [0, 1] symbolically;
        # the error band comes from independent replications because the
        # internal variance conditions on the pass-one mean
        tape = linear_toy_tape()
        params = np.array([0.7, 1.3])
        runs = np.array([
            est.grad_est1(tape, params, generate(400 + r, 10**5, 1), [0.4]).grad
            for r in range(30)
        ])
        analytic = np.array([0.0, 0.9])
        se = runs.std(axis=0, ddof=1) / np.sqrt(len(runs))
        assert (np.abs(runs.mean(axis=0) - analytic) < 3 * se).all()

    def test_single_param_toy_against_algebra_oracle(self):
        # y = a w + a, C = 0: Ey = a, so dG/da = (Ey - C) E[dy/da] = a.
        # The estimate itself is a (mean(w) + 1)^2, whose standard deviation
        # is 2a/sqrt(N) to leading order; both come from the same algebra.
        tape = tp.record(lambda p, w: [p[0] * w[0] + p[0]],
                         n_params=1, n_inputs=1)
        a, n = 1.5, 10**6
        e = est.grad_est1(tape, [a], generate(21, n, 1), [0.0])
        assert abs(e.grad[0] - a) < 3 * (2 * a / np.sqrt(n))

    def test_cache_toggle_same_result_fewer_forwards(self):
        spec, curve, tape = fixture_tape()
        paths = generate(5, 500, 5)
        default = est.grad_est1(tape, curve.knot_vols, paths, spec.prices)
        cached = est.grad_est1(tape, curve.knot_vols, paths, spec.prices,
                               cache_forward=True)
        assert (default.grad == cached.grad).all()
        assert default.f_evals == 1000 and cached.f_evals == 500
        assert default.r_evals == cached.r_evals == 500

    def test_rejects_empty(self):
        tape = linear_toy_tape()
        empty = PathBatch(draws=np.zeros((0, 1)), seed=0, generator_id="philox")
        with pytest.raises(ValueError):
            est.grad_est1(tape, [1.0, 1.0], empty, [0.0])


class TestAlgorithm2:
    def test_matched_constant_zero(self):
        tape = constant_tape(5.0)
        e = est.grad_est2(tape, [0.3], generate(1, 64, 1), [5.0])
        assert (e.grad == 0.0).all()

    def test_costs_exact(self):
        tape = linear_toy_tape()
        e = est.grad_est2(tape, [0.7, 1.3], generate(2, 100, 1), [0.0])
        assert e.f_evals == 100
        assert e.r_evals == 99

    def test_matches_slow_oracle(self):
        spec, curve, tape = fixture_tape()
        paths = generate(6, 40, 5)
        e = est.grad_est2(tape, curve.knot_vols, paths, spec.prices)
        oracle = slow_est2(tape, curve.knot_vols, paths, spec.prices)
        np.testing.assert_allclose(e.grad, oracle, rtol=1e-12)

    def test_rejects_single_path(self):
        tape = linear_toy_tape()
        one = PathBatch(draws=np.zeros((1, 1)), seed=0, generator_id="philox")
        with pytest.raises(ValueError, match="2"):
            est.grad_est2(tape, [1.0, 1.0], one, [0.0])


class TestAlgorithm3:
    def test_matched_constant_zero(self):
        tape = constant_tape(2.5)
        e = est.grad_est3(tape, [0.3], generate(1, 64, 1), [2.5])
        assert (e.grad == 0.0).all()

    def test_costs_exact(self):
        tape = linear_toy_tape()
        e = est.grad_est3(tape, [0.7, 1.3], generate(2, 100, 1), [0.0])
        assert e.f_evals == 100
        assert e.r_evals == 99

    def test_matches_slow_oracle(self):
        spec, curve, tape = fixture_tape()
        paths = generate(7, 40, 5)
        e = est.grad_est3(tape, curve.knot_vols, paths, spec.prices)
        oracle = slow_est3(tape, curve.knot_vols, paths, spec.prices)
        np.testing.assert_allclose(e.grad, oracle, rtol=1e-12)


class TestCrossAgreement:
    def test_lagged_estimators_agree_with_two_pass(self):
        spec, curve, tape = fixture_tape()
        paths = generate(8, 10**6, 5)
        e1 = est.grad_est1(tape, curve.knot_vols, paths, spec.prices)
        for fn in (est.grad_est2, est.grad_est3):
            e = fn(tape, curve.knot_vols, paths, spec.prices)
            combined = np.sqrt(e1.variance + e.variance)
            assert (np.abs(e.grad - e1.grad) < 3 * combined).all()


class TestRunningMean:
    def test_prefix_means_in_order(self):
        rm = est.RunningMean(2)
        rows = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]])
        seen = []
        for row in rows:
            rm.update(row)
            seen.append(rm.mean.copy())
        np.testing.assert_array_equal(seen[0], [1.0, 2.0])
        np.testing.assert_array_equal(seen[1], [2.0, 3.0])
        np.testing.assert_array_equal(seen[2], [3.0, 5.0])

    def test_matches_cumulative_sums(self):
        rng = np.random.default_rng(0)
        rows = rng.standard_normal((500, 3))
        rm = est.RunningMean(3)
        rm.update_block(rows)
        expected = np.cumsum(rows, axis=0)[-1] / 500
        np.testing.assert_array_equal(rm.mean, expected)

    def test_empty_mean_rejected(self):
        with pytest.raises(ValueError):
            est.RunningMean(1).mean


class TestVarianceEstimate:
    def test_constant_terms_zero(self):
        terms = np.ones((640, 2))
        assert (est.estimate_variance(terms, 1) == 0.0).all()
        assert (est.estimate_variance(terms, 2) == 0.0).all()

    def test_iid_terms_match_analytic(self):
        n = 10**5
        terms = np.random.default_rng(1).standard_normal((n, 1))
        for alg in (1, 2, 3):
            # 256 batches keep the batch-means estimate inside a 20% band
            v = est.estimate_variance(terms, alg, batch_count=256)[0]
            assert abs(v - 1.0 / n) < 0.2 / n

    def test_algorithm1_formula_exact(self):
        terms = np.random.default_rng(2).standard_normal((100, 3))
        v = est.estimate_variance(terms, 1)
        np.testing.assert_allclose(v, terms.var(axis=0, ddof=1) / 100)

    def test_too_few_paths_rejected(self):
        with pytest.raises(ValueError, match="batch"):
            est.estimate_variance(np.zeros((100, 1)), 2, batch_count=32)

    def test_accepts_stream_of_blocks(self):
        rng = np.random.default_rng(3)
        blocks = [rng.standard_normal((200, 2)) for _ in range(4)]
        whole = np.vstack(blocks)
        np.testing.assert_array_equal(
            est.estimate_variance(iter(blocks), 2),
            est.estimate_variance(whole, 2))

    def test_variance_scales_inversely_with_paths(self):
        # coordinate 1 variance drops by ~10x from 1e5 to 1e6 paths
        spec, curve, tape = fixture_tape()
        v = {}
        for n in (10**5, 10**6):
            e = est.grad_est1(tape, curve.knot_vols, generate(9, n, 5),
                              spec.prices)
            v[n] = e.variance[0]
        ratio = v[10**5] / v[10**6]
        assert 10 / 1.25 < ratio < 10 * 1.25


class TestBatched:
    def test_width1_bit_identical_to_scalar(self):
        spec, curve, tape = fixture_tape()
        paths = generate(10, 3000, 5)
        scalar = {1: est.grad_est1, 2: est.grad_est2, 3: est.grad_est3}
        for alg in (1, 2, 3):
            a = scalar[alg](tape, curve.knot_vols, paths, spec.prices)
            b = est.grad_est_batched(alg, tape, curve.knot_vols, paths,
                                     spec.prices, width=1)
            assert (a.grad == b.grad).all(), f"algorithm {alg}"

    def test_algorithm1_any_width_matches_scalar(self):
        spec, curve, tape = fixture_tape()
        paths = generate(11, 1000, 5)
        a = est.grad_est1(tape, curve.knot_vols, paths, spec.prices)
        for width in (3, 8, 64):
            b = est.grad_est_batched(1, tape, curve.knot_vols, paths,
                                     spec.prices, width=width)
            np.testing.assert_allclose(b.grad, a.grad, rtol=1e-12)

    def test_chunk_lag_pairing_small_case(self):
        # width 2, five paths: reverses paths 2..4, lane-aligned seeds from
        # the previous chunk (algorithm 2) or the running mean over all
        # earlier chunks (algorithm 3)
        spec, curve, tape = fixture_tape()
        paths = generate(12, 5, 5)
        vols, targets = curve.knot_vols, spec.prices
        y = np.array([tape.forward(vols, w) for w in paths.draws])

        expect2 = np.mean([
            tape.reverse(vols, paths.draws[2], y[0] - targets),
            tape.reverse(vols, paths.draws[3], y[1] - targets),
            tape.reverse(vols, paths.draws[4], y[2] - targets),
        ], axis=0)
        got2 = est.grad_est_batched(2, tape, vols, paths, targets, width=2)
        np.testing.assert_allclose(got2.grad, expect2, rtol=1e-12)

        expect3 = np.mean([
            tape.reverse(vols, paths.draws[2], y[:2].mean(axis=0) - targets),
            tape.reverse(vols, paths.draws[3], y[:2].mean(axis=0) - targets),
            tape.reverse(vols, paths.draws[4], y[:4].mean(axis=0) - targets),
        ], axis=0)
        got3 = est.grad_est_batched(3, tape, vols, paths, targets, width=2)
        np.testing.assert_allclose(got3.grad, expect3, rtol=1e-12)

    def test_batched_costs(self):
        spec, curve, tape = fixture_tape()
        paths = generate(13, 50, 5)
        e1 = est.grad_est_batched(1, tape, curve.knot_vols, paths, spec.prices,
                                  width=8)
        assert (e1.f_evals, e1.r_evals) == (100, 50)
        e2 = est.grad_est_batched(2, tape, curve.knot_vols, paths, spec.prices,
                                  width=8)
        assert (e2.f_evals, e2.r_evals) == (50, 42)

    def test_lagged_batched_agree_with_two_pass(self):
        spec, curve, tape = fixture_tape()
        paths = generate(14, 20000, 5)
        e1 = est.grad_est1(tape, curve.knot_vols, paths, spec.prices)
        for alg in (2, 3):
            e = est.grad_est_batched(alg, tape, curve.knot_vols, paths,
                                     spec.prices, width=8)
            combined = np.sqrt(e1.variance + e.variance)
            assert (np.abs(e.grad - e1.grad) < 3 * combined).all()

    def test_too_few_paths_for_width(self):
        spec, curve, tape = fixture_tape()
        paths = generate(15, 8, 5)
        with pytest.raises(ValueError, match="width"):
            est.grad_est_batched(2, tape, curve.knot_vols, paths, spec.prices,
                                 width=8)

    def test_measure_k_attaches_coefficients(self):
        spec, curve, tape = fixture_tape()
        paths = generate(16, 256, 5)
        e = est.grad_est_batched(1, tape, curve.knot_vols, paths, spec.prices,
                                 width=8, measure_k=True)
        assert e.k_f is not None and np.isfinite(e.k_f) and e.k_f > 0
        assert e.k_r is not None and np.isfinite(e.k_r) and e.k_r > 0


class TestThreading:
    def test_thread_count_does_not_change_results(self):
        spec, curve, tape = fixture_tape()
        paths = generate(17, est.BLOCK_PATHS * 2 + 321, 5)
        for fn in (est.grad_est1, est.grad_est2, est.grad_est3):
            serial = fn(tape, curve.knot_vols, paths, spec.prices, n_threads=1)
            for n_threads in (2, 4):  # multi-window and single-window paths
                threaded = fn(tape, curve.knot_vols, paths, spec.prices,
                              n_threads=n_threads)
                assert (serial.grad == threaded.grad).all()
                assert (serial.variance == threaded.variance).all()
                assert serial.f_evals == threaded.f_evals


class TestSpeedupMeasurement:
    def test_width1_degenerate(self):
        spec, curve, tape = fixture_tape()
        paths = generate(18, 64, 5)
        report = est.measure_correction_coefficients(tape, curve.knot_vols,
                                                     paths, width=1)
        assert report.degenerate
        assert report.k_f == 1.0 and report.k_r == 1.0

    def test_width8_positive_finite(self):
        spec, curve, tape = fixture_tape()
        paths = generate(19, 2048, 5)
        report = est.measure_correction_coefficients(tape, curve.knot_vols,
                                                     paths, width=8, repeats=2)
        assert np.isfinite(report.k_f) and report.k_f > 0
        assert np.isfinite(report.k_r) and report.k_r > 0
        assert len(report.k_f_runs) == 2
