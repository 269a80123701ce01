from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import chisquare
from hypothesis import given, settings, strategies as st

import oracles
from pnpqkd.analytic import TrainSchedule
from pnpqkd.mc_sim import (
    Basis,
    BackscatterModel,
    Cause,
    DetectionEvents,
    DetectorModel,
    IdealChannel,
    LinkChannel,
    LinkConfig,
    OpticalConfig,
    SlotBits,
    calibrate_backscatter,
    extinction_to_qberopt,
    intercept_resend_channel,
    run_session,
    session_events,
    simulate_slot,
    simulate_slots,
)

CABLE_ETA_T = 0.0195


def sifted_errors(alice_codes, events):
    a = np.asarray(alice_codes[events.slot], dtype=np.uint8)
    matched = (a >> 1) == events.bob_basis
    err = matched & ((a & 1) != events.detector)
    return int(matched.sum()), int(err.sum())


def dense_inputs(seed, n):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 4, n, dtype=np.uint8), rng.integers(0, 2, n, dtype=np.uint8)


class TestExtinction:
    def test_values(self):
        assert extinction_to_qberopt(28.6) == pytest.approx(0.00137848143052714, rel=1e-12)
        assert round(extinction_to_qberopt(28.6) * 100, 2) == 0.14
        assert extinction_to_qberopt(0) == 0.5
        assert extinction_to_qberopt(math.inf) == 0.0

    def test_optical_config(self):
        assert OpticalConfig(0.1, 0.02, 28.6).qber_opt == extinction_to_qberopt(28.6)
        with pytest.raises(ValueError):
            OpticalConfig(0.1, 1.5)
        with pytest.raises(ValueError):
            OpticalConfig(0.1, 0.5, -1)

    @given(st.floats(0, 80))
    def test_range(self, e):
        assert 0 <= extinction_to_qberopt(e) <= 0.5


class TestDetectorAndBackscatter:
    def test_curve_must_increase(self):
        with pytest.raises(ValueError):
            DetectorModel(operating_curve=((0.1, 1e-5), (0.05, 2e-5)))
        with pytest.raises(ValueError):
            DetectorModel(operating_curve=((0.1, 1e-5), (0.2, 1e-5)))

    def test_log_linear_interpolation(self):
        d = DetectorModel(operating_curve=((0.1, 1e-6), (0.2, 1e-4)))
        assert d.noise_at(0.1) == pytest.approx(1e-6)
        assert d.noise_at(0.15) == pytest.approx(1e-5, rel=1e-12)
        assert d.at_efficiency(0.2).p_noise_per_gate == pytest.approx(1e-4)
        with pytest.raises(ValueError):
            d.noise_at(0.3)

    def test_default_curve_passes_working_point(self):
        assert DetectorModel().noise_at(0.1) == pytest.approx(1e-5)

    def test_backscatter_zero_within_capacity(self):
        bs = BackscatterModel(1e-6)
        assert bs.extra_noise(TrainSchedule(191)) == 0
        assert bs.extra_noise(TrainSchedule(211)) == pytest.approx(20e-6)

    def test_calibration(self):
        assert calibrate_backscatter(1e-5).noise_per_overlapping_pulse == pytest.approx(5e-7)
        with pytest.raises(ValueError):
            calibrate_backscatter(0.0)
        bs = calibrate_backscatter(1e-5, TrainSchedule(191))
        assert bs.extra_noise(TrainSchedule(191)) == 0
        assert bs.extra_noise(TrainSchedule(211)) == pytest.approx(1e-5)


class TestSingleSlot:
    def test_nothing_without_light_or_noise(self):
        rng = np.random.default_rng(0)
        opt, det = OpticalConfig(0.0, 1.0), DetectorModel(p_noise_per_gate=0.0)
        assert all(simulate_slot(rng, opt, det, 0.0, s % 4, s % 2) is None for s in range(5000))

    def test_scalar_and_dense_agree_exactly(self):
        codes, bases = dense_inputs(1, 20_000)
        opt, det = OpticalConfig(2.0, 0.5, 15.0), DetectorModel(eta_d=0.5, p_noise_per_gate=0.02)
        dense = simulate_slots(np.random.default_rng(7), opt, det, 0.01, codes, bases, pulses_per_train=50)
        rng = np.random.default_rng(7)
        scalar = [simulate_slot(rng, opt, det, 0.01, int(codes[i]), int(bases[i]), i, 50) for i in range(len(codes))]
        assert list(dense) == [e for e in scalar if e is not None]

    def test_click_rate_matches_thinned_poisson(self):
        n = 10_000_000
        opt, det = OpticalConfig(0.1, 0.0196), DetectorModel(eta_d=0.1, p_noise_per_gate=0.0)
        ev = LinkChannel(opt, det).transmit(np.random.default_rng(3), SlotBits(1, 2), SlotBits(2, 1), n)
        p = oracles.click_probability(0.1, 0.0196, 0.1)
        assert abs(len(ev) / n - p) <= 3 * oracles.binom_sigma(p, n)

    def test_detector_noise_qber(self):
        n = 10_000_000
        codes, bases = dense_inputs(2, n)
        opt, det = OpticalConfig(0.1, 0.0196), DetectorModel(eta_d=0.1, p_noise_per_gate=1e-5)
        ev = simulate_slots(np.random.default_rng(4), opt, det, 0.0, codes, bases)
        sifted, errors = sifted_errors(codes, ev)
        q = errors / sifted
        assert abs(q - 0.051) <= 3 * oracles.binom_sigma(q, sifted)


class TestSamplers:
    def test_sparse_matches_dense_statistically(self):
        n = 2_000_000
        codes, bases = dense_inputs(5, n)
        opt, det = OpticalConfig(0.5, 0.1, 20.0), DetectorModel(eta_d=0.2, p_noise_per_gate=1e-3)
        dense = simulate_slots(np.random.default_rng(1), opt, det, 5e-4, codes, bases)
        sparse = LinkChannel(opt, det, 5e-4).transmit(np.random.default_rng(1), codes, bases, n)
        for c in Cause:
            a, b = dense.cause_counts()[c], sparse.cause_counts()[c]
            assert abs(a - b) <= 4 * math.sqrt(a + b + 1)
        assert abs(dense.double_clicks - sparse.double_clicks) <= 4 * math.sqrt(dense.double_clicks + 1) + 4
        sd, ed = sifted_errors(codes, dense)
        ss, es = sifted_errors(codes, sparse)
        assert abs(ed / sd - es / ss) <= 4 * math.hypot(oracles.binom_sigma(ed / sd, sd), oracles.binom_sigma(es / ss, ss))

    def test_prefix_consistency(self):
        opt, det = OpticalConfig(0.1, 0.02, 28.6), DetectorModel()
        ch = LinkChannel(opt, det)
        a, b = SlotBits(11, 2), SlotBits(12, 1)
        short = ch.transmit(np.random.default_rng(9), a, b, 3_000_000)
        long = ch.transmit(np.random.default_rng(9), a, b, 9_000_000)
        k = len(short)
        assert np.array_equal(long.slot[:k], short.slot)
        assert np.array_equal(long.detector[:k], short.detector)

    def test_same_seed_identical_stream(self):
        cfg = LinkConfig(OpticalConfig(0.1, CABLE_ETA_T, 28.6), DetectorModel())
        _, e1 = session_events(cfg, TrainSchedule(191), 50_000, 42)
        _, e2 = session_events(cfg, TrainSchedule(191), 50_000, 42)
        assert e1.to_csv() == e2.to_csv()

    def test_truth_tags_account_for_every_event(self):
        det = DetectorModel(eta_d=0.1, p_noise_per_gate=1e-3, afterpulse_prob=0.05)
        ch = LinkChannel(OpticalConfig(1.0, 0.3), det, extra_noise=5e-4)
        ev = ch.transmit(np.random.default_rng(0), SlotBits(1, 2), SlotBits(2, 1), 500_000)
        counts = ev.cause_counts()
        assert sum(counts.values()) == len(ev)
        assert all(counts[c] > 0 for c in Cause)
        assert np.all(np.diff(ev.slot) > 0)  # at most one event per gate

    def test_dense_rejects_afterpulses(self):
        with pytest.raises(ValueError):
            simulate_slots(np.random.default_rng(0), OpticalConfig(), DetectorModel(afterpulse_prob=0.1), 0.0,
                           np.zeros(4, np.uint8), np.zeros(4, np.uint8))

    @settings(max_examples=15)
    @given(st.floats(0.01, 2), st.floats(0.01, 1), st.integers(0, 2**32))
    def test_perfect_link_has_no_errors(self, mu, eta_t, seed):
        ch = LinkChannel(OpticalConfig(mu, eta_t), DetectorModel(eta_d=0.5, p_noise_per_gate=0.0))
        a = SlotBits(seed, 2)
        ev = ch.transmit(np.random.default_rng(seed), a, SlotBits(seed + 1, 1), 200_000)
        assert sifted_errors(a, ev)[1] == 0


class TestEvents:
    def test_csv_layout(self):
        ev = DetectionEvents(np.array([3, 7]), np.array([0, 1], np.uint8), np.array([1, 0], np.uint8),
                             np.array([Cause.PHOTON, Cause.DARK], np.uint8), pulses_per_train=5)
        assert ev.to_csv() == "train_idx,pulse_idx,detector_id,basis,cause\n0,3,0,X,photon\n1,2,1,Z,dark\n"
        assert [e.train_idx for e in ev] == [0, 1]
        assert Basis(ev.bob_basis[0]) is Basis.X

    def test_slot_bits_deterministic_and_balanced(self):
        s = SlotBits(123, 2)
        idx = np.arange(400_000)
        v = s[idx]
        assert np.array_equal(v, SlotBits(123, 2)[idx])
        assert np.array_equal(s[np.array([5, 77])], v[[5, 77]])
        assert chisquare(np.bincount(v, minlength=4)).pvalue > 1e-4


class TestEavesdropper:
    def test_outcome_table(self):
        assert oracles.intercept_resend_error() == 0.25
        assert oracles.intercept_resend_error(follow_alice=True) == 0

    def test_ideal_channel_intercept(self):
        n = 2_000_000
        a, b = SlotBits(1, 2), SlotBits(2, 1)
        ch = intercept_resend_channel(np.random.default_rng(0), IdealChannel())
        ev = ch.transmit(np.random.default_rng(1), a, b, n)
        sifted, errors = sifted_errors(a, ev)
        assert sifted >= 10**6
        assert errors / sifted == pytest.approx(0.25, abs=0.01)

    def test_attacker_in_alice_basis_is_invisible(self):
        a, b = SlotBits(1, 2), SlotBits(2, 1)
        ch = intercept_resend_channel(np.random.default_rng(0), IdealChannel(), follow_alice=True)
        assert sifted_errors(a, ch.transmit(np.random.default_rng(1), a, b, 200_000))[1] == 0

    def test_attacker_disabled_is_baseline(self):
        cfg = LinkConfig(OpticalConfig(0.1, CABLE_ETA_T, 28.6), DetectorModel())
        r = run_session(cfg, TrainSchedule(191), 100_000, 5)
        again = run_session(cfg, TrainSchedule(191), 100_000, 5, intercept=False)
        assert r == again


class TestRunSession:
    CFG = LinkConfig(OpticalConfig(0.1, CABLE_ETA_T, 28.6), DetectorModel(), calibrate_backscatter(1e-5))

    def test_no_overfill_no_backscatter(self):
        r = run_session(self.CFG, TrainSchedule(191), 500_000, 1)
        assert r.qber_backscatter == 0 and r.capacity_ok and r.overfill_pulses == 0
        assert r.cause_counts[Cause.BACKSCATTER] == 0

    def test_overfill_doubles_qber(self):
        n_slots = 400_000_000
        base = run_session(self.CFG, TrainSchedule(191), n_slots // 191, 2)
        over = run_session(self.CFG, TrainSchedule(211), n_slots // 211, 2)
        assert over.qber_backscatter > 0 and not over.capacity_ok
        assert over.qber / base.qber == pytest.approx(2.0, rel=0.2)

    def test_overfill_40_triples_qber(self):
        n_slots = 400_000_000
        base = run_session(self.CFG, TrainSchedule(191), n_slots // 191, 3)
        over = run_session(self.CFG, TrainSchedule(231), n_slots // 231, 3)
        assert over.qber / base.qber == pytest.approx(3.0, rel=0.25)

    def test_stderr_halves_with_four_times_trains(self):
        # doubling n_trains shrinks the error by sqrt(2); compare both steps
        r1 = run_session(self.CFG, TrainSchedule(191), 200_000, 8)
        r2 = run_session(self.CFG, TrainSchedule(191), 400_000, 8)
        assert r2.qber_stderr / r1.qber_stderr == pytest.approx(1 / math.sqrt(2), rel=0.3)

    def test_rates_against_closed_form(self):
        r = run_session(self.CFG, TrainSchedule(191), 2_000_000, 4)
        p_phot = oracles.click_probability(0.1, CABLE_ETA_T, 0.1)
        pred = r.nu_eff_hz * (p_phot + 2e-5)
        sigma = math.sqrt(r.detections) / (r.n_slots / r.nu_eff_hz)
        assert abs(r.detection_rate_hz - pred) <= 3 * sigma
        q = oracles.exact_qber(p_phot, 1e-5, extinction_to_qberopt(28.6))
        assert abs(r.qber - q) <= 3 * r.qber_stderr

    def test_needs_a_train(self):
        with pytest.raises(ValueError):
            run_session(self.CFG, TrainSchedule(191), 0, 1)


@pytest.mark.parametrize("p", [5e-324, 1e-300, 1e-20])
def test_vanishing_probability_terminates(p):
    from pnpqkd.mc_sim import _bernoulli_positions

    assert len(_bernoulli_positions(np.random.default_rng(0), p, 10**9)) == 0
