"""Rate estimators: exact ceilings, quadrature mutual-information oracle,
the SDD <= SIC <= UB sandwich, duality with the training loss, and
reproducibility."""

import numpy as np
import pytest
from scipy.integrate import quad

from nlsic import channel as ch
from nlsic import fba, rates, rnn, sic, training
from nlsic.apps import AppMatrix


def dispersive_4ask_channel(p_tx_db):
    """Shrunken short-reach link: sinc pulse with three symbols of memory,
    square-law detection, two samples per symbol, sign precoding."""
    cfg = ch.ChannelConfig(alphabet=ch.Alphabet.bipolar_ask(4), n_os=2, n_sim=2,
                           nonlinearity=ch.SquareLaw(), noise_variance=1.0,
                           precoding="differential-phase")
    return ch.make_channel(cfg, k_g=7).with_transmit_power_db(p_tx_db)


def memoryless_4ask_channel(p_tx_db):
    cfg = ch.ChannelConfig(alphabet=ch.Alphabet.bipolar_ask(4), n_os=1, n_sim=1,
                           nonlinearity=ch.Identity(), noise_variance=1.0)
    chan = ch.make_channel(cfg, g=ch.FirFilter(taps=np.array([1.0]), rate=1))
    return chan.with_transmit_power_db(p_tx_db)


def quadrature_mutual_information(levels, sigma2=1.0):
    """I(X;Y) of a uniform discrete input over an AWGN channel, in bits."""
    m = len(levels)

    def cond_entropy_integrand(y):
        pdf = np.exp(-(y - levels) ** 2 / (2 * sigma2)) / np.sqrt(2 * np.pi * sigma2)
        total = pdf.sum() / m
        if total <= 0:
            return 0.0
        post = pdf / pdf.sum()
        ent = -np.sum(post[post > 0] * np.log2(post[post > 0]))
        return total * ent

    lim = np.max(np.abs(levels)) + 10
    h_xy, _ = quad(cond_entropy_integrand, -lim, lim, limit=400)
    return np.log2(m) - h_xy


class TestCeilings:
    def test_uniform_detector_zero_rate(self):
        chan = memoryless_4ask_channel(3.0)
        det = rates.UniformDetector(4)
        sr = rates.estimate_stage_rate(det, chan, sic.SicPlan(1, 32), 1, 5, 32,
                                       np.random.default_rng(0))
        assert sr.rate == pytest.approx(0.0, abs=1e-12)
        assert not sr.flagged

    def test_oracle_detector_hits_entropy(self):
        chan = memoryless_4ask_channel(3.0)
        det = rates.OracleDetector(chan)
        sr = rates.estimate_stage_rate(det, chan, sic.SicPlan(1, 32), 1, 5, 32,
                                       np.random.default_rng(1))
        assert sr.rate == pytest.approx(2.0, abs=1e-12)

    def test_wrong_point_mass_flags_clamps(self):
        chan = memoryless_4ask_channel(3.0)

        class WrongOracle:
            name = "wrong"

            def app(self, block, view, rng):
                idx = (chan.symbol_indices(block.x[view.targets]) + 1) % 4
                return AppMatrix.point_masses(idx, 4, view.targets)

        sr = rates.estimate_stage_rate(WrongOracle(), chan, sic.SicPlan(1, 16),
                                       1, 4, 16, np.random.default_rng(2))
        assert sr.flagged
        assert sr.clamp_fraction == 1.0
        assert sr.rate == pytest.approx(2.0 + np.log2(1e-30))


class TestAgainstQuadrature:
    def test_memoryless_exact_fba_matches_mutual_information(self):
        chan = memoryless_4ask_channel(6.0)
        aux = fba.build_aux_channel(chan, memory=0)
        det = rates.FbaDetector(aux)
        rng = np.random.default_rng(3)
        sr = rates.estimate_stage_rate(det, chan, sic.SicPlan(1, 256), 1, 40, 256, rng)
        target = quadrature_mutual_information(chan.levels)
        assert sr.rate == pytest.approx(target, abs=3 * sr.stderr + 1e-6)


class TestSicAggregation:
    def test_single_stage_is_sdd(self):
        chan = dispersive_4ask_channel(4.0)
        aux = fba.build_aux_channel(chan, memory=chan.memory)
        rep = rates.estimate_sic(rates.FbaDetector(aux), chan, sic.SicPlan(1, 48),
                                 10, 48, np.random.default_rng(4))
        assert rep.i_sdd == rep.i_sic
        assert rep.n_stages == 1

    def test_sic_is_exact_stage_average(self):
        chan = dispersive_4ask_channel(4.0)
        aux = fba.build_aux_channel(chan, memory=chan.memory)
        rep = rates.estimate_sic(rates.FbaDetector(aux), chan, sic.SicPlan(4, 48),
                                 8, 48, np.random.default_rng(5))
        assert rep.i_sic == pytest.approx(
            np.mean([sr.rate for sr in rep.stage_rates]), abs=1e-15)

    def test_rate_sandwich_and_entropy_bound(self):
        chan = dispersive_4ask_channel(6.0)
        aux = fba.build_aux_channel(chan, memory=chan.memory)
        det = rates.FbaDetector(aux)
        rng = np.random.default_rng(6)
        n, n_blk = 96, 24
        sdd = rates.estimate_sic(det, chan, sic.SicPlan(1, n), n_blk, n, rng,
                                 ub_aux=aux)
        s4 = rates.estimate_sic(det, chan, sic.SicPlan(4, n), n_blk, n, rng)
        slack_lo = 3 * np.hypot(sdd.i_sic_stderr, s4.i_sic_stderr)
        slack_hi = 3 * np.hypot(s4.i_sic_stderr, sdd.ub_stderr)
        assert sdd.i_sic <= s4.i_sic + slack_lo
        assert s4.i_sic <= sdd.ub + slack_hi
        for sr in s4.stage_rates:
            assert -1e-9 <= sr.rate <= 2.0 + 1e-9

    def test_stage_rates_soft_monotone(self):
        chan = dispersive_4ask_channel(6.0)
        aux = fba.build_aux_channel(chan, memory=chan.memory)
        rep = rates.estimate_sic(rates.FbaDetector(aux), chan, sic.SicPlan(4, 96),
                                 24, 96, np.random.default_rng(7))
        for lo, hi in zip(rep.stage_rates[:-1], rep.stage_rates[1:]):
            assert hi.rate >= lo.rate - 3 * np.hypot(lo.stderr, hi.stderr)

    def test_noiseless_invertible_all_stages_full_rate(self):
        cfg = ch.ChannelConfig(alphabet=ch.Alphabet.bipolar_ask(4), n_os=1, n_sim=1,
                               nonlinearity=ch.Identity(), noise_variance=1e-6)
        chan = ch.make_channel(cfg, g=ch.FirFilter(taps=np.array([1.0]), rate=1))
        chan = chan.with_transmit_power(10.0)
        aux = fba.build_aux_channel(chan, memory=0)
        rep = rates.estimate_sic(rates.FbaDetector(aux), chan, sic.SicPlan(2, 32),
                                 6, 32, np.random.default_rng(8))
        for sr in rep.stage_rates:
            assert sr.rate == pytest.approx(2.0, abs=1e-6)

    def test_reproducible_to_the_last_bit(self):
        chan = dispersive_4ask_channel(5.0)
        aux = fba.build_aux_channel(chan, memory=chan.memory)
        det = rates.FbaDetector(aux)
        rep1 = rates.estimate_sic(det, chan, sic.SicPlan(2, 48), 6, 48,
                                  np.random.default_rng(99), ub_aux=aux)
        rep2 = rates.estimate_sic(det, chan, sic.SicPlan(2, 48), 6, 48,
                                  np.random.default_rng(99), ub_aux=aux)
        assert rep1.i_sic == rep2.i_sic
        assert rep1.ub == rep2.ub
        for a, b in zip(rep1.stage_rates, rep2.stage_rates):
            assert np.array_equal(a.per_block, b.per_block)


class TestLossRateDuality:
    def test_stage_rate_equals_bits_minus_loss(self):
        """m - training loss and the rate estimator agree on shared data."""
        chan = memoryless_4ask_channel(5.0)
        shape = rnn.RnnShape(dims=(3, 8), l_y=3, l_ic=0, n_stages=1, s=1,
                             m_symbols=4, n_os=1)
        model = rnn.init_model(shape, np.random.default_rng(9),
                               norm=rnn.Normalization(0.1, 2.0, 1.0))
        n = 24
        plan = sic.SicPlan(1, n)
        blocks = rates.simulate_eval_blocks(chan, 6, n, np.random.default_rng(10))
        det = rates.RnnDetector({1: model})
        sr = rates.evaluate_stage_on_blocks(det, chan, plan, 1, blocks, None)

        indexer = rnn.build_indexer(plan, 1, shape)
        total_bits = []
        for blk in blocks:
            inputs = rnn.gather_inputs(indexer, blk.y, np.zeros(n), model.norm)
            batch = training.Batch(
                inputs=inputs[None], targets=chan.symbol_indices(blk.x)[None],
                phase_idx=indexer.phase_idx, out_steps=indexer.out_steps)
            bits, _ = training.loss(model, batch)
            total_bits.append(2.0 - bits)
        assert sr.rate == pytest.approx(np.mean(total_bits), abs=1e-12)
