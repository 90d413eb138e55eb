"""Time-varying bidirectional recurrent detector: input assembly, forward
pass against a scalar reference, structural invariants, counting, and the
checkpoint format."""

import math

import numpy as np
import pytest

from nlsic import channel as ch
from nlsic import rnn, sic
from nlsic.apps import MultCounter


def make_shape(dims, l_y, l_ic, n_stages=1, s=1, m_symbols=4, n_os=2):
    return rnn.RnnShape(dims=tuple(dims), l_y=l_y, l_ic=l_ic, n_stages=n_stages,
                        s=s, m_symbols=m_symbols, n_os=n_os)


def unrolled_geometry(shape, n_per_stage):
    phase_idx = np.tile(np.arange(shape.phases), n_per_stage)
    out_steps = np.flatnonzero(phase_idx == 0)
    return phase_idx, out_steps


def scalar_forward_reference(model, inputs, phase_idx, out_steps):
    """Independent scalar-by-scalar re-computation of the forward pass."""
    shape = model.shape
    p_count = shape.phases
    r = [[float(v) for v in row] for row in inputs]
    for i in range(shape.n_recurrent):
        half = shape.dims[i + 1] // 2
        t_steps = len(r)
        h_fw, prev = [], [0.0] * half
        for t in range(t_steps):
            p, q = phase_idx[t], (phase_idx[t] - 1) % p_count
            cur = []
            for u in range(half):
                acc = model.fw_in_b[i][p][u] + model.fw_st_b[i][q][u]
                for v in range(shape.dims[i]):
                    acc += model.fw_in_w[i][p][u, v] * r[t][v]
                for v in range(half):
                    acc += model.fw_st_w[i][q][u, v] * prev[v]
                cur.append(max(acc, 0.0))
            h_fw.append(cur)
            prev = cur
        h_bw, nxt = [None] * t_steps, [0.0] * half
        for t in range(t_steps - 1, -1, -1):
            p, q = phase_idx[t], (phase_idx[t] + 1) % p_count
            cur = []
            for u in range(half):
                acc = model.bw_in_b[i][p][u] + model.bw_st_b[i][q][u]
                for v in range(shape.dims[i]):
                    acc += model.bw_in_w[i][p][u, v] * r[t][v]
                for v in range(half):
                    acc += model.bw_st_w[i][q][u, v] * nxt[v]
                cur.append(max(acc, 0.0))
            h_bw[t] = cur
            nxt = cur
        r = [h_fw[t] + h_bw[t] for t in range(t_steps)]
    rows = []
    for t in out_steps:
        logits = [model.out_b[a] + sum(model.out_w[a, v] * r[t][v]
                                       for v in range(shape.dims[-1]))
                  for a in range(shape.m_symbols)]
        mx = max(logits)
        e = [math.exp(v - mx) for v in logits]
        tot = sum(e)
        rows.append([v / tot for v in e])
    return np.array(rows)


class TestShape:
    def test_input_width_consistency(self):
        with pytest.raises(ValueError):
            make_shape((10, 8), l_y=4, l_ic=2)

    def test_even_widths(self):
        with pytest.raises(ValueError):
            make_shape((6, 7), l_y=4, l_ic=2)

    def test_stage_range(self):
        with pytest.raises(ValueError):
            make_shape((6, 8), 4, 2, n_stages=2, s=3)

    def test_capturable_memory_published_configs(self):
        # (l_y, t_rnn) -> capturable symbol memory at two output samples/symbol
        for l_y, t_rnn, expect in [(64, 64, 95), (64, 84, 115), (84, 120, 161),
                                   (100, 120, 169)]:
            shape = make_shape((l_y + 32, 128), l_y=l_y, l_ic=32)
            assert shape.capturable_memory(t_rnn) == expect


class TestAssembleInputs:
    def test_window_offsets(self):
        # l_y = 64: 31 samples before and 32 after the center sample
        plan = sic.SicPlan(1, 200)
        shape = make_shape((64, 8), l_y=64, l_ic=0, m_symbols=4)
        idx = rnn.build_indexer(plan, 1, shape)
        kappa = 50
        row = idx.y_idx[kappa - 1]
        center = 2 * kappa - 1  # 0-based position of the center sample
        assert row[0] == center - 31
        assert row[-1] == center + 32

    def test_last_stage_single_phase(self):
        plan = sic.SicPlan(3, 12)
        shape = make_shape((4, 8), l_y=2, l_ic=2, n_stages=3, s=3)
        idx = rnn.build_indexer(plan, 3, shape)
        assert idx.n_steps == plan.per_stage
        assert np.all(idx.phase_idx == 0)

    def test_unrolled_order_and_count(self):
        # S=2, s=1, N=3: (1,1) (2,1) (1,2) (2,2) (1,3) (2,3)
        plan = sic.SicPlan(2, 6)
        shape = make_shape((2, 8), l_y=2, l_ic=0, n_stages=2, s=1, n_os=1)
        idx = rnn.build_indexer(plan, 1, shape)
        assert idx.n_steps == 6
        assert np.array_equal(idx.phase_idx, [0, 1, 0, 1, 0, 1])
        # the center sample sits at window offset floor((l_y-1)/2) = 0 here
        centers = idx.y_idx[:, 0]
        assert np.array_equal(centers, [0, 1, 2, 3, 4, 5])
        assert np.array_equal(idx.out_steps, [0, 2, 4])
        assert np.array_equal(idx.target_serial, [0, 2, 4])

    def test_zero_padding_and_normalization(self):
        plan = sic.SicPlan(1, 4)
        shape = make_shape((6, 8), l_y=6, l_ic=0, m_symbols=2, n_os=1)
        view = sic.stage_view(plan, 1, np.zeros(4))
        y = np.array([1.0, 2.0, 3.0, 4.0])
        norm = rnn.Normalization(y_mean=1.0, y_std=2.0)
        data = rnn.assemble_inputs(y, view, shape, norm)
        # first window reaches 2 samples left of the block: zero padded,
        # then (y - 1)/2 for y = 1, 2, 3, 4
        assert np.allclose(data[0], [0.0, 0.0, 0.0, 0.5, 1.0, 1.5])

    def test_known_symbol_slots(self):
        plan = sic.SicPlan(2, 8)
        shape = make_shape((4, 8), l_y=2, l_ic=2, n_stages=2, s=2, n_os=1)
        x = np.arange(1.0, 9.0)
        view = sic.stage_view(plan, 2, x)
        norm = rnn.Normalization(sym_scale=0.5)
        data = rnn.assemble_inputs(x * 0.0 + 1.0, view, shape, norm)
        # target kappa(2,1)=2: closest knowns at serial 1,3 -> values 1,3
        assert np.allclose(data[0, 2:], [0.5, 1.5])


class TestForward:
    def test_zero_model_uniform(self):
        shape = make_shape((6, 8), 4, 2, m_symbols=4)
        model = rnn.RnnModel(shape)
        phase_idx, out_steps = unrolled_geometry(shape, 5)
        logp, _ = rnn.forward(model, np.random.default_rng(0).normal(size=(5, 6)),
                              phase_idx, out_steps)
        assert np.allclose(np.exp(logp), 0.25, atol=1e-15)

    @pytest.mark.parametrize("dims,l_y,l_ic,n_stages,s,n_per", [
        ((4, 8), 2, 2, 1, 1, 2),          # single phase two-step toy
        ((6, 8, 4), 4, 2, 2, 1, 3),       # two phases, two recurrent layers
        ((5, 6), 3, 2, 3, 2, 4),          # mid-stage entry
    ])
    def test_matches_scalar_reference(self, dims, l_y, l_ic, n_stages, s, n_per):
        shape = make_shape(dims, l_y, l_ic, n_stages=n_stages, s=s, m_symbols=4)
        rng = np.random.default_rng(42)
        model = rnn.init_model(shape, rng)
        phase_idx, out_steps = unrolled_geometry(shape, n_per)
        inputs = rng.normal(size=(len(phase_idx), dims[0]))
        logp, _ = rnn.forward(model, inputs, phase_idx, out_steps)
        ref = scalar_forward_reference(model, inputs, phase_idx, out_steps)
        assert np.abs(np.exp(logp[0]) - ref).max() < 1e-12

    def test_rows_sum_to_one(self):
        shape = make_shape((6, 8), 4, 2)
        rng = np.random.default_rng(1)
        model = rnn.init_model(shape, rng)
        phase_idx, out_steps = unrolled_geometry(shape, 20)
        logp, _ = rnn.forward(model, rng.normal(size=(20, 6)), phase_idx, out_steps)
        assert np.abs(np.exp(logp).sum(axis=2) - 1.0).max() < 1e-12

    def test_no_recurrence_no_coupling(self):
        """With zeroed state maps, permuting two inputs only swaps their rows."""
        shape = make_shape((6, 8), 4, 2, m_symbols=4)
        rng = np.random.default_rng(2)
        model = rnn.init_model(shape, rng)
        for i in range(shape.n_recurrent):
            for p in range(shape.phases):
                model.fw_st_w[i][p][...] = 0.0
                model.bw_st_w[i][p][...] = 0.0
        phase_idx, out_steps = unrolled_geometry(shape, 6)
        inputs = rng.normal(size=(6, 6))
        base = np.exp(rnn.forward(model, inputs, phase_idx, out_steps)[0][0])
        swapped = inputs.copy()
        swapped[[1, 4]] = swapped[[4, 1]]
        perm = np.exp(rnn.forward(model, swapped, phase_idx, out_steps)[0][0])
        assert np.allclose(perm[[1, 4]], base[[4, 1]], atol=1e-12)
        assert np.allclose(perm[[0, 2, 3, 5]], base[[0, 2, 3, 5]], atol=1e-12)

    def test_phase_parameter_sharing(self):
        """Steps one period apart see identical parameter tensors."""
        shape = make_shape((6, 8), 4, 2, n_stages=2, s=1, m_symbols=4)
        rng = np.random.default_rng(3)
        model = rnn.init_model(shape, rng)
        for i in range(shape.n_recurrent):
            for p in range(shape.phases):
                model.fw_st_w[i][p][...] = 0.0
                model.bw_st_w[i][p][...] = 0.0
        phase_idx, out_steps = unrolled_geometry(shape, 3)
        one_period = rng.normal(size=(2, 6))
        inputs = np.tile(one_period, (3, 1))
        probs = np.exp(rnn.forward(model, inputs, phase_idx, out_steps)[0][0])
        assert np.allclose(probs[0], probs[1], atol=1e-14)
        assert np.allclose(probs[1], probs[2], atol=1e-14)

    @pytest.mark.parametrize("n_stages", [1, 2])
    def test_zero_state_washout(self, n_stages):
        """Prepending one period of zero inputs shifts outputs by one row
        once the contraction has washed the boundary out."""
        shape = make_shape((6, 8), 4, 2, n_stages=n_stages, s=1, m_symbols=4)
        rng = np.random.default_rng(4)
        model = rnn.init_model(shape, rng)
        for i in range(shape.n_recurrent):
            for p in range(shape.phases):
                for w in (model.fw_st_w[i][p], model.bw_st_w[i][p]):
                    sigma = np.linalg.svd(w, compute_uv=False)[0]
                    w *= 0.35 / sigma
        n_per = 80
        phase_idx, out_steps = unrolled_geometry(shape, n_per)
        inputs = rng.normal(size=(len(phase_idx), 6))
        base = np.exp(rnn.forward(model, inputs, phase_idx, out_steps)[0][0])

        padded = np.concatenate([np.zeros((shape.phases, 6)), inputs])
        phase2, out2 = unrolled_geometry(shape, n_per + 1)
        shifted = np.exp(rnn.forward(model, padded, phase2, out2)[0][0])
        inner = np.arange(30, n_per - 30)
        assert np.abs(shifted[inner + 1] - base[inner]).max() < 1e-9

    def test_nan_raises_with_step(self):
        shape = make_shape((6, 8), 4, 2)
        model = rnn.init_model(shape, np.random.default_rng(5))
        model.fw_in_w[0][0][0, 0] = np.inf
        phase_idx, out_steps = unrolled_geometry(shape, 3)
        with np.errstate(invalid="ignore"):
            with pytest.raises(FloatingPointError, match="step"):
                rnn.forward(model, np.ones((3, 6)), phase_idx, out_steps)


class TestCounting:
    def test_hand_count_small_shape(self):
        # 4*8 (input maps, both dirs) + 8^2/2 (state maps) + 8*2 (readout) = 80
        shape = make_shape((4, 8), 2, 2, m_symbols=2)
        assert rnn.count_rnn_multiplications(shape) == 80

    def test_width_scaling(self):
        base = make_shape((4, 8), 2, 2, m_symbols=2)
        wide = make_shape((4, 16), 2, 2, m_symbols=2)
        delta = (rnn.count_rnn_multiplications(wide)
                 - rnn.count_rnn_multiplications(base))
        assert delta == (4 * 8 + (256 - 64) // 2 + 8 * 2)

    def test_instrumented_matches_formula_random_shapes(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            depth = int(rng.integers(1, 4))
            dims = [int(rng.integers(2, 12))]
            dims += [2 * int(rng.integers(2, 10)) for _ in range(depth)]
            m_sym = int(2 ** rng.integers(1, 4))
            l_y = dims[0] - 1
            shape = make_shape(tuple(dims), l_y, dims[0] - l_y, m_symbols=m_sym)
            model = rnn.init_model(shape, rng)
            t_steps = int(rng.integers(2, 7))
            phase_idx, out_steps = unrolled_geometry(shape, t_steps)
            counter = MultCounter()
            rnn.forward(model, rng.normal(size=(t_steps, dims[0])),
                        phase_idx, out_steps, counter=counter)
            assert counter.total == t_steps * rnn.count_rnn_multiplications(shape)

    def test_instrumented_multi_phase(self):
        shape = make_shape((6, 8), 4, 2, n_stages=3, s=1, m_symbols=4)
        model = rnn.init_model(shape, np.random.default_rng(7))
        n_per = 4
        phase_idx, out_steps = unrolled_geometry(shape, n_per)
        counter = MultCounter()
        rnn.forward(model, np.zeros((len(phase_idx), 6)), phase_idx, out_steps,
                    counter=counter)
        rec = 6 * 8 + 64 // 2
        out = 8 * 4
        assert counter.total == len(phase_idx) * rec + n_per * out

    def test_published_profile_counts(self):
        configs = [((96, 128, 64), 4, 30976),
                   ((96, 128, 128), 8, 46080),
                   ((148, 200, 128, 128), 16, 110016),
                   ((164, 200, 200, 200, 168), 32, 225888),
                   ((200, 300, 300, 300, 240), 64, 491160)]
        for dims, m_sym, expect in configs:
            shape = make_shape(dims, dims[0] - 32, 32, m_symbols=m_sym)
            assert rnn.count_rnn_multiplications(shape) == expect
        # the 4-ary config rounds to 3.1e4
        shape = make_shape((96, 128, 64), 64, 32, m_symbols=4)
        assert f"{rnn.count_rnn_multiplications(shape):.1e}" == "3.1e+04"


class TestModelIO:
    def test_roundtrip(self, tmp_path):
        shape = make_shape((6, 8, 4), 4, 2, n_stages=2, s=1, m_symbols=4)
        rng = np.random.default_rng(8)
        model = rnn.init_model(shape, rng,
                               norm=rnn.Normalization(0.5, 2.0, 0.25))
        model.provenance = {"stage": 1, "note": "test"}
        rnn.save_model(model, tmp_path / "ckpt")
        loaded = rnn.load_model(tmp_path / "ckpt")
        assert loaded.shape == shape
        assert vars(loaded.norm) == vars(model.norm)
        assert loaded.provenance == model.provenance
        for (na, a), (nb, b) in zip(model.parameters(), loaded.parameters()):
            assert na == nb
            assert np.array_equal(a, b)

    def test_parameter_count_scales_with_phases(self):
        base = make_shape((6, 8), 4, 2, n_stages=1, s=1)
        tri = make_shape((6, 8), 4, 2, n_stages=3, s=1)
        n_out = 4 * 8 + 4
        assert (rnn.RnnModel(tri).n_parameters() - n_out) == \
            3 * (rnn.RnnModel(base).n_parameters() - n_out)

    def test_bad_magic_rejected(self, tmp_path):
        shape = make_shape((6, 8), 4, 2)
        model = rnn.RnnModel(shape)
        rnn.save_model(model, tmp_path / "ckpt")
        raw = (tmp_path / "ckpt.bin").read_bytes()
        (tmp_path / "ckpt.bin").write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(ValueError):
            rnn.load_model(tmp_path / "ckpt")


class TestDetectorApi:
    def test_rnn_app_positions_and_rows(self):
        cfg = ch.ChannelConfig(alphabet=ch.Alphabet.bipolar_ask(4), n_os=2, n_sim=2,
                               nonlinearity=ch.SquareLaw(), noise_variance=1.0)
        chan = ch.make_channel(cfg, k_g=7).with_transmit_power_db(3.0)
        plan = sic.SicPlan(2, 12)
        shape = make_shape((8 + 4, 16), l_y=8, l_ic=4, n_stages=2, s=2,
                           m_symbols=4, n_os=2)
        model = rnn.init_model(shape, np.random.default_rng(9))
        blk = ch.random_block(chan, 12, np.random.default_rng(10))
        view = sic.stage_view(plan, 2, blk.x)
        app = rnn.rnn_app(model, blk.y, view)
        assert np.array_equal(app.positions, view.targets)
        assert np.abs(app.probs.sum(axis=1) - 1.0).max() < 1e-12
