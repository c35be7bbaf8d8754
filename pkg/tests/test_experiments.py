"""Toy studies: pairing curve, rivalry, adaptation, emitters."""

import numpy as np
import pytest

from astdp.experiments import (
    ADAPT_PHASE,
    StdpSweepConfig,
    TraceSeries,
    binocular_rivalry,
    curve_asymmetry,
    dominance_fractions,
    emit_csv,
    emit_pgm,
    neural_adaptation,
    stdp_curve,
    train_toy4,
)

RIVALRY_SEED = 5


@pytest.fixture(scope="module")
def toy4():
    return train_toy4(RIVALRY_SEED)


@pytest.fixture(scope="module")
def pairing_curve_w10():
    return stdp_curve(StdpSweepConfig(window=10, theta_pair=(0.4, 0.6)))


class TestPairingCurve:
    def test_far_offsets_vanish(self, pairing_curve_w10):
        c = pairing_curve_w10
        scale = np.abs(c.dw).max()
        assert abs(c.dw[0]) < 1e-3 * scale
        assert abs(c.dw[-1]) < 1e-3 * scale

    def test_sign_pattern(self, pairing_curve_w10):
        c = pairing_curve_w10
        pre_leads = c.dw[c.offsets < 0]
        post_leads = c.dw[c.offsets > 0]
        # potentiation when the presynaptic window leads, and the only
        # depression lives on the post-leading side
        assert pre_leads.max() > 0
        assert pre_leads.min() > -1e-9
        assert post_leads.min() < 0
        assert abs(post_leads.min()) > 100 * abs(min(pre_leads.min(), 0.0))

    def test_up_down_asymmetry(self, pairing_curve_w10):
        c = pairing_curve_w10
        assert c.dw.max() != pytest.approx(abs(c.dw.min()), rel=0.2)

    def test_smaller_windows_sharper(self):
        widths = {}
        for w in (5, 10, 15):
            c = stdp_curve(StdpSweepConfig(window=w, theta_pair=(0.4, 0.6)))
            half = c.dw.max() / 2
            widths[w] = int((c.dw > half).sum())
        assert widths[5] < widths[10] < widths[15]

    def test_asymmetry_grows_with_strong_clamp(self):
        asyms = []
        for theta_l in (0.5, 0.6, 0.7):
            c = stdp_curve(StdpSweepConfig(window=10, theta_pair=(0.4, theta_l)))
            asyms.append(curve_asymmetry(c))
        assert asyms[0] < asyms[1] < asyms[2]

    def test_deterministic(self):
        cfg = StdpSweepConfig(window=5, theta_pair=(0.4, 0.6), offsets=[-5, 0, 5])
        a = stdp_curve(cfg)
        b = stdp_curve(cfg)
        np.testing.assert_array_equal(a.dw, b.dw)

    def test_rejects_empty_window(self):
        with pytest.raises(ValueError):
            stdp_curve(StdpSweepConfig(window=0))


class TestRivalry:
    def test_ambiguous_input_alternates_with_fakes(self, toy4):
        trace = binocular_rivalry(RIVALRY_SEED, trained=toy4)
        assert trace.length == 2000
        frac = dominance_fractions(trace)
        assert frac[0] >= 0.2 and frac[1] >= 0.2

    def test_fakes_off_locks_in(self, toy4):
        trace = binocular_rivalry(RIVALRY_SEED, trained=toy4, fake_targets=False)
        frac = dominance_fractions(trace)
        assert frac.max() >= 0.95

    def test_clear_input_stays_dominant(self, toy4):
        trace = binocular_rivalry(RIVALRY_SEED, trained=toy4,
                                  pattern=(1.0, 0.0, 0.0, 0.0))
        frac = dominance_fractions(trace)
        assert frac[0] >= 0.95

    def test_trace_has_target_and_replica_columns(self, toy4):
        trace = binocular_rivalry(RIVALRY_SEED, trained=toy4, iters=50)
        for name in ("target_v0", "s_s_v0", "s_l_v0", "dz_v0", "s_s_h0"):
            assert name in trace.columns
        trace.validate()

    def test_deterministic(self, toy4):
        a = binocular_rivalry(RIVALRY_SEED, trained=toy4, iters=200)
        b = binocular_rivalry(RIVALRY_SEED, trained=toy4, iters=200)
        np.testing.assert_array_equal(a.columns["s_s_v0"], b.columns["s_s_v0"])


class TestAdaptation:
    def test_onset_overshoots_then_settles(self):
        trace = neural_adaptation(RIVALRY_SEED)
        s = trace.columns["s_s_n0"]
        onset = s[ADAPT_PHASE : 2 * ADAPT_PHASE]
        plateau = onset[-10:].mean()
        assert onset.max() > plateau + 0.02

    def test_offset_mirrors_with_undershoot(self):
        trace = neural_adaptation(RIVALRY_SEED)
        s = trace.columns["s_s_n0"]
        offset = s[2 * ADAPT_PHASE :]
        final = offset[-10:].mean()
        assert offset.min() < final - 0.02

    def test_plain_relaxation_is_monotone(self):
        trace = neural_adaptation(0, momentum=False, fake_targets=False,
                                  zero_weights=True)
        s = trace.columns["s_s_n0"]
        onset = np.diff(s[ADAPT_PHASE : 2 * ADAPT_PHASE])
        offset = np.diff(s[2 * ADAPT_PHASE :])
        assert (onset >= -1e-12).all()
        assert (offset <= 1e-12).all()

    def test_target_column_tracks_protocol(self):
        trace = neural_adaptation(0, zero_weights=True)
        t = trace.columns["target_n0"]
        assert t[:ADAPT_PHASE].max() == 0.0
        assert t[ADAPT_PHASE : 2 * ADAPT_PHASE].min() == 1.0
        assert t[2 * ADAPT_PHASE :].max() == 0.0


class TestEmitters:
    def test_pgm_zero_image(self, tmp_path):
        path = tmp_path / "z.pgm"
        emit_pgm(np.zeros(784), path)
        data = path.read_bytes()
        assert data.startswith(b"P5\n28 28\n255\n")
        assert data[len(b"P5\n28 28\n255\n"):] == b"\x00" * 784

    def test_pgm_value_mapping(self, tmp_path):
        path = tmp_path / "v.pgm"
        img = np.zeros(784)
        img[0] = 1.0
        img[1] = 0.5   # rounds half-up to 128
        img[2] = 2.0   # clamps to 255
        img[3] = -1.0  # clamps to 0
        emit_pgm(img, path)
        body = path.read_bytes()[len(b"P5\n28 28\n255\n"):]
        assert body[0] == 255
        assert body[1] == 128
        assert body[2] == 255
        assert body[3] == 0

    def test_pgm_custom_shape(self, tmp_path):
        path = tmp_path / "s.pgm"
        emit_pgm(np.zeros(12), path, rows=3, cols=4)
        assert path.read_bytes().startswith(b"P5\n4 3\n255\n")

    def test_csv_layout(self, tmp_path):
        path = tmp_path / "t.csv"
        emit_csv({"a": [1.0, 2.0], "b": [0.5, 0.25]}, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "a,b"
        assert lines[1] == "1.0,0.5"
        assert lines[2] == "2.0,0.25"

    def test_csv_rejects_ragged(self, tmp_path):
        with pytest.raises(ValueError):
            emit_csv({"a": [1.0], "b": [1.0, 2.0]}, tmp_path / "r.csv")

    def test_csv_roundtrip_of_trace(self, tmp_path):
        trace = TraceSeries({"x": np.array([0.125, 0.25])})
        emit_csv(trace, tmp_path / "x.csv")
        lines = (tmp_path / "x.csv").read_text().strip().split("\n")
        assert [float(v) for v in lines[1:]] == [0.125, 0.25]
