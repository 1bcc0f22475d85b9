import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flucsr.evaluation import (encode_pgm16, format_report, jaccard_index, localization_rmse,
                               match_spikes, metrics, read_pgm16, render_measure, write_pgm16)
from flucsr.measure import DiscreteMeasure
from flucsr.operators import PsfModel


def pts(*xy, amps=None):
    xy = np.array(xy, dtype=float).reshape(-1, 2)
    return DiscreteMeasure(np.ones(len(xy)) if amps is None else amps, xy)


# --- matching ----------------------------------------------------------------------

def test_identical_measures_match_at_zero():
    m = pts((1, 1), (4, 2), (3, 7))
    r = match_spikes(m, m, 0.5)
    assert r.pairs == [(0, 0, 0.0), (1, 1, 0.0), (2, 2, 0.0)]
    assert r.fn == 0 and r.fp == 0


def test_far_supports_do_not_match():
    r = match_spikes(pts((0, 0), (1, 0)), pts((5, 5), (6, 6)), 1.0)
    assert r.tp == 0 and r.unmatched_truth == [0, 1] and r.unmatched_recon == [0, 1]
    assert jaccard_index(r) == 0.0


def test_one_recon_two_equidistant_truths():
    r = match_spikes(pts((0, 0), (2, 0)), pts((1, 0)), 1.5)
    assert r.tp == 1 and r.fn == 1 and r.fp == 0
    # equal costs: the lower truth index wins
    assert r.pairs == [(0, 0, 1.0)]


def test_matching_maximizes_cardinality_before_distance():
    # greedy nearest-pair would take (t1, r0) at 0.1 and leave t0 unmatched
    truth = pts((0, 0), (0.9, 0))
    recon = pts((1.0, 0), (1.8, 0))
    r = match_spikes(truth, recon, 1.0)
    assert r.tp == 2
    assert sorted((i, j) for i, j, _ in r.pairs) == [(0, 0), (1, 1)]


def test_matching_minimizes_total_distance():
    truth = pts((0, 0), (1, 0))
    recon = pts((0.9, 0), (0.1, 0))
    r = match_spikes(truth, recon, 1.0)
    assert sorted((i, j) for i, j, _ in r.pairs) == [(0, 1), (1, 0)]


def test_match_radius_must_be_positive():
    with pytest.raises(ValueError):
        match_spikes(pts((0, 0)), pts((0, 0)), 0.0)


def test_match_empty_sides():
    r = match_spikes(DiscreteMeasure(), pts((1, 1)), 1.0)
    assert r.fp == 1 and r.tp == 0
    assert jaccard_index(match_spikes(DiscreteMeasure(), DiscreteMeasure(), 1.0)) == 1.0


clouds = st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=0, max_size=7,
                  unique=True)


@settings(max_examples=80)
@given(clouds, clouds, st.floats(0.1, 4))
def test_match_invariants(a, b, radius):
    truth = DiscreteMeasure(np.ones(len(a)), np.array(a).reshape(-1, 2))
    recon = DiscreteMeasure(np.ones(len(b)), np.array(b).reshape(-1, 2))
    r = match_spikes(truth, recon, radius)
    ti = [p[0] for p in r.pairs]
    rj = [p[1] for p in r.pairs]
    assert len(set(ti)) == len(ti) and len(set(rj)) == len(rj)
    assert all(d <= radius for _, _, d in r.pairs)
    assert r.tp + r.fn == len(truth) and r.tp + r.fp == len(recon)
    # swapping roles keeps the Jaccard index
    assert jaccard_index(match_spikes(recon, truth, radius)) == pytest.approx(jaccard_index(r))


@settings(max_examples=50)
@given(clouds, clouds, st.floats(0.1, 4), st.randoms(use_true_random=False))
def test_match_permutation_invariant(a, b, radius, rnd):
    truth = DiscreteMeasure(np.ones(len(a)), np.array(a).reshape(-1, 2))
    recon = DiscreteMeasure(np.ones(len(b)), np.array(b).reshape(-1, 2))
    pa = list(range(len(a)))
    pb = list(range(len(b)))
    rnd.shuffle(pa)
    rnd.shuffle(pb)
    t2 = DiscreteMeasure(np.ones(len(a)), np.array(a).reshape(-1, 2)[pa])
    r2 = DiscreteMeasure(np.ones(len(b)), np.array(b).reshape(-1, 2)[pb])
    r = match_spikes(truth, recon, radius)
    s = match_spikes(t2, r2, radius)
    assert r.tp == s.tp
    assert sum(d for _, _, d in r.pairs) == pytest.approx(sum(d for _, _, d in s.pairs), abs=1e-9)


# --- scores --------------------------------------------------------------------------

def test_jaccard_examples():
    m = pts((1, 1), (5, 5))
    assert jaccard_index(match_spikes(m, m, 0.5)) == 1.0
    r = match_spikes(pts((0, 0), (5, 0), (9, 9)), pts((0.1, 0), (5, 0.1), (2, 8)), 0.5)
    assert (r.tp, r.fn, r.fp) == (2, 1, 1)
    assert jaccard_index(r) == 0.5


def test_rmse_examples():
    m = pts((1, 1))
    assert localization_rmse(match_spikes(m, m, 1.0)) == 0.0
    assert localization_rmse(match_spikes(pts((0, 0)), pts((0.3, 0)), 1.0)) == pytest.approx(0.3)
    r = match_spikes(pts((0, 0), (5, 5)), pts((0.3, 0), (5, 5.4)), 1.0)
    assert localization_rmse(r) == pytest.approx(math.sqrt((0.09 + 0.16) / 2))
    assert localization_rmse(r) == pytest.approx(0.35355339, abs=1e-8)
    with pytest.raises(ValueError, match="no matched pairs"):
        localization_rmse(match_spikes(pts((0, 0)), pts((5, 5)), 1.0))


def test_metrics_report():
    truth = pts((0, 0), (5, 5), amps=[1.0, 2.0])
    recon = pts((0.3, 0), (5, 5), amps=[1.5, 2.0])
    vals = metrics(truth, recon, 0.5)
    assert vals["jaccard"] == 1.0 and vals["tp"] == 2 and vals["radius"] == 0.5
    assert vals["amplitude_error"] == pytest.approx(0.5 / 3)
    text = format_report(vals)
    assert text.endswith("\n")
    parsed = dict(line.split("=", 1) for line in text.splitlines())
    assert set(parsed) == {"jaccard", "tp", "fp", "fn", "radius", "rmse", "amplitude_error"}
    assert float(parsed["rmse"]) == vals["rmse"]
    assert math.isnan(metrics(truth, DiscreteMeasure(), 0.5)["rmse"])


# --- rendering -------------------------------------------------------------------------------

def test_render_examples():
    psf = PsfModel(1.0, 16, 16)
    assert render_measure(DiscreteMeasure(), psf, 4, 1.0).shape == (64, 64)
    assert np.all(render_measure(DiscreteMeasure(), psf, 4, 1.0) == 0.0)
    img = render_measure(pts((8.0, 8.0)), psf, 4, 1.5)
    assert img.sum() == pytest.approx(1.0, abs=1e-10)
    m1, m2 = pts((3.3, 4.4), amps=[2.0]), pts((10.1, 7.7), amps=[-0.5])
    np.testing.assert_allclose(render_measure(m1.concat(m2), psf, 3, 1.0),
                               render_measure(m1, psf, 3, 1.0) + render_measure(m2, psf, 3, 1.0),
                               rtol=1e-13, atol=1e-16)
    with pytest.raises(ValueError):
        render_measure(m1, psf, 0, 1.0)


def test_render_integer_translation_equivariance():
    psf = PsfModel(1.0, 16, 16)
    a = render_measure(pts((6.3, 7.1)), psf, 2, 1.0)
    b = render_measure(pts((8.3, 8.1)), psf, 2, 1.0)
    np.testing.assert_allclose(b[2:, 4:], a[:-2, :-4], atol=1e-15)


def test_render_centred_spike_is_symmetric():
    psf = PsfModel(1.0, 8, 8)
    img = render_measure(pts((4.0, 4.0)), psf, 4, 1.0)
    np.testing.assert_allclose(img, img.T, atol=1e-16)
    np.testing.assert_allclose(img, img[::-1, ::-1], atol=1e-16)
    # the spike maps to the fine-grid corner shared by pixels 15 and 16
    assert np.unravel_index(np.argmax(img), img.shape) == (15, 15)


def test_pgm_round_trip(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    raw, lo, hi = encode_pgm16(img)
    assert raw.startswith(b"P5\n2 2\n65535\n")
    assert (lo, hi) == (0.0, 4.0)
    assert write_pgm16(tmp_path / "a.pgm", img) == (0.0, 4.0)
    back = read_pgm16(tmp_path / "a.pgm")
    np.testing.assert_array_equal(back, [[0, 16384], [32768, 65535]])
    raw, _, _ = encode_pgm16(np.zeros((3, 2)))
    assert raw.endswith(b"\0" * 12)
