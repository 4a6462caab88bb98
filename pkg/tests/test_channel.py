import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xrstream.channel import (ChannelGenerator, ChannelParams, ChannelSample, TraceError,
                              TraceExhausted, h_from_snr, load_trace, snr_from_h,
                              subchannel_rate, write_trace)

# 180 kHz * log2(1 + 100), evaluated independently of the package.
RATE_20DB = 180e3 * math.log(101) / math.log(2)


def test_rate_at_20db():
    p = ChannelParams()
    h = h_from_snr(100.0, p)
    assert abs(subchannel_rate(h, p) - 1_198_478) <= 1
    assert abs(RATE_20DB - 1_198_478) <= 1


def test_rate_zero_and_unit_snr():
    p = ChannelParams()
    assert subchannel_rate(0.0, p) == 0.0
    assert subchannel_rate(h_from_snr(1.0, p), p) == pytest.approx(180_000, abs=1e-6)


def test_snr_h_roundtrip():
    p = ChannelParams()
    for snr in (0.01, 1.0, 100.0, 1e4):
        assert snr_from_h(h_from_snr(snr, p), p) == pytest.approx(snr, rel=1e-12)


@pytest.mark.parametrize("field,value", [("bandwidth_hz", 0.0), ("power_w", -1.0),
                                         ("noise_psd", 0.0), ("n_max", -1), ("mode", "awgn")])
def test_params_invariants(field, value):
    with pytest.raises(ValueError):
        ChannelParams(**{field: value})


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e-5, allow_nan=False), min_size=2, max_size=50))
def test_rate_monotone_in_h(hs):
    p = ChannelParams()
    hs = sorted(hs)
    rates = [subchannel_rate(h, p) for h in hs]
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_fixed_mode_constant_rate():
    g = ChannelGenerator(ChannelParams(mode="fixed"), np.random.default_rng(123))
    samples = g.samples(50)
    assert all(abs(s.r_sc - 1_198_478) <= 1 for s in samples)
    assert [s.frame_index for s in samples] == list(range(50))
    assert all(s.n_max == 10 for s in samples)


def test_rayleigh_seeded_reproducible():
    p = ChannelParams(mode="rayleigh")
    a = ChannelGenerator(p, np.random.default_rng(7)).samples(500)
    b = ChannelGenerator(p, np.random.default_rng(7)).samples(500)
    c = ChannelGenerator(p, np.random.default_rng(8)).samples(500)
    assert a == b
    assert a != c


def test_rayleigh_mean_snr_law_of_large_numbers():
    p = ChannelParams(mode="rayleigh")
    g = ChannelGenerator(p, np.random.default_rng(2024))
    snr = np.array([snr_from_h(g.next_sample().h, p) for _ in range(1_000_000)])
    assert abs(snr.mean() - 100.0) / 100.0 < 0.02


def test_rate_zero_iff_h_zero():
    g = ChannelGenerator(ChannelParams(mode="rayleigh"), np.random.default_rng(1))
    for s in g.samples(2000):
        assert (s.r_sc == 0) == (s.h == 0)
        assert s.h >= 0 and s.r_sc >= 0


def test_load_trace_row_computes_rate(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("frame,n_max,snr_db\n0,10,20.0\n")
    (s,) = load_trace(f)
    assert s.n_max == 10
    assert abs(s.r_sc - 1_198_478) <= 1


def test_load_trace_rate_overrides(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("frame,n_max,snr_db,rate_bps\n0,4,20.0,500000.0\n1,0,-inf,0.0\n")
    a, b = load_trace(f)
    assert a.r_sc == 500000.0 and a.n_max == 4
    assert b.r_sc == 0.0 and b.h == 0.0


def test_load_empty_trace(tmp_path):
    f = tmp_path / "empty.csv"
    f.write_text("")
    assert load_trace(f) == []


@pytest.mark.parametrize("body,line", [
    ("frame,n_max,snr_db\n0,10,20\n1,-1,20\n", 3),
    ("frame,n_max,snr_db\n0,10\n", 2),
    ("frame,n_max,snr_db,rate_bps\n0,10,20,-5\n", 2),
    ("frame,n_max,snr_db\n0,ten,20\n", 2),
])
def test_load_trace_errors_name_line(tmp_path, body, line):
    f = tmp_path / "bad.csv"
    f.write_text(body)
    with pytest.raises(TraceError) as err:
        load_trace(f)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_trace_roundtrip(tmp_path):
    p = ChannelParams(mode="rayleigh")
    samples = ChannelGenerator(p, np.random.default_rng(5)).samples(200)
    samples.append(ChannelSample(200, 0.0, 0.0, 0))
    f = tmp_path / "rt.csv"
    write_trace(f, samples, p)
    back = load_trace(f, p)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.frame_index == b.frame_index
        assert a.n_max == b.n_max
        assert a.r_sc == b.r_sc
        assert b.h == pytest.approx(a.h, rel=1e-12)


def test_trace_mode_replay_and_exhaustion(tmp_path):
    f = tmp_path / "t.csv"
    f.write_text("frame,n_max,snr_db\n0,10,20\n1,5,10\n")
    g = ChannelGenerator(ChannelParams(mode="trace", trace_path=str(f)))
    a, b = g.next_sample(), g.next_sample()
    assert (a.n_max, b.n_max) == (10, 5)
    with pytest.raises(TraceExhausted):
        g.next_sample()
    looped = ChannelGenerator(ChannelParams(mode="trace", trace_path=str(f), trace_loop=True))
    assert [s.n_max for s in looped.samples(5)] == [10, 5, 10, 5, 10]
    assert [s.frame_index for s in looped.samples(2)] == [5, 6]
