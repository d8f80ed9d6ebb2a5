import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eventgpt.events import (
    Event,
    EventFormatError,
    EventStream,
    InvalidWindowError,
    VoxelGrid,
    bin_events,
    decode_stream,
    encode_stream,
    normalize_grid,
    read_pgm,
    read_stream,
    render_frame,
    write_pgm,
    write_stream,
)


def random_stream(rng, n, w=32, h=24, t_max=10_000):
    return EventStream.from_unsorted(
        w, h, rng.integers(0, t_max + 1, n), rng.integers(0, w, n), rng.integers(0, h, n),
        rng.choice([-1, 1], n))


def test_empty_stream_bins_to_zero():
    g = bin_events(EventStream(8, 6), 0, 500, 5)
    assert g.data.shape == (5, 2, 6, 8) and not g.data.any()


def test_single_event_lands_in_forced_cell():
    s = EventStream.from_events(8, 8, [Event(250, 3, 4, 1)])
    g = bin_events(s, 0, 500, 5).data
    assert g[2, 0, 4, 3] == 1 and g.sum() == 1


def test_window_end_clamps_into_last_bin_and_outside_is_dropped():
    s = EventStream.from_events(4, 4, [Event(99, 0, 0, 1), Event(100, 0, 0, 1), Event(500, 1, 1, -1), Event(501, 2, 2, 1)])
    g = bin_events(s, 100, 500, 4).data
    assert g.sum() == 2
    assert g[0, 0, 0, 0] == 1 and g[3, 1, 1, 1] == 1


def test_invalid_window():
    with pytest.raises(InvalidWindowError):
        bin_events(EventStream(4, 4), 10, 10, 2)
    with pytest.raises(InvalidWindowError):
        render_frame(EventStream(4, 4), 10, 5)


def test_binning_matches_per_event_loop_oracle():
    rng = np.random.default_rng(0)
    s = random_stream(rng, 1000)
    t0, t1, n = 1_000, 9_000, 7
    oracle = np.zeros((n, 2, s.height, s.width))
    for e in s:
        if t0 <= e.t <= t1:
            b = min(int((e.t - t0) * n / (t1 - t0)), n - 1)
            oracle[b, 0 if e.p > 0 else 1, e.y, e.x] += 1
    assert np.array_equal(bin_events(s, t0, t1, n).data, oracle)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_binning_conserves_count_and_ignores_order(seed, n):
    rng = np.random.default_rng(seed)
    s = random_stream(rng, int(rng.integers(0, 300)))
    t0 = int(rng.integers(0, 5000))
    t1 = t0 + int(rng.integers(1, 6000))
    g = bin_events(s, t0, t1, n).data
    inside = ((s.t.astype(np.int64) >= t0) & (s.t.astype(np.int64) <= t1)).sum()
    assert g.sum() == inside and (g >= 0).all()
    perm = rng.permutation(len(s))
    shuffled = EventStream.from_unsorted(s.width, s.height, s.t[perm], s.x[perm], s.y[perm], s.p[perm])
    assert np.array_equal(bin_events(shuffled, t0, t1, n).data, g)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_consecutive_windows_concatenate(seed):
    rng = np.random.default_rng(seed)
    s = random_stream(rng, 400)
    t0 = int(rng.integers(0, 3000))
    half = int(rng.integers(1, 3500))
    t1, mid = t0 + 2 * half, t0 + half
    # inclusive windows: the first half ends one microsecond before the second begins
    left = bin_events(s, t0, mid - 1, 1).data if half > 1 else None
    right = bin_events(s, mid, t1, 1).data
    both = bin_events(s, t0, t1, 2).data
    assert np.array_equal(right[0], both[1])
    if left is not None:
        assert np.array_equal(left[0], both[0])
    else:
        assert np.array_equal(bin_events(s, t0, t0 + 1, 2).data[0], both[0])


def test_normalize_examples_and_idempotence():
    assert not normalize_grid(VoxelGrid(np.zeros((2, 2, 3, 3)))).data.any()
    d = np.zeros((1, 2, 3, 3))
    d[0, 1, 2, 2] = 4
    assert normalize_grid(VoxelGrid(d)).data[0, 1, 2, 2] == 1.0
    rng = np.random.default_rng(2)
    for _ in range(20):
        g = normalize_grid(bin_events(random_stream(rng, 500), 0, 10_000, 4))
        assert g.data.min() >= 0 and g.data.max() <= 1
        assert np.array_equal(normalize_grid(g).data, g.data)


def test_render_frame_cases():
    assert (render_frame(EventStream(5, 4), 0, 10) == 128).all()
    img = render_frame(EventStream.from_events(5, 4, [Event(3, 2, 1, 1)]), 0, 10)
    assert img[1, 2] > 128 and (np.delete(img.ravel(), 1 * 5 + 2) == 128).all()


def test_render_agrees_with_single_bin_grid():
    rng = np.random.default_rng(3)
    s = random_stream(rng, 2000)
    g = bin_events(s, 0, 10_000, 1).data[0]
    signed = g[0] - g[1]
    img = render_frame(s, 0, 10_000).astype(float)
    peak = np.abs(signed).max()
    assert np.array_equal(img, np.clip(np.rint(128 + signed * 127 / peak), 0, 255))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    # bytes that look like whitespace right after the header must survive
    img = rng.integers(0, 256, (7, 9)).astype(np.uint8)
    img[0, :3] = [9, 10, 32]
    write_pgm(tmp_path / "f.pgm", img)
    assert (tmp_path / "f.pgm").read_bytes().startswith(b"P5\n9 7\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "f.pgm"), img)


def test_codec_empty_round_trip(tmp_path):
    s = EventStream(640, 480)
    write_stream(tmp_path / "e.evst", s)
    assert read_stream(tmp_path / "e.evst") == s
    assert len(encode_stream(s)) == 18


def test_codec_large_round_trip():
    rng = np.random.default_rng(5)
    s = EventStream.from_unsorted(
        1280, 720, rng.integers(0, 2**63, 100_000, dtype=np.uint64), rng.integers(0, 1280, 100_000),
        rng.integers(0, 720, 100_000), rng.choice([-1, 1], 100_000))
    buf = encode_stream(s)
    assert len(buf) == 18 + 14 * 100_000
    back = decode_stream(buf)
    assert back == s and encode_stream(back) == buf


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_codec_round_trip_property(seed):
    rng = np.random.default_rng(seed)
    w, h = int(rng.integers(1, 2000)), int(rng.integers(1, 2000))
    n = int(rng.integers(0, 200))
    s = EventStream.from_unsorted(w, h, rng.integers(0, 2**64, n, dtype=np.uint64), rng.integers(0, w, n),
                                  rng.integers(0, h, n), rng.choice([-1, 1], n))
    buf = encode_stream(s)
    assert decode_stream(buf) == s
    assert encode_stream(decode_stream(buf)) == buf


def test_header_layout():
    buf = encode_stream(EventStream.from_events(3, 2, [Event(7, 2, 1, -1)]))
    assert buf[:4] == b"EVST"
    assert buf[4:6] == b"\x01\x00" and buf[6:8] == b"\x03\x00" and buf[8:10] == b"\x02\x00"
    assert buf[10:18] == (1).to_bytes(8, "little")
    assert buf[18:26] == (7).to_bytes(8, "little")
    assert buf[26:28] == b"\x02\x00" and buf[28:30] == b"\x01\x00" and buf[30:32] == b"\xff\x00"
    assert len(buf) == 18 + 14


def _one():
    return bytearray(encode_stream(EventStream.from_events(4, 4, [Event(1, 1, 1, 1), Event(2, 2, 2, -1)])))


def test_codec_errors_carry_offsets(tmp_path):
    bad = _one()
    bad[0:4] = b"EVSX"
    with pytest.raises(EventFormatError) as e:
        decode_stream(bytes(bad))
    assert e.value.offset == 0
    # nothing is returned on failure, even through the file API
    (tmp_path / "bad.evst").write_bytes(bytes(bad))
    with pytest.raises(EventFormatError):
        read_stream(tmp_path / "bad.evst")

    with pytest.raises(EventFormatError, match="truncated"):
        decode_stream(bytes(_one()[:-3]))
    with pytest.raises(EventFormatError, match="truncated header"):
        decode_stream(b"EVST")

    bad = _one()
    bad[18 + 14 + 8] = 9  # x of second record
    with pytest.raises(EventFormatError, match="x coordinate") as e:
        decode_stream(bytes(bad))
    assert e.value.offset == 18 + 14 + 8

    bad = _one()
    bad[18 + 10] = 4  # y of first record
    with pytest.raises(EventFormatError, match="y coordinate") as e:
        decode_stream(bytes(bad))
    assert e.value.offset == 18 + 10

    bad = _one()
    bad[18 + 12] = 0
    with pytest.raises(EventFormatError, match="polarity"):
        decode_stream(bytes(bad))

    bad = _one()
    bad[4] = 2
    with pytest.raises(EventFormatError, match="version"):
        decode_stream(bytes(bad))

    with pytest.raises(EventFormatError, match="trailing"):
        decode_stream(bytes(_one()) + b"\0")


def test_wide_timestamps_bin_exactly():
    big = 2**63 + 10
    s = EventStream.from_events(2, 2, [Event(big, 0, 0, 1), Event(2**64 - 1, 1, 1, -1)])
    g = bin_events(s, big, 2**64 - 1, 3).data
    assert g[0, 0, 0, 0] == 1 and g[2, 1, 1, 1] == 1


def test_stream_validation():
    with pytest.raises(ValueError):
        EventStream(4, 4, [2, 1], [0, 0], [0, 0], [1, 1])
    with pytest.raises(ValueError):
        EventStream(4, 4, [1], [4], [0], [1])
    with pytest.raises(ValueError):
        EventStream(4, 4, [1], [0], [0], [0])
    s = EventStream(4, 4, [1], [0], [0], [1])
    with pytest.raises(ValueError):
        s.t[0] = 5
