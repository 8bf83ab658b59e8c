import struct

import numpy as np
import pytest

from spectrum_dc.errors import ConfigError, DataError, EmptySetError, FormatError, VersionError
from spectrum_dc.ingest import (
    PsdMatrix,
    RecordingConfig,
    SynthClass,
    SynthConfig,
    TileSet,
    load_labels,
    load_psd,
    load_tiles,
    normalize,
    parse_classes,
    save_labels,
    save_psd,
    save_tiles,
    segment,
    synth_generate,
    synth_recording,
    tile_count,
    tiles_file_size,
)


def ramp_psd(bins, steps):
    return PsdMatrix(np.arange(bins * steps, dtype=np.float32).reshape(bins, steps))


# -- PSD files ---------------------------------------------------------------


def test_psd_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    psd = PsdMatrix(rng.normal(-90, 3, (16, 40)).astype(np.float32))
    p = tmp_path / "a.spsd"
    save_psd(psd, p)
    assert p.stat().st_size == 20 + 16 * 40 * 4
    back = load_psd(p)
    assert back.bins == 16 and back.steps == 40
    np.testing.assert_array_equal(back.values, psd.values)


def test_psd_header_layout(tmp_path):
    p = tmp_path / "a.spsd"
    save_psd(ramp_psd(2, 3), p)
    raw = p.read_bytes()
    assert struct.unpack_from("<4sIIQ", raw) == (b"SPSD", 1, 2, 3)
    # bin-major payload
    assert np.frombuffer(raw[20:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_psd_bad_magic(tmp_path):
    p = tmp_path / "a.spsd"
    save_psd(ramp_psd(2, 3), p)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_psd(p)


def test_psd_bad_version(tmp_path):
    p = tmp_path / "a.spsd"
    save_psd(ramp_psd(2, 3), p)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_psd(p)


def test_psd_truncated(tmp_path):
    p = tmp_path / "a.spsd"
    save_psd(ramp_psd(2, 3), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_psd(p)


def test_psd_nonfinite(tmp_path):
    p = tmp_path / "a.spsd"
    v = np.zeros((2, 3), np.float32)
    raw = struct.pack("<4sIIQ", b"SPSD", 1, 2, 3) + v.tobytes()
    raw = raw[:-4] + struct.pack("<f", float("nan"))
    p.write_bytes(raw)
    with pytest.raises(DataError):
        load_psd(p)


# -- segmentation ------------------------------------------------------------


def test_segment_counts_and_order():
    psd = ramp_psd(8, 13)
    tiles = segment(psd, 4)
    assert len(tiles) == tile_count(8, 13, 4) == 2 * 3
    # band-major: all windows of band 0 first
    assert tiles.band_index.tolist() == [0, 0, 0, 1, 1, 1]
    assert tiles.time_index.tolist() == [0, 1, 2, 0, 1, 2]
    t = tiles[4]
    np.testing.assert_array_equal(t.pixels, psd.values[4:8, 4:8])


def test_segment_drops_remainder():
    psd = ramp_psd(10, 9)
    tiles = segment(psd, 4)
    assert len(tiles) == 2 * 2
    covered = {(int(b), int(w)) for b, w in zip(tiles.band_index, tiles.time_index)}
    assert covered == {(0, 0), (0, 1), (1, 0), (1, 1)}


def test_segment_too_small_is_empty():
    tiles = segment(ramp_psd(3, 100), 4)
    assert len(tiles) == 0
    assert tiles.pixels.shape == (0, 4, 4)


def test_segment_window_too_small():
    with pytest.raises(ConfigError):
        segment(ramp_psd(4, 4), 1)


def test_tile_count_frozen():
    assert tile_count(1024, 52988 * 128, 128) == 423904
    assert tile_count(1024, 52988 * 128 + 127, 128) == 423904


# -- normalization -----------------------------------------------------------


def test_normalize_global_bounds():
    tiles = segment(ramp_psd(4, 8), 4)
    out = normalize(tiles)
    assert out.norm_bounds == (0.0, 31.0)
    assert out.pixels.min() == 0.0 and out.pixels.max() == 1.0
    # shared scale: tile 1 keeps its offset relative to tile 0
    np.testing.assert_allclose(out.pixels[1] - out.pixels[0], 4 / 31, rtol=1e-6)


def test_normalize_constant():
    tiles = TileSet(2, np.full((3, 2, 2), -80.0), [0, 1, 2], [0, 0, 0])
    out = normalize(tiles)
    assert np.all(out.pixels == 0)
    assert out.norm_bounds == (-80.0, -80.0)


def test_normalize_empty():
    with pytest.raises(EmptySetError):
        normalize(TileSet.empty(4))


# -- tile files --------------------------------------------------------------


def test_tiles_roundtrip(tmp_path):
    tiles = normalize(segment(ramp_psd(8, 12), 4))
    p = tmp_path / "t.sptl"
    save_tiles(tiles, p)
    assert p.stat().st_size == tiles_file_size(len(tiles), 4) == 22 + 6 * (6 + 64)
    back = load_tiles(p)
    np.testing.assert_array_equal(back.pixels, tiles.pixels)
    np.testing.assert_array_equal(back.band_index, tiles.band_index)
    np.testing.assert_array_equal(back.time_index, tiles.time_index)
    assert back.norm_bounds == pytest.approx(tiles.norm_bounds)


def test_tiles_unnormalized_bounds_are_nan(tmp_path):
    tiles = segment(ramp_psd(4, 4), 4)
    p = tmp_path / "t.sptl"
    save_tiles(tiles, p)
    gmin, gmax = struct.unpack_from("<ff", p.read_bytes(), 14)
    assert np.isnan(gmin) and np.isnan(gmax)
    assert load_tiles(p).norm_bounds is None


def test_tiles_size_mismatch(tmp_path):
    p = tmp_path / "t.sptl"
    save_tiles(segment(ramp_psd(4, 8), 4), p)
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(FormatError):
        load_tiles(p)


def test_labels_roundtrip(tmp_path):
    p = tmp_path / "l.csv"
    save_labels(np.array([3, 1, 2]), p)
    assert p.read_text() == "index,label\n0,3\n1,1\n2,2\n"
    assert load_labels(p).tolist() == [3, 1, 2]


# -- synthetic data ----------------------------------------------------------


def test_parse_classes():
    cs = parse_classes("noise_only, line_burst:12:0.3 ,edge_attenuated:15:0.5:low")
    assert [c.kind for c in cs] == ["noise_only", "line_burst", "edge_attenuated"]
    assert cs[1].snr_db == 12 and cs[1].duty_cycle == 0.3
    assert cs[2].edge == "low"
    with pytest.raises(ConfigError):
        parse_classes("line_burst:loud")


def test_synth_validation():
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(classes=[SynthClass("chirp")]))
    with pytest.raises(ConfigError):
        synth_generate(SynthConfig(classes=[SynthClass("dot_burst", duty_cycle=1.5)]))


def test_synth_shapes_and_balance():
    cfg = SynthConfig(window=16, tiles_per_class=7,
                      classes=parse_classes("noise_only,line_burst,dot_burst,edge_attenuated"), seed=3)
    tiles, labels = synth_generate(cfg)
    assert len(tiles) == 28 and tiles.window == 16
    assert np.bincount(labels).tolist() == [7, 7, 7, 7]
    assert tiles.norm_bounds is None


def test_synth_deterministic():
    cfg = SynthConfig(window=8, tiles_per_class=5, classes=parse_classes("line_burst,dot_burst"), seed=11)
    a, la = synth_generate(cfg)
    b, lb = synth_generate(cfg)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(la, lb)


def test_synth_class_signatures():
    cfg = SynthConfig(window=32, tiles_per_class=40, noise_std_db=0.0,
                      classes=parse_classes("noise_only,line_burst:12:1.0,edge_attenuated:15:0.5:high"))
    tiles, labels = synth_generate(cfg)
    x = tiles.pixels
    assert np.all(x[labels == 0] == -100.0)
    # a full-duty line occupies entire frequency rows
    lines = x[labels == 1]
    assert all(np.any(np.all(t == -88.0, axis=1)) for t in lines)
    # roll-off lowers the upper rows only
    edge = x[labels == 2]
    np.testing.assert_allclose(edge[:, :16], -100.0)
    assert np.all(edge[:, -1] < -110.0)


def test_recording_labels_follow_segment():
    cfg = RecordingConfig(window=8, bands=4, windows=5, attenuated={1: "low", 3: "high"}, seed=2)
    psd, labels = synth_recording(cfg)
    assert psd.values.shape == (32, 40)
    tiles = segment(psd, 8)
    assert labels.tolist() == [0] * 5 + [1] * 5 + [0] * 5 + [2] * 5
    assert np.array_equal(labels > 0, np.isin(tiles.band_index, [1, 3]))
