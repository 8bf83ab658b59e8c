"""PSD recordings, spectrogram tiles and synthetic spectrum data.

A PSD recording is a ``bins x steps`` matrix of power readings in dBm (one
column per time step). It is cut into non-overlapping ``W x W`` tiles, band
by band, and scaled to [0, 1] with the global min/max of the whole set.

Binary layouts (all little-endian):

* SPSD: ``b"SPSD"``, u32 version, u32 bins, u64 steps, then ``bins*steps``
  f32 values, bin-major.
* SPTL: ``b"SPTL"``, u32 version, u32 tile_count, u16 W, f32 gmin, f32 gmax,
  then per tile u32 time_index, u16 band_index and ``W*W`` f32 pixels.
  gmin/gmax are NaN for a set that has not been normalized.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptySetError, FormatError, ShapeError, VersionError

PSD_MAGIC = b"SPSD"
TILES_MAGIC = b"SPTL"
FORMAT_VERSION = 1

_PSD_HEADER = struct.Struct("<4sIIQ")
_TILES_HEADER = struct.Struct("<4sIIHff")
_TILE_HEADER = struct.Struct("<IH")

SYNTH_KINDS = ("line_burst", "dot_burst", "noise_only", "edge_attenuated")


@dataclass
class PsdMatrix:
    """Power spectral density recording, ``values[bin, step]`` in dBm."""

    values: np.ndarray
    sample_rate_hz: float = 5.0
    center_freq_hz: float = 868e6
    bandwidth_hz: float = 192e3

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ShapeError(f"PSD must be a (bins, steps) matrix, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("PSD contains non-finite values")

    @property
    def bins(self) -> int:
        return self.values.shape[0]

    @property
    def steps(self) -> int:
        return self.values.shape[1]


@dataclass
class Tile:
    pixels: np.ndarray
    time_index: int
    band_index: int


@dataclass
class TileSet:
    """Stack of ``W x W`` tiles with their (time window, sub-band) origin.

    Pixels are kept as float32 in an ``(n, W, W)`` array; row ``i`` of a tile
    is a frequency bin and column ``j`` a time step.
    """

    window: int
    pixels: np.ndarray
    time_index: np.ndarray
    band_index: np.ndarray
    norm_bounds: Optional[tuple] = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.size == 0:
            self.pixels = self.pixels.reshape(0, self.window, self.window)
        self.time_index = np.asarray(self.time_index, dtype=np.int64).reshape(-1)
        self.band_index = np.asarray(self.band_index, dtype=np.int64).reshape(-1)
        n = self.pixels.shape[0]
        if self.pixels.shape[1:] != (self.window, self.window):
            raise ShapeError(f"tiles must be {self.window}x{self.window}, got {self.pixels.shape[1:]}")
        if self.time_index.shape != (n,) or self.band_index.shape != (n,):
            raise ShapeError("index arrays must have one entry per tile")

    def __len__(self):
        return self.pixels.shape[0]

    def __getitem__(self, i) -> Tile:
        return Tile(self.pixels[i], int(self.time_index[i]), int(self.band_index[i]))

    def __iter__(self) -> Iterator[Tile]:
        for i in range(len(self)):
            yield self[i]

    @property
    def num_bands(self) -> int:
        return int(self.band_index.max()) + 1 if len(self) else 0

    def subset(self, indices) -> "TileSet":
        indices = np.asarray(indices, dtype=np.int64)
        return TileSet(self.window, self.pixels[indices], self.time_index[indices],
                       self.band_index[indices], self.norm_bounds)

    @classmethod
    def empty(cls, window: int) -> "TileSet":
        return cls(window, np.zeros((0, window, window), np.float32), [], [])


# --------------------------------------------------------------------------
# PSD files


def save_psd(psd: PsdMatrix, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PSD_HEADER.pack(PSD_MAGIC, FORMAT_VERSION, psd.bins, psd.steps))
        fh.write(psd.values.astype("<f4").tobytes(order="C"))


def load_psd(path) -> PsdMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PSD_HEADER.size:
        raise FormatError(f"{path}: file too short for SPSD header")
    magic, version, bins, steps = _PSD_HEADER.unpack_from(raw, 0)
    if magic != PSD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported SPSD version {version}")
    expected = bins * steps * 4
    payload = raw[_PSD_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(bins, steps).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite values in payload")
    return PsdMatrix(values)


# --------------------------------------------------------------------------
# Segmentation and scaling


def segment(psd: PsdMatrix, window: int) -> TileSet:
    """Cut ``psd`` into non-overlapping ``window x window`` tiles.

    Tile ``(b, t)`` covers bins ``[b*W, (b+1)*W)`` and steps ``[t*W, (t+1)*W)``;
    trailing rows/columns that do not fill a tile are dropped. Tiles are
    ordered band-major. Returns an empty set when no full tile fits.
    """
    if window < 2:
        raise ConfigError(f"window must be >= 2, got {window}")
    nb, nt = psd.bins // window, psd.steps // window
    if nb == 0 or nt == 0:
        return TileSet.empty(window)
    v = psd.values[: nb * window, : nt * window]
    pixels = v.reshape(nb, window, nt, window).transpose(0, 2, 1, 3).reshape(nb * nt, window, window)
    band, time = np.divmod(np.arange(nb * nt), nt)
    return TileSet(window, np.ascontiguousarray(pixels), time, band)


def tile_count(bins: int, steps: int, window: int) -> int:
    return (bins // window) * (steps // window)


def normalize(tiles: TileSet) -> TileSet:
    """Min-max scale all pixels to [0, 1] using the global bounds of the set.

    A constant set maps to all zeros. The bounds used are recorded in
    ``norm_bounds``.
    """
    if len(tiles) == 0:
        raise EmptySetError("cannot normalize an empty tile set")
    x = tiles.pixels.astype(np.float64)
    gmin, gmax = float(x.min()), float(x.max())
    if gmax > gmin:
        scaled = (x - gmin) / (gmax - gmin)
    else:
        scaled = np.zeros_like(x)
    return TileSet(tiles.window, scaled.astype(np.float32), tiles.time_index.copy(),
                   tiles.band_index.copy(), (gmin, gmax))


# --------------------------------------------------------------------------
# Tile files


def tiles_file_size(count: int, window: int) -> int:
    return _TILES_HEADER.size + count * (_TILE_HEADER.size + window * window * 4)


def save_tiles(tiles: TileSet, path) -> None:
    gmin, gmax = tiles.norm_bounds if tiles.norm_bounds is not None else (np.nan, np.nan)
    with open(path, "wb") as fh:
        fh.write(_TILES_HEADER.pack(TILES_MAGIC, FORMAT_VERSION, len(tiles), tiles.window, gmin, gmax))
        for i in range(len(tiles)):
            fh.write(_TILE_HEADER.pack(int(tiles.time_index[i]), int(tiles.band_index[i])))
            fh.write(tiles.pixels[i].astype("<f4").tobytes(order="C"))


def load_tiles(path) -> TileSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _TILES_HEADER.size:
        raise FormatError(f"{path}: file too short for SPTL header")
    magic, version, count, window, gmin, gmax = _TILES_HEADER.unpack_from(raw, 0)
    if magic != TILES_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported SPTL version {version}")
    if len(raw) != tiles_file_size(count, window):
        raise FormatError(f"{path}: size {len(raw)} does not match {count} tiles of {window}x{window}")
    rec = np.dtype([("time", "<u4"), ("band", "<u2"), ("px", "<f4", (window, window))])
    body = np.frombuffer(raw, dtype=rec, offset=_TILES_HEADER.size, count=count)
    bounds = None if np.isnan(gmin) else (float(gmin), float(gmax))
    return TileSet(window, body["px"].astype(np.float32), body["time"].astype(np.int64),
                   body["band"].astype(np.int64), bounds)


def save_labels(labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label"])
        for i, lab in enumerate(np.asarray(labels).tolist()):
            w.writerow([i, lab])


def load_labels(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.empty(len(rows), dtype=np.int64)
    for r in rows:
        labels[int(r["index"])] = int(r["label"])
    return labels


# --------------------------------------------------------------------------
# Synthetic data


@dataclass
class SynthClass:
    kind: str
    snr_db: float = 10.0
    duty_cycle: float = 0.5
    edge: str = "high"


@dataclass
class SynthConfig:
    """Per-class synthetic tile generator settings.

    ``snr_db`` is the burst power above the noise floor; for
    ``edge_attenuated`` it is the depth of the roll-off instead.
    """

    window: int = 32
    tiles_per_class: int = 100
    classes: list = field(default_factory=list)
    noise_floor_dbm: float = -100.0
    noise_std_db: float = 1.5
    seed: int = 0

    def validate(self):
        if self.window < 2:
            raise ConfigError("window must be >= 2")
        if self.tiles_per_class < 0:
            raise ConfigError("tiles_per_class must be >= 0")
        if self.noise_std_db < 0:
            raise ConfigError("noise_std_db must be >= 0")
        for c in self.classes:
            if c.kind not in SYNTH_KINDS:
                raise ConfigError(f"unknown synthetic class kind {c.kind!r}")
            if not 0.0 <= c.duty_cycle <= 1.0:
                raise ConfigError(f"duty_cycle must be in [0, 1], got {c.duty_cycle}")
            if c.edge not in ("low", "high"):
                raise ConfigError(f"edge must be 'low' or 'high', got {c.edge!r}")


def parse_classes(text: str) -> list:
    """Parse ``kind[:snr[:duty[:edge]]]`` items separated by commas."""
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        try:
            c = SynthClass(parts[0])
            if len(parts) > 1:
                c.snr_db = float(parts[1])
            if len(parts) > 2:
                c.duty_cycle = float(parts[2])
            if len(parts) > 3:
                c.edge = parts[3]
        except ValueError as exc:
            raise ConfigError(f"bad class spec {item!r}: {exc}") from None
        out.append(c)
    return out


def _rolloff(window: int, edge: str) -> np.ndarray:
    # 0 in the inner half, rising quadratically to 1 at the chosen edge
    half = window / 2
    ramp = np.clip((np.arange(window) + 0.5 - half) / half, 0.0, 1.0) ** 2
    return ramp[::-1] if edge == "low" else ramp


def _synth_tile(rng: np.random.Generator, c: SynthClass, cfg: SynthConfig) -> np.ndarray:
    W = cfg.window
    tile = cfg.noise_floor_dbm + cfg.noise_std_db * rng.standard_normal((W, W))
    level = cfg.noise_floor_dbm + c.snr_db
    if c.kind == "line_burst":
        span = max(1, int(round(c.duty_cycle * W)))
        for _ in range(int(rng.integers(1, 4))):
            row = int(rng.integers(0, W))
            thick = int(rng.integers(1, 3))
            start = int(rng.integers(0, W - span + 1))
            block = tile[row:row + thick, start:start + span]
            block[...] = level + cfg.noise_std_db * rng.standard_normal(block.shape)
    elif c.kind == "dot_burst":
        for _ in range(max(1, int(round(c.duty_cycle * W / 2)))):
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            r, s = int(rng.integers(0, W - h + 1)), int(rng.integers(0, W - w + 1))
            block = tile[r:r + h, s:s + w]
            block[...] = level + cfg.noise_std_db * rng.standard_normal(block.shape)
    elif c.kind == "edge_attenuated":
        tile -= c.snr_db * _rolloff(W, c.edge)[:, None]
    return tile


def synth_generate(cfg: SynthConfig):
    """Generate labeled synthetic tiles (unnormalized, dBm).

    Returns ``(tiles, labels)``. Tiles of all classes are interleaved by a
    seeded permutation; ``time_index`` is the tile position and
    ``band_index`` is 0. The output is a pure function of ``cfg``.
    """
    cfg.validate()
    W = cfg.window
    n = cfg.tiles_per_class * len(cfg.classes)
    if n == 0:
        return TileSet.empty(W), np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    pixels = np.empty((n, W, W), dtype=np.float64)
    labels = np.repeat(np.arange(len(cfg.classes)), cfg.tiles_per_class)
    for i, lab in enumerate(labels):
        pixels[i] = _synth_tile(rng, cfg.classes[lab], cfg)
    order = rng.permutation(n)
    tiles = TileSet(W, pixels[order].astype(np.float32), np.arange(n), np.zeros(n, dtype=np.int64))
    return tiles, labels[order].astype(np.int64)


@dataclass
class RecordingConfig:
    """Synthetic multi-band recording with sensor roll-off at some bands.

    ``attenuated`` maps a band index to the edge ("low" or "high") the gain
    rolls off towards. Broadband bursts (a few time steps hot across every
    bin) are sprinkled at ``burst_rate`` per step.
    """

    window: int = 32
    bands: int = 8
    windows: int = 60
    attenuated: dict = field(default_factory=lambda: {0: "low", 7: "high"})
    attenuation_db: float = 20.0
    noise_floor_dbm: float = -100.0
    noise_std_db: float = 1.5
    burst_rate: float = 0.02
    burst_snr_db: float = 8.0
    seed: int = 0

    def validate(self):
        if self.window < 2 or self.bands < 1 or self.windows < 0:
            raise ConfigError("window >= 2, bands >= 1 and windows >= 0 required")
        for b, edge in self.attenuated.items():
            if not 0 <= b < self.bands or edge not in ("low", "high"):
                raise ConfigError(f"bad attenuated band entry {b}: {edge!r}")
        if not 0.0 <= self.burst_rate <= 1.0:
            raise ConfigError("burst_rate must be in [0, 1]")


def synth_recording(cfg: RecordingConfig):
    """Generate a PSD recording and a per-tile label for ``segment``.

    Label 0 marks an unattenuated band; attenuated bands are labelled
    1, 2, ... in increasing band order. Labels follow the band-major tile
    order produced by :func:`segment`.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    W = cfg.window
    bins, steps = cfg.bands * W, cfg.windows * W
    v = cfg.noise_floor_dbm + cfg.noise_std_db * rng.standard_normal((bins, steps))
    hot = rng.random(steps) < cfg.burst_rate
    v[:, hot] += cfg.burst_snr_db
    band_label = np.zeros(cfg.bands, dtype=np.int64)
    for rank, b in enumerate(sorted(cfg.attenuated)):
        v[b * W:(b + 1) * W] -= cfg.attenuation_db * _rolloff(W, cfg.attenuated[b])[:, None]
        band_label[b] = rank + 1
    labels = np.repeat(band_label, cfg.windows)
    return PsdMatrix(v), labels
