"""Readers and writers for MIT-BIH style records.

Supports WFDB text headers, format-212 signal files, MIT binary annotation
files, and a CSV fallback (``<name>.csv`` + ``<name>.ann.csv`` next to a
header whose signal format is ``csv``).
"""

from __future__ import annotations

import csv
import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ("212", "csv")

# Records containing paced beats, excluded from training and test data.
PACED_RECORDS = ("102", "104", "107", "217")

# MIT annotation type codes -> symbols (ecgcodes table).
ANNOTATION_SYMBOLS: dict[int, str] = {
    1: "N", 2: "L", 3: "R", 4: "a", 5: "V", 6: "F", 7: "J", 8: "A", 9: "S",
    10: "E", 11: "j", 12: "/", 13: "Q", 14: "~", 16: "|", 18: "s", 19: "T",
    20: "*", 21: "D", 22: '"', 23: "=", 24: "p", 25: "B", 26: "^", 27: "t",
    28: "+", 29: "u", 30: "?", 31: "!", 32: "[", 33: "]", 34: "e", 35: "n",
    36: "@", 37: "x", 38: "f", 39: "(", 40: ")", 41: "r",
}
SYMBOL_CODES = {s: c for c, s in ANNOTATION_SYMBOLS.items()}

SKIP, NUM, SUB, CHN, AUX = 59, 60, 61, 62, 63


class RecordFormatError(ValueError):
    """Raised when a header, signal, or annotation stream is malformed."""


class BeatClass(enum.IntEnum):
    N = 0
    S = 1
    V = 2
    F = 3
    Q = 4


CLASS_NAMES = tuple(c.name for c in BeatClass)

_AAMI = {
    **dict.fromkeys("NLRej", BeatClass.N),
    **dict.fromkeys("AaJS", BeatClass.S),
    **dict.fromkeys("VE", BeatClass.V),
    "F": BeatClass.F,
    **dict.fromkeys("/fQ", BeatClass.Q),
}


def map_symbol_to_class(symbol: str) -> BeatClass | None:
    """AAMI grouping of an annotation symbol; ``None`` marks a non-beat."""
    return _AAMI.get(symbol)


@dataclass(frozen=True)
class ChannelSpec:
    signal_format: str
    gain: float
    adc_zero: int
    lead_name: str
    baseline: int | None = None
    file_name: str = ""

    @property
    def offset(self) -> int:
        return self.adc_zero if self.baseline is None else self.baseline


@dataclass(frozen=True)
class RecordHeader:
    record_name: str
    n_channels: int
    sampling_rate_hz: float
    n_samples: int
    channels: tuple[ChannelSpec, ...] = ()

    def __post_init__(self):
        if self.n_channels < 1:
            raise RecordFormatError("zero channels")
        if self.sampling_rate_hz <= 0:
            raise RecordFormatError("sampling rate must be positive")
        if any(ch.gain <= 0 for ch in self.channels):
            raise RecordFormatError("gain must be positive")

    def lead_index(self, lead: str) -> int | None:
        for i, ch in enumerate(self.channels):
            if ch.lead_name == lead:
                return i
        return None


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    symbol: str


@dataclass
class EcgRecord:
    header: RecordHeader
    channels: np.ndarray  # (n_channels, n_samples) int16 ADC units
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.int16)
        if self.channels.ndim != 2 or self.channels.shape[0] != self.header.n_channels:
            raise RecordFormatError("channel array does not match header")
        n = self.channels.shape[1]
        idx = np.array([a.sample_index for a in self.annotations], dtype=np.int64)
        if idx.size:
            if np.any(np.diff(idx) < 0):
                raise RecordFormatError("annotation indices must be non-decreasing")
            if idx[0] < 0 or idx[-1] >= n:
                raise RecordFormatError("annotation index outside record")

    @property
    def name(self) -> str:
        return self.header.record_name

    @property
    def fs(self) -> float:
        return self.header.sampling_rate_hz

    def physical(self, channel: int = 0) -> np.ndarray:
        """Channel in mV."""
        spec = self.header.channels[channel]
        return (self.channels[channel].astype(np.float64) - spec.offset) / spec.gain

    def lead(self, name: str = "MLII") -> np.ndarray | None:
        i = self.header.lead_index(name)
        return None if i is None else self.physical(i)


# --------------------------------------------------------------------- header


def _parse_gain(token: str) -> tuple[float, int | None]:
    # "200", "200(0)/mV", "200/mV"
    token = token.split("/")[0]
    baseline = None
    if "(" in token:
        token, rest = token.split("(", 1)
        baseline = int(rest.rstrip(")"))
    return float(token), baseline


def parse_header(data: bytes | str) -> RecordHeader:
    text = data.decode("ascii", errors="replace") if isinstance(data, bytes) else data
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise RecordFormatError("empty header")
    parts = lines[0].split()
    if len(parts) < 2:
        raise RecordFormatError(f"malformed record line: {lines[0]!r}")
    try:
        name = parts[0].split("/")[0]
        n_channels = int(parts[1])
        fs = float(parts[2].split("/")[0].split(":")[0]) if len(parts) > 2 else 250.0
        n_samples = int(parts[3]) if len(parts) > 3 else 0
    except ValueError as exc:
        raise RecordFormatError(f"malformed record line: {lines[0]!r}") from exc
    if n_channels < 1:
        raise RecordFormatError("zero channels")
    if len(lines) < 1 + n_channels:
        raise RecordFormatError("missing channel lines")
    channels = []
    for ln in lines[1 : 1 + n_channels]:
        tok = ln.split()
        if len(tok) < 2:
            raise RecordFormatError(f"malformed channel line: {ln!r}")
        fmt = tok[1].split("x")[0].split(":")[0].split("+")[0]
        if fmt not in SUPPORTED_FORMATS:
            raise RecordFormatError(f"unsupported format {fmt!r}")
        try:
            gain, baseline = _parse_gain(tok[2]) if len(tok) > 2 else (200.0, None)
            adc_zero = int(tok[4]) if len(tok) > 4 else 0
        except ValueError as exc:
            raise RecordFormatError(f"malformed channel line: {ln!r}") from exc
        if gain == 0:
            gain = 200.0  # WFDB convention: 0 means uncalibrated, default gain
        lead = " ".join(tok[8:]) if len(tok) > 8 else f"ch{len(channels)}"
        channels.append(ChannelSpec(fmt, gain, adc_zero, lead, baseline, tok[0]))
    return RecordHeader(name, n_channels, fs, n_samples, tuple(channels))


def format_header(header: RecordHeader) -> str:
    fs = f"{header.sampling_rate_hz:g}"
    out = [f"{header.record_name} {header.n_channels} {fs} {header.n_samples}"]
    for ch in header.channels:
        ext = "dat" if ch.signal_format == "212" else "csv"
        fname = ch.file_name or f"{header.record_name}.{ext}"
        gain = f"{ch.gain:g}" if ch.baseline is None else f"{ch.gain:g}({ch.baseline})"
        out.append(f"{fname} {ch.signal_format} {gain}/mV 11 {ch.adc_zero} 0 0 0 {ch.lead_name}")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------- format 212


def decode_format212(data: bytes, header: RecordHeader | None = None) -> np.ndarray:
    """Unpack format-212 bytes into ``(n_channels, n_samples)`` int16."""
    raw = np.frombuffer(data, dtype=np.uint8)
    n_channels = header.n_channels if header is not None else 2
    if raw.size % 3:
        # a trailing sample may be stored in 2 bytes (odd total sample count)
        if raw.size % 3 != 2:
            raise RecordFormatError("truncated format-212 stream")
        raw = np.concatenate([raw, np.zeros(1, np.uint8)])
        odd = True
    else:
        odd = False
    g = raw.reshape(-1, 3).astype(np.int32)
    s1 = g[:, 0] | ((g[:, 1] & 0x0F) << 8)
    s2 = g[:, 2] | ((g[:, 1] >> 4) << 8)
    flat = np.empty(2 * len(g), dtype=np.int32)
    flat[0::2], flat[1::2] = s1, s2
    if odd:
        flat = flat[:-1]
    flat = np.where(flat >= 2048, flat - 4096, flat).astype(np.int16)
    if flat.size % n_channels:
        raise RecordFormatError("sample count not divisible by channel count")
    out = flat.reshape(-1, n_channels).T
    if header is not None and header.n_samples and out.shape[1] != header.n_samples:
        if out.shape[1] < header.n_samples:
            raise RecordFormatError(
                f"signal holds {out.shape[1]} samples, header declares {header.n_samples}"
            )
        out = out[:, : header.n_samples]
    return np.ascontiguousarray(out)


def encode_format212(channels: np.ndarray) -> bytes:
    """Pack ``(n_channels, n_samples)`` 12-bit values into format 212."""
    channels = np.asarray(channels)
    flat = channels.T.reshape(-1).astype(np.int32)
    if flat.size and (flat.min() < -2048 or flat.max() > 2047):
        raise RecordFormatError("sample outside 12-bit range")
    flat &= 0xFFF
    odd = flat.size % 2
    if odd:
        flat = np.concatenate([flat, [0]])
    a, b = flat[0::2], flat[1::2]
    out = np.empty((len(a), 3), dtype=np.uint8)
    out[:, 0] = a & 0xFF
    out[:, 1] = ((a >> 8) & 0x0F) | (((b >> 8) & 0x0F) << 4)
    out[:, 2] = b & 0xFF
    data = out.tobytes()
    return data[:-1] if odd else data


# ---------------------------------------------------------------- annotations


def parse_annotations(data: bytes) -> list[Annotation]:
    """Decode an MIT annotation stream (terminated by a zero word)."""
    words = data
    n = len(words)
    pos = 0
    t = 0
    out: list[Annotation] = []
    while True:
        if pos + 2 > n:
            raise RecordFormatError("annotation stream truncated before terminator")
        word = words[pos] | (words[pos + 1] << 8)
        pos += 2
        if word == 0:
            return out
        code, delta = word >> 10, word & 0x3FF
        if code == SKIP:
            if pos + 4 > n:
                raise RecordFormatError("truncated SKIP field")
            hi = words[pos] | (words[pos + 1] << 8)
            lo = words[pos + 2] | (words[pos + 3] << 8)
            pos += 4
            skip = (hi << 16) | lo
            if skip >= 1 << 31:
                skip -= 1 << 32
            t += skip
        elif code == AUX:
            pos += delta + (delta & 1)
            if pos > n:
                raise RecordFormatError("truncated AUX field")
        elif code in (NUM, SUB, CHN):
            pass
        else:
            t += delta
            if t >= 1 << 31:
                raise RecordFormatError("annotation index overflow")
            if t < 0:
                raise RecordFormatError("negative annotation index")
            out.append(Annotation(t, ANNOTATION_SYMBOLS.get(code, "?")))


def encode_annotations(annotations: list[Annotation]) -> bytes:
    buf = bytearray()
    prev = 0
    for ann in annotations:
        code = SYMBOL_CODES.get(ann.symbol)
        if code is None:
            raise RecordFormatError(f"no type code for symbol {ann.symbol!r}")
        delta = ann.sample_index - prev
        if delta < 0 or delta > 1023:
            buf += struct.pack("<H", SKIP << 10)
            buf += struct.pack("<HH", (delta >> 16) & 0xFFFF, delta & 0xFFFF)
            delta = 0
        buf += struct.pack("<H", (code << 10) | delta)
        prev = ann.sample_index
    buf += b"\x00\x00"
    return bytes(buf)


# ---------------------------------------------------------------- record I/O


def load_record_wfdb(base: str | Path, annotator: str = "atr") -> EcgRecord:
    base = Path(base)
    header = parse_header(base.with_suffix(".hea").read_bytes())
    if header.channels[0].signal_format == "csv":
        return load_record_csv(base.with_suffix(".csv"))
    fname = header.channels[0].file_name or f"{base.name}.dat"
    channels = decode_format212((base.parent / fname).read_bytes(), header)
    ann_path = base.with_suffix(f".{annotator}")
    anns = parse_annotations(ann_path.read_bytes()) if ann_path.exists() else []
    if not header.n_samples:
        header = RecordHeader(header.record_name, header.n_channels,
                              header.sampling_rate_hz, channels.shape[1], header.channels)
    return EcgRecord(header, channels, anns)


def load_record_csv(path: str | Path, fs: float = 360.0, gain: float = 200.0,
                    adc_zero: int = 0) -> EcgRecord:
    """Read ``<name>.csv`` (sample_index + one mV column per lead).

    Calibration comes from a sibling ``<name>.hea`` when present, otherwise
    from the keyword defaults. Annotations come from ``<name>.ann.csv``.
    """
    path = Path(path)
    name = path.name[: -len(".csv")] if path.name.endswith(".csv") else path.stem
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "sample_index" or len(rows[0]) < 2:
        raise RecordFormatError("CSV needs a sample_index column and at least one lead")
    leads = rows[0][1:]
    body = rows[1:]
    if any(len(r) != len(rows[0]) for r in body):
        raise RecordFormatError("ragged CSV row")
    idx = np.array([int(r[0]) for r in body], dtype=np.int64)
    if idx.size and (np.any(np.diff(idx) <= 0)):
        raise RecordFormatError("sample_index must be strictly increasing")
    mv = np.array([[float(v) for v in r[1:]] for r in body], dtype=np.float64).reshape(-1, len(leads))
    hea = path.with_name(name + ".hea")
    if hea.exists():
        header = parse_header(hea.read_bytes())
        specs = header.channels
        fs = header.sampling_rate_hz
    else:
        specs = tuple(ChannelSpec("csv", gain, adc_zero, lead) for lead in leads)
    if len(specs) != len(leads):
        raise RecordFormatError("CSV lead count does not match header")
    adc = np.stack([np.round(mv[:, i] * s.gain + s.offset) for i, s in enumerate(specs)])
    header = RecordHeader(name, len(leads), fs, mv.shape[0], tuple(specs))
    anns: list[Annotation] = []
    ann_path = path.with_name(name + ".ann.csv")
    if ann_path.exists():
        with ann_path.open(newline="") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head != ["sample_index", "symbol"]:
                raise RecordFormatError("annotation CSV needs sample_index,symbol columns")
            anns = [Annotation(int(r[0]), r[1]) for r in reader if r]
    return EcgRecord(header, adc.astype(np.int16), anns)


def write_record_csv(record: EcgRecord, directory: str | Path) -> Path:
    """Export a record as CSV + annotation CSV + csv-format header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.name
    specs = tuple(
        ChannelSpec("csv", c.gain, c.adc_zero, c.lead_name, c.baseline, f"{name}.csv")
        for c in record.header.channels
    )
    header = RecordHeader(name, record.header.n_channels, record.fs,
                          record.channels.shape[1], specs)
    (directory / f"{name}.hea").write_text(format_header(header))
    mv = [record.physical(i) for i in range(header.n_channels)]
    path = directory / f"{name}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", *[c.lead_name for c in specs]])
        for i in range(header.n_samples):
            w.writerow([i, *[repr(float(m[i])) for m in mv]])
    with (directory / f"{name}.ann.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "symbol"])
        for a in record.annotations:
            w.writerow([a.sample_index, a.symbol])
    return path


def write_record_wfdb(record: EcgRecord, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.name
    specs = tuple(
        ChannelSpec("212", c.gain, c.adc_zero, c.lead_name, c.baseline, f"{name}.dat")
        for c in record.header.channels
    )
    header = RecordHeader(name, record.header.n_channels, record.fs,
                          record.channels.shape[1], specs)
    (directory / f"{name}.hea").write_text(format_header(header))
    (directory / f"{name}.dat").write_bytes(encode_format212(record.channels))
    (directory / f"{name}.atr").write_bytes(encode_annotations(record.annotations))
    return directory / f"{name}.hea"


def load_record(path: str | Path) -> EcgRecord:
    """Load a record from a ``.hea`` base path, a ``.csv`` file, or a bare name."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_record_csv(path)
    base = path.with_suffix("") if path.suffix in (".hea", ".dat", ".atr") else path
    return load_record_wfdb(base)


def list_records(directory: str | Path) -> list[Path]:
    directory = Path(directory)
    return sorted(p.with_suffix("") for p in directory.glob("*.hea"))


def load_directory(directory: str | Path, lead: str = "MLII",
                   exclude: tuple[str, ...] = PACED_RECORDS) -> list[EcgRecord]:
    """Load every record in ``directory`` that carries ``lead``."""
    out = []
    for base in list_records(directory):
        if base.name in exclude:
            continue
        rec = load_record(base)
        if rec.header.lead_index(lead) is None:
            logger.warning("record %s has no %s lead; skipped", rec.name, lead)
            continue
        out.append(rec)
    return out


def class_counts(records: list[EcgRecord]) -> dict[str, int]:
    counts = dict.fromkeys(CLASS_NAMES, 0)
    for rec in records:
        for a in rec.annotations:
            cls = map_symbol_to_class(a.symbol)
            if cls is not None:
                counts[cls.name] += 1
    return counts
