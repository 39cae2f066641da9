"""Embedding datasets: the MAAE container, batch collation, synthetic data.

MAAE layout (little-endian, no padding)::

    b"MAAE" | version u16 | C u32 | C x (u16 len, utf-8 class name)
    | modality count u8 | per modality: id u8, D_m u32, (u16 len, utf-8 name)
    | record count u64
    | per record: (u16 len, utf-8 id), label u32,
      per modality in table order: N_m u32, N_m*D_m float32
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, LengthError, ValidationError

log = logging.getLogger(__name__)

MAGIC = b"MAAE"
VERSION = 1

GLOBAL, LOCAL, TEXT = 0, 1, 2
MODALITY_LETTERS = {"G": GLOBAL, "L": LOCAL, "T": TEXT}
DEFAULT_NAMES = {GLOBAL: "global", LOCAL: "local", TEXT: "text"}


def modality_letter(mid: int) -> str:
    for k, v in MODALITY_LETTERS.items():
        if v == mid:
            return k
    return str(mid)


def parse_modalities(text: str | Sequence) -> list[int]:
    """``"G,L,T"`` or ``"0,2"`` -> sorted list of modality ids."""
    if isinstance(text, str):
        parts = [p.strip() for p in text.replace("+", ",").split(",") if p.strip()]
    else:
        parts = list(text)
    ids = set()
    for p in parts:
        if isinstance(p, (int, np.integer)):
            mid = int(p)
        elif p.upper() in MODALITY_LETTERS:
            mid = MODALITY_LETTERS[p.upper()]
        elif p.isdigit():
            mid = int(p)
        else:
            raise ValidationError(f"unknown modality {p!r}")
        if not 0 <= mid <= 255:
            raise ValidationError(f"modality id {mid} out of range")
        ids.add(mid)
    if not ids:
        raise ValidationError("empty modality list")
    return sorted(ids)


def format_modalities(ids: Iterable[int]) -> str:
    return ",".join(modality_letter(m) for m in sorted(ids))


@dataclass(frozen=True)
class ModalityInfo:
    id: int
    dim: int
    name: str


@dataclass
class DatasetHeader:
    num_classes: int
    class_names: list[str]
    modalities: list[ModalityInfo]
    record_count: int = 0
    version: int = VERSION

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise ValidationError("class_names length does not match num_classes")
        ids = [m.id for m in self.modalities]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate modality ids in {ids}")
        if not self.modalities:
            raise ValidationError("header needs at least one modality")
        for m in self.modalities:
            if not 0 <= m.id <= 255 or m.dim < 1:
                raise ValidationError(f"bad modality entry {m}")

    @property
    def dims(self) -> dict[int, int]:
        return {m.id: m.dim for m in self.modalities}


@dataclass
class EmbeddingRecord:
    id: str
    label: int
    tokens: dict[int, np.ndarray] = field(default_factory=dict)

    def num_tokens(self, modalities: Iterable[int] | None = None) -> int:
        keys = self.tokens if modalities is None else [m for m in modalities if m in self.tokens]
        return sum(self.tokens[m].shape[0] for m in keys)


def validate_record(rec: EmbeddingRecord, header: DatasetHeader) -> None:
    if not 0 <= rec.label < header.num_classes:
        raise ValidationError(f"record {rec.id!r}: label {rec.label} outside [0, {header.num_classes})")
    dims = header.dims
    for mid, z in rec.tokens.items():
        if mid not in dims:
            raise ValidationError(f"record {rec.id!r}: modality {mid} not in header")
        if z.ndim != 2 or (z.shape[0] > 0 and z.shape[1] != dims[mid]):
            raise ValidationError(
                f"record {rec.id!r}: modality {mid} has shape {z.shape}, header says D={dims[mid]}"
            )
    if rec.num_tokens() < 1:
        raise ValidationError(f"record {rec.id!r} has no tokens in any modality")


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise ValidationError(f"string too long for u16 length prefix: {s[:32]!r}...")
    return struct.pack("<H", len(b)) + b


def write_dataset(path, header: DatasetHeader, records: Iterable[EmbeddingRecord]) -> None:
    records = list(records)
    for rec in records:
        validate_record(rec, header)
    header.record_count = len(records)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", header.version, header.num_classes))
        for name in header.class_names:
            f.write(_pack_str(name))
        f.write(struct.pack("<B", len(header.modalities)))
        for m in header.modalities:
            f.write(struct.pack("<BI", m.id, m.dim))
            f.write(_pack_str(m.name))
        f.write(struct.pack("<Q", len(records)))
        for rec in records:
            f.write(_pack_str(rec.id))
            f.write(struct.pack("<I", rec.label))
            for m in header.modalities:
                z = rec.tokens.get(m.id)
                n = 0 if z is None else z.shape[0]
                f.write(struct.pack("<I", n))
                if n:
                    f.write(np.ascontiguousarray(z, dtype="<f4").tobytes())


class _Stream:
    def __init__(self, f):
        self.f = f

    def read(self, n: int, what: str) -> bytes:
        at = self.f.tell()
        b = self.f.read(n)
        if len(b) != n:
            raise FormatError(f"truncated file while reading {what}", at)
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", f"{what} length")
        at = self.f.tell()
        try:
            return self.read(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"invalid utf-8 in {what}", at) from e


def _read_header(s: _Stream) -> DatasetHeader:
    magic = s.read(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version, num_classes = s.unpack("<HI", "version/class count")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    names = [s.string("class name") for _ in range(num_classes)]
    (n_mod,) = s.unpack("<B", "modality count")
    mods = []
    for _ in range(n_mod):
        mid, dim = s.unpack("<BI", "modality entry")
        mods.append(ModalityInfo(mid, dim, s.string("modality name")))
    (count,) = s.unpack("<Q", "record count")
    try:
        return DatasetHeader(num_classes, names, mods, count, version)
    except ValidationError as e:
        raise FormatError(f"invalid header: {e}", 0) from e


class DatasetReader:
    """Lazy record stream over an MAAE file. Each iteration reopens the file,
    so one reader can be shared by several consumers."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self.header = _read_header(_Stream(f))
            self._data_offset = f.tell()

    def __len__(self) -> int:
        return self.header.record_count

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        header = self.header
        with open(self.path, "rb") as f:
            f.seek(self._data_offset)
            s = _Stream(f)
            for _ in range(header.record_count):
                rid = s.string("record id")
                (label,) = s.unpack("<I", "label")
                tokens = {}
                for m in header.modalities:
                    (n,) = s.unpack("<I", f"N for modality {m.id}")
                    raw = s.read(4 * n * m.dim, f"tokens for modality {m.id}")
                    tokens[m.id] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, m.dim)
                if label >= header.num_classes:
                    raise FormatError(f"record {rid!r}: label {label} >= C", f.tell())
                yield EmbeddingRecord(rid, label, tokens)
            if f.read(1):
                raise FormatError("trailing bytes after last record", f.tell() - 1)


def read_dataset(path) -> tuple[DatasetHeader, DatasetReader]:
    reader = DatasetReader(path)
    return reader.header, reader


def load_dataset(path) -> tuple[DatasetHeader, list[EmbeddingRecord]]:
    header, reader = read_dataset(path)
    return header, list(reader)


@dataclass
class Batch:
    tokens: np.ndarray  # (B, S, D_in), zero at masked slots and beyond each token's D_m
    modality_ids: np.ndarray  # (B, S) int
    mask: np.ndarray  # (B, S) bool
    labels: np.ndarray  # (B,) int
    ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    def replace_tokens(self, tokens: np.ndarray) -> "Batch":
        return Batch(tokens, self.modality_ids, self.mask, self.labels, self.ids)


def _select_tokens(rec: EmbeddingRecord, modalities, max_len: int, truncate: bool):
    parts = [(m, rec.tokens[m]) for m in modalities if m in rec.tokens and rec.tokens[m].shape[0] > 0]
    total = sum(z.shape[0] for _, z in parts)
    if total > max_len:
        excess = total - max_len
        text = [i for i, (m, _) in enumerate(parts) if m == TEXT]
        if not truncate or not text or parts[text[0]][1].shape[0] < excess:
            raise LengthError(f"record {rec.id!r}: {total} tokens exceeds max length {max_len}")
        i = text[0]
        keep = parts[i][1].shape[0] - excess
        log.warning("record %r: truncating text from %d to %d tokens", rec.id, parts[i][1].shape[0], keep)
        parts[i] = (TEXT, parts[i][1][:keep])
        parts = [p for p in parts if p[1].shape[0] > 0]
    return parts


def collate(
    records: Sequence[EmbeddingRecord],
    modalities: Sequence[int] | None = None,
    max_len: int = 64,
    order_seed: int | None = None,
    truncate: bool = True,
    dtype=np.float32,
) -> Batch:
    """Concatenate each record's tokens (canonical modality order) and pad.

    ``order_seed`` shuffles tokens within every sample, modality ids attached;
    it exists to exercise order invariance downstream.
    """
    if not records:
        raise ValidationError("cannot collate an empty list of records")
    if modalities is None:
        modalities = sorted({m for r in records for m in r.tokens})
    modalities = sorted(modalities)
    per_sample = [_select_tokens(r, modalities, max_len, truncate) for r in records]
    lengths = [sum(z.shape[0] for _, z in parts) for parts in per_sample]
    for r, n in zip(records, lengths):
        if n == 0:
            raise ValidationError(f"record {r.id!r} has no tokens in modalities {modalities}")
    s_max = max(lengths)
    d_in = max(z.shape[1] for parts in per_sample for _, z in parts)
    b = len(records)
    tokens = np.zeros((b, s_max, d_in), dtype=dtype)
    mids = np.zeros((b, s_max), dtype=np.int64)
    mask = np.zeros((b, s_max), dtype=bool)
    for i, parts in enumerate(per_sample):
        rows = np.zeros((lengths[i], d_in), dtype=dtype)
        ids = np.empty(lengths[i], dtype=np.int64)
        at = 0
        for m, z in parts:
            n, d = z.shape
            rows[at : at + n, :d] = z
            ids[at : at + n] = m
            at += n
        if order_seed is not None:
            perm = np.random.default_rng([order_seed, i]).permutation(lengths[i])
            rows, ids = rows[perm], ids[perm]
        tokens[i, : lengths[i]] = rows
        mids[i, : lengths[i]] = ids
        mask[i, : lengths[i]] = True
    labels = np.array([r.label for r in records], dtype=np.int64)
    return Batch(tokens, mids, mask, labels, [r.id for r in records])


def uncollate(batch: Batch, dims: dict[int, int]) -> list[dict[int, np.ndarray]]:
    """Recover each sample's per-modality token matrices (in batch order)."""
    out = []
    for i in range(batch.size):
        sample = {}
        for m, d in dims.items():
            sel = batch.mask[i] & (batch.modality_ids[i] == m)
            sample[m] = batch.tokens[i, sel, :d]
        out.append(sample)
    return out


@dataclass(frozen=True)
class CropBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


def five_crop_boxes(height: int, width: int) -> list[CropBox]:
    """Upper-left, upper-right, bottom-left, bottom-right and center half-size crops."""
    if height < 2 or width < 2:
        raise ValidationError(f"five_crop_boxes needs H, W >= 2, got {height}x{width}")
    h, w = math.ceil(height / 2), math.ceil(width / 2)
    cy, cx = (height - h) // 2, (width - w) // 2
    return [
        CropBox(0, 0, w, h),
        CropBox(width - w, 0, width, h),
        CropBox(0, height - h, w, height),
        CropBox(width - w, height - h, width, height),
        CropBox(cx, cy, cx + w, cy + h),
    ]


@dataclass
class SyntheticModality:
    """Generator settings for one modality.

    ``informativeness`` is the fraction of dimensions carrying the class
    prototype; prototype entries have variance 1/dim, so a fully informative
    prototype has unit expected squared norm. ``tokens`` is a count or an
    inclusive (lo, hi) range. ``scale`` multiplies finished tokens.
    """

    id: int
    dim: int
    tokens: int | tuple[int, int] = 1
    informativeness: float = 1.0
    noise: float = 0.1
    dropout: float = 0.0
    scale: float = 1.0
    name: str | None = None

    def validate(self) -> None:
        lo, hi = self.token_range
        if not 0 <= self.id <= 255:
            raise ValidationError(f"modality id {self.id} out of range")
        if self.dim < 1 or lo < 1 or hi < lo:
            raise ValidationError(f"bad dim/token settings in {self}")
        if not 0.0 <= self.informativeness <= 1.0:
            raise ValidationError(f"informativeness must lie in [0, 1], got {self.informativeness}")
        if self.noise < 0 or not 0.0 <= self.dropout < 1.0 or self.scale <= 0:
            raise ValidationError(f"bad noise/dropout/scale in {self}")

    @property
    def token_range(self) -> tuple[int, int]:
        if isinstance(self.tokens, (tuple, list)):
            return int(self.tokens[0]), int(self.tokens[1])
        return int(self.tokens), int(self.tokens)

    @classmethod
    def parse(cls, text: str) -> "SyntheticModality":
        """``ID:DIM:TOKENS:INFO:NOISE[:DROPOUT[:SCALE]]``; ID may be G/L/T, TOKENS may be ``lo-hi``."""
        parts = text.split(":")
        if not 5 <= len(parts) <= 7:
            raise ValidationError(f"bad modality spec {text!r}")
        mid = parse_modalities(parts[0])[0]
        tok = parts[2]
        tokens = tuple(int(t) for t in tok.split("-")) if "-" in tok else int(tok)
        spec = cls(
            mid,
            int(parts[1]),
            tokens,
            float(parts[3]),
            float(parts[4]),
            float(parts[5]) if len(parts) > 5 else 0.0,
            float(parts[6]) if len(parts) > 6 else 1.0,
        )
        spec.validate()
        return spec


def _make_header(num_classes, specs, class_names=None) -> DatasetHeader:
    names = class_names or [f"class_{c}" for c in range(num_classes)]
    mods = [ModalityInfo(s.id, s.dim, s.name or DEFAULT_NAMES.get(s.id, f"modality_{s.id}")) for s in specs]
    return DatasetHeader(num_classes, list(names), mods)


def _prototypes(rng, count: int, spec: SyntheticModality) -> np.ndarray:
    k = int(round(spec.informativeness * spec.dim))
    dims = rng.permutation(spec.dim)[:k]
    protos = np.zeros((count, spec.dim))
    protos[:, dims] = rng.normal(0.0, 1.0 / math.sqrt(spec.dim), size=(count, k))
    return protos


def _draw_tokens(rng, spec: SyntheticModality, proto: np.ndarray, dropped: bool) -> np.ndarray:
    if dropped:
        return np.zeros((0, spec.dim), dtype=np.float32)
    lo, hi = spec.token_range
    n = lo if lo == hi else int(rng.integers(lo, hi + 1))
    z = proto[None, :] + rng.normal(0.0, spec.noise, size=(n, spec.dim))
    return (z * spec.scale).astype(np.float32)


def _dropouts(rng, specs) -> list[bool]:
    dropped = [bool(s.dropout > 0 and rng.random() < s.dropout) for s in specs]
    if all(dropped):
        keep = min(range(len(specs)), key=lambda i: specs[i].dropout)
        dropped[keep] = False
    return dropped


def _validate_specs(num_classes, per_class, specs):
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise ValidationError("per_class must be >= 1")
    if not specs:
        raise ValidationError("need at least one modality")
    for s in specs:
        s.validate()
    if len({s.id for s in specs}) != len(specs):
        raise ValidationError("duplicate modality ids")


def gen_synthetic(
    num_classes: int,
    per_class: int,
    modality_spec: Sequence[SyntheticModality],
    seed: int,
    class_names: Sequence[str] | None = None,
) -> tuple[DatasetHeader, list[EmbeddingRecord]]:
    """Class-prototype data: each token is its class prototype (on the
    informative dims) plus isotropic Gaussian noise. Uses numpy's PCG64 seeded
    with ``seed``; records come back in a seeded shuffled order."""
    specs = sorted(modality_spec, key=lambda s: s.id)
    _validate_specs(num_classes, per_class, specs)
    rng = np.random.default_rng(seed)
    protos = {s.id: _prototypes(rng, num_classes, s) for s in specs}
    records = []
    for c in range(num_classes):
        for _ in range(per_class):
            dropped = _dropouts(rng, specs)
            tokens = {s.id: _draw_tokens(rng, s, protos[s.id][c], d) for s, d in zip(specs, dropped)}
            records.append(EmbeddingRecord("", c, tokens))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    for i, r in enumerate(records):
        r.id = f"s{seed}-{i:06d}"
    header = _make_header(num_classes, specs, class_names)
    header.record_count = len(records)
    return header, records


def gen_agreement(
    num_latent: int,
    per_class: int,
    modality_spec: Sequence[SyntheticModality],
    seed: int,
    pair: tuple[int, int] = (GLOBAL, TEXT),
) -> tuple[DatasetHeader, list[EmbeddingRecord]]:
    """Two-class data whose label is a cross-modality interaction.

    Every modality shows one of ``num_latent`` prototypes. The two modalities in
    ``pair`` show the same prototype for class 1 ("agree") and different ones
    for class 0; any other modality shows an independent random prototype. No
    single modality carries label information on its own.
    """
    specs = sorted(modality_spec, key=lambda s: s.id)
    _validate_specs(2, per_class, specs)
    if num_latent < 2:
        raise ValidationError("num_latent must be >= 2")
    ids = {s.id for s in specs}
    if pair[0] == pair[1] or not set(pair) <= ids:
        raise ValidationError(f"pair {pair} must name two distinct modalities from {sorted(ids)}")
    rng = np.random.default_rng(seed)
    protos = {s.id: _prototypes(rng, num_latent, s) for s in specs}
    records = []
    for label in (0, 1):
        for _ in range(per_class):
            a = int(rng.integers(num_latent))
            b = a if label == 1 else (a + int(rng.integers(1, num_latent))) % num_latent
            latent = {pair[0]: a, pair[1]: b}
            tokens = {}
            for s in specs:
                idx = latent.get(s.id, int(rng.integers(num_latent)))
                tokens[s.id] = _draw_tokens(rng, s, protos[s.id][idx], False)
            records.append(EmbeddingRecord("", label, tokens))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    for i, r in enumerate(records):
        r.id = f"a{seed}-{i:06d}"
    header = _make_header(2, specs, ["disagree", "agree"])
    header.record_count = len(records)
    return header, records


def split_records(records: Sequence[EmbeddingRecord], test_per_class: int, seed: int):
    """Stratified split: ``test_per_class`` records of every class go to test."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    test_idx = set()
    for c, idx in sorted(by_class.items()):
        if len(idx) <= test_per_class:
            raise ValidationError(f"class {c} has only {len(idx)} records, cannot hold out {test_per_class}")
        test_idx.update(rng.choice(idx, size=test_per_class, replace=False).tolist())
    train = [r for i, r in enumerate(records) if i not in test_idx]
    test = [r for i, r in enumerate(records) if i in test_idx]
    return train, test


def filter_modalities(records: Iterable[EmbeddingRecord], modalities: Sequence[int]) -> list[EmbeddingRecord]:
    """Keep only the given modalities; drop (with a warning) records left with no tokens."""
    keep = set(modalities)
    out, dropped = [], 0
    for r in records:
        tokens = {m: z for m, z in r.tokens.items() if m in keep}
        if sum(z.shape[0] for z in tokens.values()) == 0:
            dropped += 1
            continue
        out.append(EmbeddingRecord(r.id, r.label, tokens))
    if dropped:
        log.warning("dropped %d records with no tokens in modalities %s", dropped, format_modalities(keep))
    return out
