"""BIG2015-style corpus ingestion.

Parses `.bytes` hex dumps and `.asm` disassembly listings into in-memory
streams, loads `id,family` manifests, and produces deterministic stratified
train/test splits.
"""
from __future__ import annotations

import csv
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateId,
    FamilyTooSmall,
    MalformedLine,
    NoOpcodesFound,
    UnknownFamily,
)

FAMILY_COUNT = 9

# Kaggle numbering of the nine BIG2015 families.
DEFAULT_FAMILY_NAMES = {
    1: "Ramnit",
    2: "Lollipop",
    3: "Kelihos_ver3",
    4: "Vundo",
    5: "Simda",
    6: "Tracur",
    7: "Kelihos_ver1",
    8: "Obfuscator.ACY",
    9: "Gatak",
}

# Tokens that look like mnemonics but are assembler directives / operand noise.
DEFAULT_STOP_LIST = frozenset(
    {"db", "dd", "dw", "dq", "align", "byte", "word", "dword", "offset", "ptr"}
)

_ADDR_RE = re.compile(r"^[0-9A-Fa-f]{8}$")
_HEX_PAIR_RE = re.compile(r"^[0-9A-Fa-f]{2}$")
_ASM_LOC_RE = re.compile(r"^[A-Za-z_.$][\w.$]*:[0-9A-Fa-f]+$")
_MNEMONIC_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]{0,15}$")

BYTES_PER_LINE = 16


@dataclass
class ByteStream:
    """Decoded byte values of one sample plus unknown-byte bookkeeping."""

    sample_id: str
    values: np.ndarray  # uint8, 1-D
    unknown_count: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8).ravel()
        if self.unknown_count < 0:
            raise ValueError("unknown_count must be non-negative")

    def __len__(self) -> int:
        return int(self.values.size)


@dataclass(frozen=True)
class OpcodeSequence:
    """Ordered lowercase mnemonics extracted from one disassembly listing."""

    sample_id: str
    opcodes: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.opcodes)


@dataclass(frozen=True)
class CorpusEntry:
    sample_id: str
    family: int
    bytes_path: str
    asm_path: str
    bytes_missing: bool = False
    asm_missing: bool = False


@dataclass
class CorpusIndex:
    """Validated manifest: one entry per sample, families mapped to names."""

    entries: tuple[CorpusEntry, ...]
    family_names: dict[int, str] = field(default_factory=lambda: dict(DEFAULT_FAMILY_NAMES))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def missing_bytes(self) -> tuple[str, ...]:
        return tuple(e.sample_id for e in self.entries if e.bytes_missing)

    @property
    def missing_asm(self) -> tuple[str, ...]:
        return tuple(e.sample_id for e in self.entries if e.asm_missing)

    def by_family(self) -> dict[int, list[CorpusEntry]]:
        grouped: dict[int, list[CorpusEntry]] = {}
        for e in self.entries:
            grouped.setdefault(e.family, []).append(e)
        return grouped

    def families(self) -> dict[str, int]:
        return {e.sample_id: e.family for e in self.entries}


@dataclass(frozen=True)
class SplitPlan:
    """Deterministic stratified train/test partition of a corpus index."""

    train_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int
    train_fraction: float


def parse_bytes_file(text: str, sample_id: str) -> ByteStream:
    """Decode a hex-dump listing: per line an 8-hex-digit address then up to
    16 byte tokens, each two hex digits or ``??``.

    Strict: any other token raises MalformedLine with its line number.
    ``??`` placeholders are counted but contribute no value. Blank lines are
    tolerated.
    """
    out = bytearray()
    unknown = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split()
        if not tokens:
            continue
        addr = tokens[0]
        if not _ADDR_RE.match(addr):
            raise MalformedLine(sample_id, line_no, addr)
        byte_tokens = tokens[1:]
        if len(byte_tokens) > BYTES_PER_LINE:
            raise MalformedLine(sample_id, line_no, byte_tokens[BYTES_PER_LINE])
        for tok in byte_tokens:
            if tok == "??":
                unknown += 1
            elif _HEX_PAIR_RE.match(tok):
                out.append(int(tok, 16))
            else:
                raise MalformedLine(sample_id, line_no, tok)
    return ByteStream(sample_id, np.frombuffer(bytes(out), dtype=np.uint8).copy(), unknown)


def serialize_bytes(stream: ByteStream, base_address: int = 0x00401000) -> str:
    """Render a ByteStream back into `.bytes` text (16 values per line).

    Unknown placeholders are not reproduced; round-trips preserve `values`.
    """
    lines = []
    values = stream.values
    for off in range(0, len(values), BYTES_PER_LINE):
        chunk = values[off : off + BYTES_PER_LINE]
        body = " ".join(f"{int(v):02X}" for v in chunk)
        lines.append(f"{(base_address + off) & 0xFFFFFFFF:08X} {body}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_asm_opcodes(
    text: str,
    sample_id: str,
    stop_list: frozenset[str] = DEFAULT_STOP_LIST,
) -> OpcodeSequence:
    """Extract mnemonics from a disassembly listing, preserving order.

    A code line starts with a section-prefixed address (``.text:00401000``),
    followed by hex byte columns, then the mnemonic. The first token after
    the byte columns that is letters/digits (1-16 chars, leading letter) is
    taken, lowercased; stop-listed tokens drop the line.
    """
    ops: list[str] = []
    for raw in text.splitlines():
        tokens = raw.split()
        if not tokens or not _ASM_LOC_RE.match(tokens[0]):
            continue
        i = 1
        while i < len(tokens) and (_HEX_PAIR_RE.match(tokens[i]) or tokens[i] == "??"):
            i += 1
        if i >= len(tokens):
            continue
        candidate = tokens[i]
        if not _MNEMONIC_RE.match(candidate):
            continue
        mnemonic = candidate.lower()
        if mnemonic in stop_list:
            continue
        ops.append(mnemonic)
    if not ops:
        raise NoOpcodesFound(f"{sample_id}: no mnemonics extracted")
    return OpcodeSequence(sample_id, tuple(ops))


def load_manifest(
    path: str | Path,
    bytes_root: str | Path,
    asm_root: str | Path,
    family_names: dict[int, str] | None = None,
) -> CorpusIndex:
    """Read an ``id,family`` manifest and resolve per-sample file paths.

    Missing files flag the entry but do not abort; duplicate ids and family
    labels outside 1..9 are errors.
    """
    bytes_root = Path(bytes_root)
    asm_root = Path(asm_root)
    names = dict(family_names) if family_names is not None else dict(DEFAULT_FAMILY_NAMES)

    entries: list[CorpusEntry] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["id", "family"]:
            raise UnknownFamily(f"{path}: manifest header must be 'id,family'")
        for row in reader:
            if not row or not "".join(row).strip():
                continue
            sample_id = row[0].strip()
            try:
                family = int(row[1].strip())
            except (IndexError, ValueError) as exc:
                raise UnknownFamily(f"{sample_id}: family label {row[1:]!r} is not an integer") from exc
            if not 1 <= family <= FAMILY_COUNT:
                raise UnknownFamily(f"{sample_id}: family {family} outside 1..{FAMILY_COUNT}")
            if sample_id in seen:
                raise DuplicateId(sample_id)
            seen.add(sample_id)
            bytes_path = bytes_root / f"{sample_id}.bytes"
            asm_path = asm_root / f"{sample_id}.asm"
            entries.append(
                CorpusEntry(
                    sample_id=sample_id,
                    family=family,
                    bytes_path=str(bytes_path),
                    asm_path=str(asm_path),
                    bytes_missing=not bytes_path.is_file(),
                    asm_missing=not asm_path.is_file(),
                )
            )
    referenced = {e.family for e in entries}
    missing_names = referenced - set(names)
    if missing_names:
        raise UnknownFamily(f"no family name for ids {sorted(missing_names)}")
    return CorpusIndex(entries=tuple(entries), family_names=names)


def split_corpus(index: CorpusIndex, train_fraction: float, seed: int) -> SplitPlan:
    """Stratified split: per family, round(n * fraction) samples go to train
    (clamped so both sets stay non-empty). Pure function of its arguments.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction {train_fraction} outside (0, 1)")
    grouped: dict[int, list[str]] = {}
    for e in index.entries:
        grouped.setdefault(e.family, []).append(e.sample_id)
    for family, ids in sorted(grouped.items()):
        if len(ids) < 2:
            raise FamilyTooSmall(f"family {family} has {len(ids)} sample(s); need >= 2")

    rng = random.Random(seed)
    train: list[str] = []
    test: list[str] = []
    for family in sorted(grouped):
        ids = sorted(grouped[family])
        rng.shuffle(ids)
        n = len(ids)
        k = min(max(round(n * train_fraction), 1), n - 1)
        train.extend(ids[:k])
        test.extend(ids[k:])
    return SplitPlan(
        train_ids=frozenset(train),
        test_ids=frozenset(test),
        seed=seed,
        train_fraction=train_fraction,
    )
