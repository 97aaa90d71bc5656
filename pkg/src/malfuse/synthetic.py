"""Procedural multi-family corpus generator.

Every synthetic family carries a signature in all three modalities so each
fusion row of the experiment grid has signal to learn:

* a private set of byte symbols, all multiples of 8, so the bigram mass sits
  on cells that survive the decimating (i*m/a, j*n/b) resize at any side
  that divides 256 (distinct bright regions in the grayscale image),
* an alternating noisy/calm block cadence with family-specific block
  lengths and alphabet sizes (distinct entropy-graph waveforms),
* a private 5-mnemonic opcode vocabulary (distinct simhash rows).

Sample content is a pure function of (corpus seed, family, sample index).
The default population mirrors a heavily imbalanced corpus: one minority
family is capped at a handful of samples.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import BYTES_PER_LINE

FAMILY_COUNT = 9

OPCODE_POOL = (
    "push", "mov", "call", "test", "pop",
    "lea", "cmp", "jmp", "jz", "jnz",
    "add", "sub", "xor", "and", "or",
    "inc", "dec", "ret", "shl", "shr",
    "imul", "movzx", "movsx", "ja", "jb",
    "jg", "jl", "jle", "jge", "jbe",
    "jae", "js", "jns", "neg", "not",
    "sbb", "adc", "rol", "ror", "xchg",
    "cdq", "leave", "sar", "mul", "div",
)

SHARED_OPCODES = ("nop", "int3")
OPCODES_PER_FAMILY = 5
OPCODE_WEIGHTS = (0.40, 0.25, 0.15, 0.12, 0.08)

OPERANDS = (
    "eax", "ebx", "ecx", "edx", "esi", "edi",
    "eax, ebx", "ecx, edx", "esi, edi", "eax, 1",
    "[ebp+8]", "[esp+4]", "[ebp-0Ch]", "0Ah", "401000h", "",
)


@dataclass(frozen=True)
class SyntheticSpec:
    families: int = FAMILY_COUNT
    samples_per_family: int = 60
    minority_family: int = 6
    minority_count: int = 6
    seed: int = 2015

    def count_for(self, family: int) -> int:
        return self.minority_count if family == self.minority_family else self.samples_per_family


@dataclass(frozen=True)
class FamilyProfile:
    symbols: tuple[int, ...]  # family byte alphabet, all multiples of 8, disjoint
    noisy_len: int
    calm_len: int
    noise_rate: float  # raw-byte rate inside noisy blocks, sets the entropy plateau
    vocab: tuple[str, ...]


def _symbol_sets() -> list[tuple[int, ...]]:
    """Disjoint aligned alphabets: family f gets 2 + (f-1) % 3 consecutive
    multiples of 8, packed left to right over the byte range."""
    sets = []
    slot = 0
    for f in range(1, FAMILY_COUNT + 1):
        size = 2 + (f - 1) % 3
        sets.append(tuple(8 * (slot + k) for k in range(size)))
        slot += size
    return sets


_SYMBOLS = _symbol_sets()


def family_profile(family: int) -> FamilyProfile:
    if not 1 <= family <= FAMILY_COUNT:
        raise ValueError(f"family {family} outside 1..{FAMILY_COUNT}")
    f = family
    return FamilyProfile(
        symbols=_SYMBOLS[f - 1],
        noisy_len=512 * ((f - 1) // 3 + 1),
        calm_len=512 * ((f - 1) % 3 + 1),
        noise_rate=(0.08, 0.25, 0.5)[(f - 1) % 3],
        vocab=OPCODE_POOL[(f - 1) * OPCODES_PER_FAMILY : f * OPCODES_PER_FAMILY],
    )


def _sample_rng(spec: SyntheticSpec, family: int, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, family, index])


def make_stream(family: int, rng: np.random.Generator) -> np.ndarray:
    """Byte values for one sample.

    Noisy blocks draw uniformly from the family alphabet with a family-rate
    sprinkle of raw bytes (entropy plateau height); calm blocks repeat one
    family symbol (entropy floor). Mild phase jitter and 1% global noise
    vary the waveform between samples without moving its family signature.
    """
    prof = family_profile(family)
    symbols = np.array(prof.symbols, dtype=np.uint8)
    target = 4096 + int(rng.integers(0, 2048))
    period = prof.noisy_len + prof.calm_len
    pieces = []
    length = 0
    noisy = True
    while length < target + period:
        if noisy:
            n = max(prof.noisy_len + int(rng.integers(-64, 65)), 32)
            block = symbols[rng.integers(0, symbols.size, size=n)]
            raw = rng.random(n) < prof.noise_rate
            block[raw] = rng.integers(0, 256, size=int(raw.sum()))
        else:
            n = max(prof.calm_len + int(rng.integers(-64, 65)), 32)
            block = np.full(n, symbols[rng.integers(0, symbols.size)], dtype=np.uint8)
        pieces.append(block)
        length += n
        noisy = not noisy
    values = np.roll(np.concatenate(pieces), int(rng.integers(0, period // 8 + 1)))[:target]
    noise_at = rng.random(target) < 0.01
    values[noise_at] = rng.integers(0, 256, size=int(noise_at.sum()))
    return values


def make_opcodes(family: int, rng: np.random.Generator) -> list[str]:
    prof = family_profile(family)
    count = 80 + int(rng.integers(0, 81))
    tokens = rng.choice(np.array(prof.vocab), size=count, p=np.array(OPCODE_WEIGHTS))
    out = []
    for tok in tokens:
        if rng.random() < 0.03:
            out.append(SHARED_OPCODES[int(rng.integers(0, len(SHARED_OPCODES)))])
        else:
            out.append(str(tok))
    return out


def bytes_text(values: np.ndarray, rng: np.random.Generator, base_address: int = 0x00401000) -> str:
    """Hex-dump text for a byte stream, with ~0.4% of tokens obscured as ``??``."""
    lines = []
    for off in range(0, values.size, BYTES_PER_LINE):
        chunk = values[off : off + BYTES_PER_LINE]
        tokens = [f"{int(v):02X}" for v in chunk]
        for i in range(len(tokens)):
            if rng.random() < 0.004:
                tokens[i] = "??"
        lines.append(f"{(base_address + off) & 0xFFFFFFFF:08X} " + " ".join(tokens))
    return "\n".join(lines) + "\n"


def asm_text(opcodes: list[str], rng: np.random.Generator, base_address: int = 0x00401000) -> str:
    """Disassembly-listing text: section-prefixed addresses, hex byte
    columns, mnemonics with operands, plus occasional data directives."""
    lines = [
        "; ---------------------------------------------------------------",
        "; Segment type: Pure code",
        "; ---------------------------------------------------------------",
    ]
    addr = base_address
    for op in opcodes:
        n_bytes = 1 + int(rng.integers(0, 3))
        cols = " ".join(f"{int(b):02X}" for b in rng.integers(0, 256, size=n_bytes))
        operand = OPERANDS[int(rng.integers(0, len(OPERANDS)))]
        lines.append(f".text:{addr:08X} {cols:<8} {op:<8} {operand}".rstrip())
        addr += n_bytes
        if rng.random() < 0.03:
            val = int(rng.integers(0, 256))
            lines.append(f".data:{addr:08X} {val:02X} db {val:02X}h")
            addr += 1
    return "\n".join(lines) + "\n"


def generate_corpus(root: str | Path, spec: SyntheticSpec = SyntheticSpec()):
    """Write <id>.bytes, <id>.asm, and manifest.csv under root.

    Returns (manifest_path, bytes_dir, asm_dir, family_names).
    """
    root = Path(root)
    bytes_dir = root / "bytes"
    asm_dir = root / "asm"
    bytes_dir.mkdir(parents=True, exist_ok=True)
    asm_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for family in range(1, spec.families + 1):
        for index in range(spec.count_for(family)):
            rng = _sample_rng(spec, family, index)
            sample_id = f"syn{family}n{index:03d}"
            stream = make_stream(family, rng)
            opcodes = make_opcodes(family, rng)
            (bytes_dir / f"{sample_id}.bytes").write_text(bytes_text(stream, rng), encoding="ascii")
            (asm_dir / f"{sample_id}.asm").write_text(asm_text(opcodes, rng), encoding="ascii")
            rows.append((sample_id, family))
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "family"])
        writer.writerows(rows)
    family_names = {f: f"SYN{f}" for f in range(1, spec.families + 1)}
    return manifest, bytes_dir, asm_dir, family_names
