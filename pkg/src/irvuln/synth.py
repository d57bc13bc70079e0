"""Deterministic generator of IR-shaped corpora with planted taint motifs.

Vulnerable programs contain one line that reads from a taint source into a
virtual register and, on later lines, sinks that reference the register;
the sink lines are the vulnerable lines. Clean programs may contain a
source-only or sink-only decoy, never a linked source+sink pair, so
whole-code detection requires combining evidence across lines.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Program
from .errors import DataError
from .vocab import tokenize

SOURCE_OP = "src_read"
SINK_OP = "sink_write"

_OPCODES = ["add", "sub", "mul", "and", "or", "xor", "shl", "lshr",
            "icmp", "load"]


@dataclass
class SynthConfig:
    program_count: int = 2000
    vulnerable_fraction: float = 0.3
    lines_min: int = 8
    lines_max: int = 60
    token_pool_size: int = 400
    motif_span: int = 3
    seed: int = 0
    with_user_functions: bool = False

    def __post_init__(self):
        if self.program_count <= 0:
            raise DataError("program_count must be positive")
        if not (0.0 < self.vulnerable_fraction < 1.0):
            raise DataError("vulnerable_fraction must be in (0,1)")
        if not (1 <= self.lines_min <= self.lines_max):
            raise DataError("invalid lines range")
        if self.lines_max >= 265:
            raise DataError("lines_max must be below 265")
        if self.token_pool_size < 1:
            raise DataError("token_pool_size must be positive")
        if self.motif_span < 1:
            raise DataError("motif_span must be at least 1")
        if self.motif_span > self.lines_min:
            raise DataError("motif_span exceeds the minimum program length")


def _pool_token(rng, config) -> str:
    return f"v{rng.integers(config.token_pool_size):03d}"


def _plain_line(rng, config, t: int) -> str:
    op = _OPCODES[rng.integers(len(_OPCODES))]
    if t > 0 and rng.random() < 0.5:
        a = f"%{rng.integers(t)}"
    else:
        a = _pool_token(rng, config)
    b = _pool_token(rng, config)
    return f"%{t} = {op} i32 {a}, {b}"


def _source_line(rng, config, t: int) -> str:
    return f"%{t} = {SOURCE_OP} i32* {_pool_token(rng, config)}"


def _sink_line(rng, config, reg: int) -> str:
    return f"{SINK_OP} i32 %{reg}, {_pool_token(rng, config)}"


def _generate_program(rng, config: SynthConfig, pid: str,
                      vulnerable: bool) -> Program:
    length = int(rng.integers(config.lines_min, config.lines_max + 1))
    lines = [_plain_line(rng, config, t) for t in range(length)]
    vuln_idx = []
    if vulnerable:
        n_sinks = config.motif_span - 1
        if n_sinks == 0:
            # single-line motif: source and sink collapsed onto one line
            src = int(rng.integers(length))
            lines[src] = (f"%{src} = {SOURCE_OP} {SINK_OP} "
                          f"{_pool_token(rng, config)}")
            vuln_idx = [src]
        else:
            src = int(rng.integers(length - n_sinks))
            lines[src] = _source_line(rng, config, src)
            later = np.arange(src + 1, length)
            picks = rng.choice(later.size, size=n_sinks, replace=False)
            vuln_idx = sorted(int(later[j]) for j in picks)
            for t in vuln_idx:
                lines[t] = _sink_line(rng, config, src)
    else:
        decoy = rng.random()
        if decoy < 1.0 / 3.0:
            t = int(rng.integers(length))
            lines[t] = _source_line(rng, config, t)
        elif decoy < 2.0 / 3.0:
            t = int(rng.integers(1, length)) if length > 1 else 0
            reg = int(rng.integers(t)) if t > 0 else 0
            lines[t] = _sink_line(rng, config, reg)
    label = 1 if vulnerable else 0
    if config.with_user_functions and rng.random() < 0.5:
        at = int(rng.integers(length + 1))
        fn = int(rng.integers(100))
        lines[at:at] = [f"%c = call void @fn{fn}()",
                        f"define void @fn{fn}() {{"]
        vuln_idx = [t + 2 if t >= at else t for t in vuln_idx]
    return Program(pid, lines, label, tuple(vuln_idx))


def generate_corpus(config: SynthConfig) -> Corpus:
    """Deterministic in the seed; exactly
    round(program_count * vulnerable_fraction) programs are vulnerable."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(config.seed)))
    n_vuln = int(round(config.program_count * config.vulnerable_fraction))
    flags = np.zeros(config.program_count, dtype=bool)
    flags[rng.choice(config.program_count, size=n_vuln, replace=False)] = True
    width = len(str(config.program_count - 1))
    programs = [
        _generate_program(rng, config, f"p{idx:0{width}d}", bool(flags[idx]))
        for idx in range(config.program_count)
    ]
    return Corpus(programs, provenance=f"synth(seed={config.seed})")


def rule_based_labels(program: Program):
    """Token-scan oracle: registers written by a source line, sinks that
    reference one of them. Returns (label, vulnerable line indices)."""
    tainted = set()
    vuln = []
    for t, line in enumerate(program.lines):
        toks = tokenize(line)
        if SOURCE_OP in toks and SINK_OP in toks:
            vuln.append(t)
            continue
        if toks and toks[0] == SINK_OP:
            regs = {tok.rstrip(",") for tok in toks if tok.startswith("%")}
            if regs & tainted:
                vuln.append(t)
        if SOURCE_OP in toks and toks[0].startswith("%"):
            tainted.add(toks[0])
    return (1 if vuln else 0), vuln
