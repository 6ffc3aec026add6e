"""
Synthetic ISA pair with a ground-truth cross-assembler.

A ``NeutralProgram`` is a short list of abstract operations over virtual
registers. TOY-A renders it in a two-operand style; TOY-B uses three-operand
arithmetic, ``#`` immediates, bracketed base/offset pairs and a two-instruction
expansion for register addition. Rendered blocks go through the regular
normalizer, so both corpora share the placeholder vocabulary while their
mnemonics stay disjoint.

Every program draws from its own generator spawned from ``(seed, domain,
program id)``, which keeps generation pure per program.
"""

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from tqdm import tqdm

from binflow.config import ToyConfig
from binflow.parser.base import BasicBlock, RawInstruction, TokenSequence
from binflow.utils.io import atomic_write_text, write_lines
from binflow.utils.isa_profiles import PLACEHOLDERS, load_profile
from binflow.utils.normalizer import InstructionNormalizer

TOY_A = "toy-a"
TOY_B = "toy-b"
REGISTER_COUNT = 8
SYMBOLS = ("memcpy", "strlen", "printf", "malloc", "free", "open", "read", "write", "exit", "socket")

# corpus, held-out and detection programs come from separate id domains
DOMAIN_TRAIN = 0
DOMAIN_HELDOUT = 1
DOMAIN_DETECT = 2


class OpKind(str, Enum):
    MOVE = "move"
    MOVE_IMM = "move_imm"
    ADD = "add"
    ADD_IMM = "add_imm"
    LOAD = "load"
    STORE = "store"
    BRANCH = "branch"
    CALL = "call"
    ROTATE = "rotate"
    XOR = "xor"


BENIGN_KINDS = (
    OpKind.MOVE,
    OpKind.MOVE_IMM,
    OpKind.ADD,
    OpKind.ADD_IMM,
    OpKind.LOAD,
    OpKind.STORE,
    OpKind.BRANCH,
    OpKind.CALL,
)


@dataclass(frozen=True)
class NeutralOp:
    """
    One abstract operation.

    Registers are virtual indices; ``text`` holds an immediate, offset, label
    or symbol spelling (a literal, a dummy name or an already-normalized
    placeholder).
    """

    kind: OpKind
    dst: int = 0
    src: int = 0
    text: str = ""


@dataclass
class NeutralProgram:
    program_id: int
    ops: List[NeutralOp]
    planted: bool = False

    def __post_init__(self):
        if not self.ops:
            raise ValueError(f"Program {self.program_id} has no operations")


# rendering


def _imm_a(text: str) -> str:
    return text


def _imm_b(text: str) -> str:
    return text if text in PLACEHOLDERS else f"#{text}"


@dataclass(frozen=True)
class ToyIsaSpec:
    """Rendering templates and register map of one toy ISA."""

    isa: str
    register: Callable[[int], str]
    render_op: Callable[["ToyIsaSpec", NeutralOp], List[RawInstruction]]

    def render(self, program: NeutralProgram) -> BasicBlock:
        instructions: List[RawInstruction] = []
        for op in program.ops:
            instructions.extend(self.render_op(self, op))
        return BasicBlock(binary=f"prog{program.program_id}", block_id=program.program_id, instructions=instructions, isa=self.isa)


def _ins(opcode: str, *operands: str) -> RawInstruction:
    return RawInstruction(opcode=opcode, operands=list(operands))


def _render_a(spec: ToyIsaSpec, op: NeutralOp) -> List[RawInstruction]:
    r = spec.register
    if op.kind is OpKind.MOVE:
        return [_ins("mov", r(op.dst), r(op.src))]
    if op.kind is OpKind.MOVE_IMM:
        return [_ins("mov", r(op.dst), _imm_a(op.text))]
    if op.kind is OpKind.ADD:
        return [_ins("add", r(op.dst), r(op.src))]
    if op.kind is OpKind.ADD_IMM:
        return [_ins("add", r(op.dst), _imm_a(op.text))]
    if op.kind is OpKind.LOAD:
        return [_ins("ld", r(op.dst), f"[{r(op.src)}+{op.text}]")]
    if op.kind is OpKind.STORE:
        return [_ins("st", f"[{r(op.dst)}+{op.text}]", r(op.src))]
    if op.kind is OpKind.BRANCH:
        return [_ins("jmp", op.text)]
    if op.kind is OpKind.CALL:
        return [_ins("call", op.text)]
    if op.kind is OpKind.ROTATE:
        return [_ins("rol", r(op.dst), _imm_a(op.text))]
    return [_ins("xor", r(op.dst), r(op.src))]


def _render_b(spec: ToyIsaSpec, op: NeutralOp) -> List[RawInstruction]:
    r = spec.register
    if op.kind is OpKind.MOVE:
        return [_ins("MOV", r(op.dst), r(op.src))]
    if op.kind is OpKind.MOVE_IMM:
        return [_ins("MOV", r(op.dst), _imm_b(op.text))]
    if op.kind is OpKind.ADD:
        # x1 is the scratch register of the expansion
        return [_ins("MOV", "x1", r(op.src)), _ins("ADD", r(op.dst), r(op.dst), "x1")]
    if op.kind is OpKind.ADD_IMM:
        return [_ins("ADD", r(op.dst), r(op.dst), _imm_b(op.text))]
    if op.kind is OpKind.LOAD:
        return [_ins("LDR", r(op.dst), f"[{r(op.src)}", f"{_imm_b(op.text)}]")]
    if op.kind is OpKind.STORE:
        return [_ins("STR", r(op.src), f"[{r(op.dst)}", f"{_imm_b(op.text)}]")]
    if op.kind is OpKind.BRANCH:
        return [_ins("B", op.text)]
    if op.kind is OpKind.CALL:
        return [_ins("BL", op.text)]
    if op.kind is OpKind.ROTATE:
        return [_ins("ROR", r(op.dst), r(op.dst), _imm_b(op.text))]
    return [_ins("EOR", r(op.dst), r(op.dst), r(op.src))]


TOY_SPECS: Dict[str, ToyIsaSpec] = {
    TOY_A: ToyIsaSpec(TOY_A, lambda i: f"r{i}", _render_a),
    TOY_B: ToyIsaSpec(TOY_B, lambda i: f"x{i + 2}", _render_b),
}


def render(program: NeutralProgram, isa: str) -> BasicBlock:
    if isa not in TOY_SPECS:
        raise ValueError(f"Unknown toy ISA '{isa}', expected one of {sorted(TOY_SPECS)}")
    return TOY_SPECS[isa].render(program)


def render_tokens(program: NeutralProgram, isa: str, rules: Optional[str] = "C1") -> TokenSequence:
    """Render and normalize one program."""
    return _normalizer(isa, rules).normalize_block(render(program, isa))


_NORMALIZERS: Dict[Tuple[str, str], InstructionNormalizer] = {}


def _normalizer(isa: str, rules: Optional[str]) -> InstructionNormalizer:
    key = (isa, str(rules))
    if key not in _NORMALIZERS:
        _NORMALIZERS[key] = InstructionNormalizer(load_profile(isa), rules)
    return _NORMALIZERS[key]


# sampling


def program_rng(seed: int, domain: int, program_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(domain, program_id))))


def _literal(rng: np.random.Generator) -> str:
    value = int(rng.integers(0, 256))
    return f"0x{value:x}" if rng.random() < 0.5 else str(value)


def _sample_op(kind: OpKind, rng: np.random.Generator) -> NeutralOp:
    dst, src = (int(v) for v in rng.integers(0, REGISTER_COUNT, size=2))
    if kind in (OpKind.MOVE, OpKind.ADD, OpKind.XOR):
        return NeutralOp(kind, dst, src)
    if kind in (OpKind.MOVE_IMM, OpKind.ADD_IMM, OpKind.ROTATE):
        return NeutralOp(kind, dst, text=_literal(rng))
    if kind in (OpKind.LOAD, OpKind.STORE):
        return NeutralOp(kind, dst, src, text=str(4 * int(rng.integers(0, 16))))
    if kind is OpKind.BRANCH:
        return NeutralOp(kind, text=f"loc_{int(rng.integers(0x1000, 0x10000)):x}")
    return NeutralOp(kind, text=f"sym_{SYMBOLS[int(rng.integers(0, len(SYMBOLS)))]}")


def planted_pattern(rng: np.random.Generator) -> List[NeutralOp]:
    """The rare rotate-then-xor pair marking a "malicious" program."""
    reg, other = (int(v) for v in rng.integers(0, REGISTER_COUNT, size=2))
    return [NeutralOp(OpKind.ROTATE, reg, text=_literal(rng)), NeutralOp(OpKind.XOR, reg, other)]


def sample_program(
    program_id: int,
    rng: np.random.Generator,
    min_ops: int = 3,
    max_ops: int = 20,
    plant: bool = False,
) -> NeutralProgram:
    """
    Draw a program of ``min_ops..max_ops`` operations; a branch, when drawn,
    always ends the block. ``plant`` inserts the rotate/xor pair.
    """
    length = int(rng.integers(min_ops, max_ops + 1))
    body = length - 2 if plant else length
    ops: List[NeutralOp] = []
    for _ in range(max(body, 0)):
        kind = BENIGN_KINDS[int(rng.integers(0, len(BENIGN_KINDS)))]
        if kind is OpKind.BRANCH and len(ops) < body - 1:
            kind = OpKind.MOVE
        ops.append(_sample_op(kind, rng))
    if plant:
        at = int(rng.integers(0, len(ops) + 1))
        if ops and ops[-1].kind is OpKind.BRANCH:
            at = min(at, len(ops) - 1)
        ops[at:at] = planted_pattern(rng)
    return NeutralProgram(program_id=program_id, ops=ops, planted=plant)


# oracle


def _register_a(token: str) -> int:
    if len(token) >= 2 and token[0] == "r" and token[1:].isdigit() and int(token[1:]) < REGISTER_COUNT:
        return int(token[1:])
    raise ValueError(f"Not a TOY-A register: {token!r}")


def _is_register_a(token: str) -> bool:
    try:
        _register_a(token)
        return True
    except ValueError:
        return False


def _memory_a(token: str) -> Tuple[int, str]:
    if not (token.startswith("[") and token.endswith("]") and "+" in token):
        raise ValueError(f"Not a TOY-A memory operand: {token!r}")
    base, offset = token[1:-1].split("+", 1)
    return _register_a(base), offset


_ARITY_A = {"mov": 2, "add": 2, "ld": 2, "st": 2, "jmp": 1, "call": 1, "rol": 2, "xor": 2}


def parse_toy_a(tokens: Sequence[str]) -> NeutralProgram:
    """Read a (normalized or raw) TOY-A token stream back into a program."""
    ops: List[NeutralOp] = []
    i = 0
    while i < len(tokens):
        opcode = tokens[i]
        arity = _ARITY_A.get(opcode)
        if arity is None:
            raise ValueError(f"Unparseable TOY-A block at token {i}: {opcode!r}")
        args = list(tokens[i + 1:i + 1 + arity])
        if len(args) != arity:
            raise ValueError(f"Truncated TOY-A instruction {opcode!r}")
        i += 1 + arity
        if opcode in ("mov", "add"):
            dst = _register_a(args[0])
            if _is_register_a(args[1]):
                ops.append(NeutralOp(OpKind.MOVE if opcode == "mov" else OpKind.ADD, dst, _register_a(args[1])))
            else:
                ops.append(NeutralOp(OpKind.MOVE_IMM if opcode == "mov" else OpKind.ADD_IMM, dst, text=args[1]))
        elif opcode == "ld":
            base, offset = _memory_a(args[1])
            ops.append(NeutralOp(OpKind.LOAD, _register_a(args[0]), base, offset))
        elif opcode == "st":
            base, offset = _memory_a(args[0])
            ops.append(NeutralOp(OpKind.STORE, base, _register_a(args[1]), offset))
        elif opcode == "jmp":
            ops.append(NeutralOp(OpKind.BRANCH, text=args[0]))
        elif opcode == "call":
            ops.append(NeutralOp(OpKind.CALL, text=args[0]))
        elif opcode == "rol":
            ops.append(NeutralOp(OpKind.ROTATE, _register_a(args[0]), text=args[1]))
        else:
            ops.append(NeutralOp(OpKind.XOR, _register_a(args[0]), _register_a(args[1])))
    return NeutralProgram(program_id=0, ops=ops)


def oracle_translate(tokens: Sequence[str], rules: Optional[str] = "C1") -> List[str]:
    """
    Ground-truth TOY-A to TOY-B translation of a rendered block.

    Operand spellings pass through unchanged, so placeholders stay placeholders.
    :raises ValueError: the block is not a TOY-A rendering
    """
    program = parse_toy_a(tokens)
    return render_tokens(program, TOY_B, rules).tokens


# corpora


@dataclass
class ToyCorpus:
    """
    Nonparallel training blocks per ISA and held-out parallel pairs.

    ``train_ids`` keeps the program ids behind each ISA's split.
    """

    train: Dict[str, List[TokenSequence]] = field(default_factory=dict)
    train_ids: Dict[str, List[int]] = field(default_factory=dict)
    heldout: List[Tuple[TokenSequence, TokenSequence]] = field(default_factory=list)
    heldout_programs: List[NeutralProgram] = field(default_factory=list)


def gen_corpus(count: int, seed: int, config: Optional[ToyConfig] = None, rules: Optional[str] = "C1") -> ToyCorpus:
    """
    Generate ``count`` training programs per ISA plus ``config.heldout``
    parallel programs.

    The ``2 * count`` training ids are shuffled and split in halves, so the
    two training corpora never share a program.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    config = config or ToyConfig()
    order = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(DOMAIN_TRAIN,))).permutation(2 * count)
    splits = {TOY_A: sorted(int(i) for i in order[:count]), TOY_B: sorted(int(i) for i in order[count:])}

    corpus = ToyCorpus()
    for isa, ids in splits.items():
        corpus.train_ids[isa] = ids
        blocks = []
        for pid in tqdm(ids, desc=f"gen {isa}", unit="prog"):
            rng = program_rng(seed, DOMAIN_TRAIN, pid)
            plant = bool(rng.random() < config.pattern_rate)
            program = sample_program(pid, rng, config.min_ops, config.max_ops, plant)
            blocks.append(render_tokens(program, isa, rules))
        corpus.train[isa] = blocks

    for pid in range(config.heldout):
        rng = program_rng(seed, DOMAIN_HELDOUT, pid)
        plant = bool(rng.random() < config.pattern_rate)
        program = sample_program(pid, rng, config.min_ops, config.max_ops, plant)
        corpus.heldout_programs.append(program)
        corpus.heldout.append((render_tokens(program, TOY_A, rules), render_tokens(program, TOY_B, rules)))

    logger.info(
        f"Generated toy corpora: {count} programs per ISA, {len(corpus.heldout)} held-out pairs (seed {seed})"
    )
    return corpus


def render_dump(programs: Sequence[NeutralProgram], isa: str, binary: str = "heldout") -> str:
    """Disassembly-dump text of ``programs``, one block each, readable by the frontend parser."""
    lines = [f"## binary {binary} {isa}"]
    for program in programs:
        lines.append(f"## block {program.program_id}")
        for ins in render(program, isa).instructions:
            lines.append(f"{ins.opcode} {', '.join(ins.operands)}".rstrip())
    return "\n".join(lines) + "\n"


def write_toy_corpus(corpus: ToyCorpus, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """
    Write ``<isa>.train`` corpora, aligned ``heldout.<isa>`` references and
    a ``heldout.<isa>.dump`` disassembly per ISA.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}
    for isa, blocks in corpus.train.items():
        paths[f"{isa}.train"] = write_lines(out / f"{isa}.train", [b.text() for b in blocks])
    for side, isa in enumerate((TOY_A, TOY_B)):
        paths[f"heldout.{isa}"] = write_lines(out / f"heldout.{isa}", [pair[side].text() for pair in corpus.heldout])
        paths[f"heldout.{isa}.dump"] = atomic_write_text(
            out / f"heldout.{isa}.dump", render_dump(corpus.heldout_programs, isa)
        )
    return paths


# detection binaries


@dataclass
class ToyBinary:
    """A labeled multi-block sample; malicious binaries carry the planted pattern in one block."""

    sample_id: str
    label: int
    programs: List[NeutralProgram]

    def blocks(self, isa: str, rules: Optional[str] = "C1") -> List[TokenSequence]:
        return [render_tokens(p, isa, rules) for p in self.programs]


def gen_binaries(
    count: int,
    seed: int,
    config: Optional[ToyConfig] = None,
    offset: int = 0,
    prefix: str = "bin",
) -> List[ToyBinary]:
    """
    Labeled binaries of ``1..config.max_blocks`` programs each; a
    ``malicious_fraction`` share carries the planted pattern.

    :param offset: first binary index, so separate calls draw disjoint programs
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    config = config or ToyConfig()
    binaries = []
    for index in range(offset, offset + count):
        rng = program_rng(seed, DOMAIN_DETECT, index)
        label = int(rng.random() < config.malicious_fraction)
        size = int(rng.integers(1, config.max_blocks + 1))
        infected = int(rng.integers(0, size)) if label else -1
        programs = [
            sample_program(index * config.max_blocks + b, rng, config.min_ops, config.max_ops, plant=(b == infected))
            for b in range(size)
        ]
        binaries.append(ToyBinary(sample_id=f"{prefix}{index:06d}", label=label, programs=programs))
    return binaries
