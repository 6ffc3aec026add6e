import re
from pathlib import Path
from typing import List, Optional, Union

from loguru import logger

from binflow.parser.base import BaseLife, BasicBlock, ParseOutputVo, RawInstruction
from binflow.utils.io import read_text
from binflow.utils.isa_profiles import IsaProfile
from binflow.utils.lifecycle_types import LifeType

_BLOCK_HEADER = re.compile(r"^##\s+block\s+(\d+)\s*$")
_BINARY_HEADER = re.compile(r"^##\s+binary\s+(\S+)\s+(\S+)\s*$")
_OPCODE = re.compile(r"^[A-Za-z_][\w.]*$")
_OPERAND_SPLIT = re.compile(r"[,\s]+")


class DisassemblyParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def parse_instruction(line: str, line_no: int = 0) -> RawInstruction:
    """
    Split "opcode op1, op2, ..." into a RawInstruction; commas are dropped.
    """
    text = line.split(";", 1)[0].strip()
    if not text:
        raise DisassemblyParseError("empty instruction", line_no)
    parts = re.split(r"\s+", text, maxsplit=1)
    head, rest = parts[0], (parts[1] if len(parts) > 1 else "")
    if not _OPCODE.match(head):
        raise DisassemblyParseError(f"malformed opcode {head!r}", line_no)
    operands = [op for op in _OPERAND_SPLIT.split(rest.strip()) if op]
    return RawInstruction(opcode=head, operands=operands, source_line=line_no)


def parse_disassembly(text: str, profile: Optional[IsaProfile] = None, default_binary: str = "input") -> List[BasicBlock]:
    """
    Parse a block-delimited dump.

    "## binary <name> <isa>" opens a file scope, "## block <id>" opens a block,
    other non-empty lines are instructions. Lines starting with ";" are comments.

    :param text: dump contents
    :param profile: when given, binary headers must name the same ISA
    :param default_binary: binary name used before any binary header
    :return: non-empty blocks in input order
    """
    blocks: List[BasicBlock] = []
    binary = default_binary
    isa = profile.isa if profile else ""
    current: Optional[BasicBlock] = None

    def close(block: Optional[BasicBlock]):
        if block is None:
            return
        if block.instructions:
            blocks.append(block)
        else:
            logger.warning(f"Skipping empty block {block.block_id} of {block.binary}")

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith("##"):
            m = _BLOCK_HEADER.match(line)
            if m:
                close(current)
                current = BasicBlock(binary=binary, block_id=int(m.group(1)), instructions=[], isa=isa)
                continue
            m = _BINARY_HEADER.match(line)
            if m:
                close(current)
                current = None
                binary, header_isa = m.group(1), m.group(2).lower()
                if profile is not None and header_isa != profile.isa:
                    raise DisassemblyParseError(
                        f"binary {binary!r} declares ISA {header_isa!r}, expected {profile.isa!r}", line_no
                    )
                isa = header_isa
                continue
            raise DisassemblyParseError(f"unrecognized header {line!r}", line_no)
        if current is None:
            raise DisassemblyParseError("instruction outside of a block", line_no)
        try:
            current.instructions.append(parse_instruction(line, line_no))
        except DisassemblyParseError:
            raise
        except ValueError as e:
            raise DisassemblyParseError(str(e), line_no) from e
    close(current)
    return blocks


class DisassemblyParser(BaseLife):
    def __init__(self, file_path: Union[str, Path], profile: IsaProfile):
        super().__init__(isa=profile.isa)
        self.file_path = str(file_path)
        self.profile = profile

    def parse(self, file_path: Optional[str] = None) -> ParseOutputVo:
        file_path = str(file_path or self.file_path)
        lc_start = self.generate_lifecycle(
            source_file=file_path,
            isa=self.isa,
            usage_purpose="Disassembly",
            life_type=LifeType.DATA_PROCESSING,
        )
        try:
            text = read_text(file_path)
            blocks = parse_disassembly(text, self.profile, default_binary=Path(file_path).stem)
            output_vo = ParseOutputVo(source=file_path, blocks=blocks)
            output_vo.add_lifecycle(lc_start)
            output_vo.add_lifecycle(
                self.generate_lifecycle(
                    source_file=file_path,
                    isa=self.isa,
                    usage_purpose="Disassembly",
                    life_type=LifeType.DATA_PROCESSED,
                )
            )
            logger.info(f"Parsed {len(blocks)} blocks from {file_path}")
            return output_vo
        except Exception as e:
            logger.error(f"Failed to parse {file_path}: {e}")
            raise
