from .base import BaseLife, BasicBlock, LifeCycle, ParseOutputVo, RawInstruction, TokenSequence
from .core import ParserFactory, ProfileFactory
from .disasm_parser import DisassemblyParseError, DisassemblyParser, parse_disassembly, parse_instruction
