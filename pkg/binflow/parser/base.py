import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Tuple, Union

from binflow.utils.lifecycle_types import LifeType


class LifeCycle:
    """
    Life cycle record of one artifact-producing step
    """

    def __init__(self, update_time: str, life_type: list, life_metadata: Dict[str, str]):
        self.update_time = update_time
        self.life_type = life_type
        self.life_metadata = life_metadata

    def update(self, update_time: str, life_type: list, life_metadata: Dict[str, str]):
        self.update_time = update_time
        self.life_type = life_type
        self.life_metadata.update(life_metadata)

    def __str__(self):
        metadata_str = ", ".join(f"{k}: {v}" for k, v in self.life_metadata.items())
        return f"update_time: {self.update_time}, life_type: {self.life_type}, life_metadata: {{{metadata_str}}}"

    def to_dict(self):
        return {
            "update_time": self.update_time,
            "life_type": self.life_type,
            "life_metadata": self.life_metadata,
        }


@dataclass
class RawInstruction:
    """Opcode plus comma-free operand tokens, with the 1-based line it came from."""

    opcode: str
    operands: List[str]
    source_line: int = 0

    def __post_init__(self):
        if not self.opcode:
            raise ValueError("Instruction opcode must be non-empty")
        for op in self.operands:
            if not op or any(ch.isspace() or ch == "," for ch in op):
                raise ValueError(f"Malformed operand {op!r} at line {self.source_line}")


@dataclass
class BasicBlock:
    binary: str
    block_id: int
    instructions: List[RawInstruction]
    isa: str = ""


@dataclass
class TokenSequence:
    """A normalized basic block: the unit of translation."""

    isa: str
    tokens: List[str]
    origin: Tuple[str, int] = ("", 0)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"Empty token sequence for block {self.origin}")

    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class ParseOutputVo:
    """Parsed blocks of one dump plus its lifecycle trail."""

    source: str
    blocks: List[BasicBlock]
    lifecycle: List[LifeCycle] = field(default_factory=list)

    def add_lifecycle(self, lifecycle: LifeCycle):
        self.lifecycle.append(lifecycle)

    def to_dict(self):
        return {
            "source": self.source,
            "blocks": [
                {
                    "binary": b.binary,
                    "block_id": b.block_id,
                    "isa": b.isa,
                    "instructions": [[i.opcode, *i.operands] for i in b.instructions],
                }
                for b in self.blocks
            ],
            "lifecycle": [lc.to_dict() for lc in self.lifecycle],
        }


class BaseLife:
    def __init__(self, *, isa: str = "", **kwargs):
        self.isa = isa
        super_init = getattr(super(), "__init__", None)
        if callable(super_init):
            super_init(**kwargs)

    @staticmethod
    def generate_lifecycle(
        source_file: str,
        isa: str,
        life_type: Union[LifeType, str, List[Union[LifeType, str]]],
        usage_purpose: str,
    ) -> LifeCycle:
        """
        Build a LifeCycle record; ``life_type`` may be a single enum/string or a list of them.
        """
        raw = list(life_type) if isinstance(life_type, (list, tuple)) else [life_type]
        life_list: List[str] = [lt.value if isinstance(lt, LifeType) else lt for lt in raw]

        update_time = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        try:
            storage = os.path.getsize(source_file)
        except (OSError, TypeError):
            storage = 0
        life_metadata = {
            "storage_size": storage,
            "source_file": str(source_file),
            "isa": isa,
            "usage_purpose": usage_purpose,
        }
        return LifeCycle(update_time, life_list, life_metadata)

    @staticmethod
    def get_file_extension(file_path):
        return Path(file_path).suffix[1:].lower()
