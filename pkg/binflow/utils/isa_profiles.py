import re
from functools import lru_cache
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Pattern, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

PLACEHOLDERS: Tuple[str, ...] = (
    "<FUNC>",
    "<VALUE>",
    "<HEX>",
    "<LOC>",
    "<OFF>",
    "<SEG>",
    "<VAR>",
    "<STR>",
    "<TAG>",
    "<ADDR>",
)

DEFAULT_PROFILE_FILE = Path(__file__).with_name("isa_profiles.yaml")

_RANGE = re.compile(r"^(.*)\{(\d+)\.\.(\d+)\}(.*)$")


def expand_names(names: List[str]) -> List[str]:
    """Expand ``r{0..3}`` style entries into r0, r1, r2, r3."""
    expanded = []
    for name in names:
        m = _RANGE.match(str(name))
        if m:
            head, lo, hi, tail = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
            expanded.extend(f"{head}{i}{tail}" for i in range(lo, hi + 1))
        else:
            expanded.append(str(name))
    return expanded


class LiteralPattern(BaseModel):
    pattern: str
    placeholder: str

    @field_validator("placeholder")
    @classmethod
    def _known_placeholder(cls, v: str) -> str:
        if v not in PLACEHOLDERS:
            raise ValueError(f"Unknown placeholder {v!r}")
        return v

    @field_validator("pattern")
    @classmethod
    def _compiles(cls, v: str) -> str:
        re.compile(v)
        return v


class IsaProfile(BaseModel):
    """
    Per-ISA syntax knowledge used by normalization.

    :param isa: identifier such as ``x86-64`` or ``arm32``
    :param registers: register names (compared case-insensitively)
    :param call_opcodes: opcodes whose symbolic operands are function names
    :param dummy_prefixes: disassembler dummy-name prefix -> placeholder
    :param literal_patterns: ordered regexes for numeric and hexadecimal literals
    """

    model_config = ConfigDict(frozen=True)

    isa: str
    registers: FrozenSet[str] = Field(default_factory=frozenset)
    pc_registers: FrozenSet[str] = Field(default_factory=frozenset)
    call_opcodes: FrozenSet[str] = Field(default_factory=frozenset)
    branch_opcodes: FrozenSet[str] = Field(default_factory=frozenset)
    mnemonics: FrozenSet[str] = Field(default_factory=frozenset)
    keywords: FrozenSet[str] = Field(default_factory=frozenset)
    dummy_prefixes: Dict[str, str] = Field(default_factory=dict)
    literal_patterns: List[LiteralPattern] = Field(default_factory=list)

    @field_validator("registers", "pc_registers", "call_opcodes", "branch_opcodes", "mnemonics", "keywords", mode="before")
    @classmethod
    def _lowercase_names(cls, v):
        return frozenset(n.lower() for n in expand_names(list(v or [])))

    @field_validator("dummy_prefixes")
    @classmethod
    def _prefix_placeholders(cls, v: Dict[str, str]) -> Dict[str, str]:
        for prefix, placeholder in v.items():
            if not prefix:
                raise ValueError("Empty dummy prefix")
            if placeholder not in PLACEHOLDERS:
                raise ValueError(f"Prefix {prefix!r} maps to unknown placeholder {placeholder!r}")
        return v

    def compiled_literals(self) -> List[Tuple[Pattern, str]]:
        return _compile(tuple((p.pattern, p.placeholder) for p in self.literal_patterns))

    def is_register(self, token: str) -> bool:
        return token.lower() in self.registers

    def is_call(self, opcode: str) -> bool:
        return opcode.lower() in self.call_opcodes

    def is_keyword(self, token: str) -> bool:
        return token.lower() in self.keywords


@lru_cache(maxsize=64)
def _compile(patterns: Tuple[Tuple[str, str], ...]) -> List[Tuple[Pattern, str]]:
    return [(re.compile(p), placeholder) for p, placeholder in patterns]


@lru_cache(maxsize=8)
def _load_file(path: str) -> Dict[str, IsaProfile]:
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    profiles = raw.get("profiles")
    if not isinstance(profiles, dict):
        raise ValueError(f"No 'profiles' mapping in {path}")
    return {isa: IsaProfile(isa=isa, **body) for isa, body in profiles.items()}


def available_isas(profile_file: Optional[str] = None) -> List[str]:
    return sorted(_load_file(str(profile_file or DEFAULT_PROFILE_FILE)))


def load_profile(isa: str, profile_file: Optional[str] = None) -> IsaProfile:
    """
    Look up an ISA profile in the shipped (or a user-supplied) YAML file.
    :param isa: ISA identifier, case-insensitive
    """
    profiles = _load_file(str(profile_file or DEFAULT_PROFILE_FILE))
    key = isa.lower()
    if key not in profiles:
        raise ValueError(f"Unknown ISA '{isa}', expected one of {sorted(profiles)}")
    return profiles[key]
