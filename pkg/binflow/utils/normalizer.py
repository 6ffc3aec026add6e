import re
from typing import FrozenSet, Iterable, List, Union

from binflow.parser.base import BasicBlock, RawInstruction, TokenSequence
from binflow.utils.isa_profiles import PLACEHOLDERS, IsaProfile

ALL_RULES: FrozenSet[str] = frozenset({"R1", "R2", "R3"})

# Rule-subset presets: all rules, then one rule removed at a time, then none.
RULE_CASES = {
    "C1": ALL_RULES,
    "C2": frozenset({"R2", "R3"}),
    "C3": frozenset({"R1", "R3"}),
    "C4": frozenset({"R1", "R2"}),
    "C5": frozenset(),
}

DELIMITERS = frozenset("[]+-*(),:!{}")
_SPLIT = re.compile(r"([\[\]+\-*(),:!{}])")
_PLACEHOLDER_SET = frozenset(PLACEHOLDERS)


def parse_rules(rules: Union[str, Iterable[str], None]) -> FrozenSet[str]:
    """
    Accept a case name (C1..C5), a comma list ("R1,R3"), an iterable, or None for all rules.
    """
    if rules is None:
        return ALL_RULES
    if isinstance(rules, str):
        text = rules.strip().upper()
        if text in RULE_CASES:
            return RULE_CASES[text]
        if text in ("", "NONE"):
            return frozenset()
        rules = [r.strip() for r in text.split(",") if r.strip()]
    chosen = frozenset(r.upper() for r in rules)
    unknown = chosen - ALL_RULES
    if unknown:
        raise ValueError(f"Unknown normalization rules {sorted(unknown)}, expected a subset of R1,R2,R3")
    return chosen


class InstructionNormalizer:
    """
    Rewrites operands of raw instructions into the placeholder vocabulary.

    Operands are split into sub-tokens at structural punctuation; every
    sub-token is owned by exactly one classification:
    placeholder and register and keyword tokens are kept, dummy-prefixed names
    and leftover symbols belong to R1, literals to R3, and symbols in call
    position to R2. A disabled rule leaves the sub-tokens it owns verbatim.
    """

    def __init__(self, profile: IsaProfile, rules: Union[str, Iterable[str], None] = None):
        self.profile = profile
        self.rules = parse_rules(rules)
        self._literals = profile.compiled_literals()
        # longest prefix first so "locret_" never loses to a shorter match
        self._prefixes = sorted(profile.dummy_prefixes.items(), key=lambda kv: -len(kv[0]))

    def _is_call_context(self, ins: RawInstruction) -> bool:
        if self.profile.is_call(ins.opcode):
            return True
        return bool(ins.operands) and ins.operands[0].lower() in self.profile.pc_registers

    def classify(self, piece: str, call_context: bool) -> str:
        if piece in _PLACEHOLDER_SET:
            return piece
        if self.profile.is_register(piece) or self.profile.is_keyword(piece):
            return piece

        for prefix, placeholder in self._prefixes:
            if piece.startswith(prefix) and len(piece) > len(prefix):
                return placeholder if "R1" in self.rules else piece

        for pattern, placeholder in self._literals:
            if pattern.fullmatch(piece):
                return placeholder if "R3" in self.rules else piece

        if call_context:
            return "<FUNC>" if "R2" in self.rules else piece

        return "<TAG>" if "R1" in self.rules else piece

    def normalize_operand(self, operand: str, call_context: bool = False) -> str:
        pieces = [p for p in _SPLIT.split(operand) if p]
        return "".join(p if p in DELIMITERS else self.classify(p, call_context) for p in pieces)

    def normalize_instruction(self, ins: RawInstruction) -> List[str]:
        call_context = self._is_call_context(ins)
        return [ins.opcode] + [self.normalize_operand(op, call_context) for op in ins.operands]

    def normalize_block(self, block: BasicBlock) -> TokenSequence:
        tokens: List[str] = []
        for ins in block.instructions:
            tokens.extend(self.normalize_instruction(ins))
        return TokenSequence(isa=block.isa or self.profile.isa, tokens=tokens, origin=(block.binary, block.block_id))


def normalize_instruction(
    ins: RawInstruction, profile: IsaProfile, rules: Union[str, Iterable[str], None] = None
) -> List[str]:
    return InstructionNormalizer(profile, rules).normalize_instruction(ins)


def normalize_blocks(
    blocks: List[BasicBlock], profile: IsaProfile, rules: Union[str, Iterable[str], None] = None
) -> List[TokenSequence]:
    normalizer = InstructionNormalizer(profile, rules)
    return [normalizer.normalize_block(b) for b in blocks]


def structural_tokens(token: str) -> List[str]:
    """Split a normalized operand token into its sub-tokens (used by totality checks)."""
    return [p for p in _SPLIT.split(token) if p]
