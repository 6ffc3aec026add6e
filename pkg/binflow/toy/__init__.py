from binflow.toy.generator import (
    TOY_A,
    TOY_B,
    TOY_SPECS,
    NeutralOp,
    NeutralProgram,
    OpKind,
    ToyBinary,
    ToyCorpus,
    ToyIsaSpec,
    gen_binaries,
    gen_corpus,
    oracle_translate,
    render,
    render_tokens,
    sample_program,
    write_toy_corpus,
)

__all__ = [
    "NeutralOp",
    "NeutralProgram",
    "OpKind",
    "TOY_A",
    "TOY_B",
    "TOY_SPECS",
    "ToyBinary",
    "ToyCorpus",
    "ToyIsaSpec",
    "gen_binaries",
    "gen_corpus",
    "oracle_translate",
    "render",
    "render_tokens",
    "sample_program",
    "write_toy_corpus",
]
