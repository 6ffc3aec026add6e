from .bleu import BleuReport, bleu
from .embeddings import export_embeddings, opcode_symbols, read_embeddings, write_embeddings
from .translate import BinaryTranslation, demonstration_table, translate_binary, translate_block

__all__ = [
    "BinaryTranslation",
    "BleuReport",
    "bleu",
    "demonstration_table",
    "export_embeddings",
    "opcode_symbols",
    "read_embeddings",
    "translate_binary",
    "translate_block",
    "write_embeddings",
]
