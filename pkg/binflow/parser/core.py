import importlib
import os
from typing import Optional

from loguru import logger

from binflow.utils.isa_profiles import IsaProfile, load_profile


class ParserFactory:
    @staticmethod
    def create_parser(file_path: str, isa: str, profile_file: Optional[str] = None):
        """
        Create a parser instance based on the file extension.
        :param file_path: The path to the dump to be parsed.
        :param isa: ISA of the dump, selects the normalization profile.
        :param profile_file: Optional YAML file overriding the shipped ISA profiles.
        :return: A parser instance, or None when the extension is not a disassembly dump.
        """
        file_extension = os.path.splitext(file_path)[1].lower()
        parser_class_name = {
            ".asm": "DisassemblyParser",
            ".dis": "DisassemblyParser",
            ".dump": "DisassemblyParser",
            ".txt": "DisassemblyParser",
        }.get(file_extension)

        if not parser_class_name:
            logger.warning(f"No parser registered for extension {file_extension!r}")
            return None

        module = importlib.import_module("binflow.parser.disasm_parser")
        parser_class = getattr(module, parser_class_name)
        return parser_class(file_path=file_path, profile=ProfileFactory.create_profile(isa, profile_file))


class ProfileFactory:
    @staticmethod
    def create_profile(isa: str, profile_file: Optional[str] = None) -> IsaProfile:
        return load_profile(isa, profile_file)
