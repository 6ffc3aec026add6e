import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Union

import chardet

PathLike = Union[str, Path]


def detect_encoding(file_path: PathLike) -> str:
    with open(file_path, "rb") as f:
        result = chardet.detect(f.read())
    return result["encoding"] or "utf-8"


def read_text(file_path: PathLike) -> str:
    """
    Read a text artifact, guessing its encoding.
    :param file_path: path of the file
    :return: file contents
    """
    if not os.path.isfile(file_path):
        raise FileNotFoundError(f"File not found: {file_path}")
    encoding = detect_encoding(file_path)
    # chardet reports ascii for pure-ascii input; utf-8 is a superset
    if encoding.lower() == "ascii":
        encoding = "utf-8"
    with open(file_path, "r", encoding=encoding) as file:
        return file.read()


def atomic_write_bytes(file_path: PathLike, payload: bytes) -> Path:
    """Write through a temporary sibling and rename over the destination."""
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(file_path: PathLike, text: str) -> Path:
    return atomic_write_bytes(file_path, text.encode("utf-8"))


def write_lines(file_path: PathLike, lines: Iterable[str]) -> Path:
    """LF-terminated UTF-8 lines."""
    return atomic_write_text(file_path, "".join(f"{line}\n" for line in lines))


def read_lines(file_path: PathLike) -> list:
    return read_text(file_path).splitlines()


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(file_path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def append_json_line(file_path: PathLike, record: dict) -> None:
    path = Path(file_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
