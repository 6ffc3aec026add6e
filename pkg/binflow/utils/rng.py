import zlib
from typing import Dict, Optional

import numpy as np

STREAM_NAMES = ("corpus", "model-init", "masking", "noise", "batch", "dropout", "detector")


class NamedStreams:
    """
    Independent random generators derived from one root seed.

    Each name maps to its own ``SeedSequence`` child, so drawing from one stream
    never shifts another. States can be exported and restored for resumption.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            key = zlib.crc32(name.encode("utf-8"))
            sequence = np.random.SeedSequence(self.seed, spawn_key=(key,))
            self._streams[name] = np.random.Generator(np.random.PCG64(sequence))
        return self._streams[name]

    __getitem__ = get

    def state_dict(self) -> Dict[str, dict]:
        return {name: gen.bit_generator.state for name, gen in self._streams.items()}

    def load_state_dict(self, states: Optional[Dict[str, dict]]) -> None:
        for name, state in (states or {}).items():
            self.get(name).bit_generator.state = state
