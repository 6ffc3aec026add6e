from .pipeline import BinFlow
