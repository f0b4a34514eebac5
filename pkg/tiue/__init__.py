from .tiue import TiUE

__all__ = [
    "TiUE",
]
