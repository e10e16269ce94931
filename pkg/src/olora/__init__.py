"""Orthogonal low-rank continual adaptation (O-LoRA / O-AdaLoRA) on a toy transformer."""

from olora.errors import ConfigError, DimensionError, NumericError, ProtocolError, RankError, StateError

__version__ = "0.1.0"
