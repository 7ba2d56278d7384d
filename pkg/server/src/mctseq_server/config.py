"""Server configuration: scaled-down transformer dimensions by default."""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ServerConfig:
    embed_dim: int = 32
    heads: int = 2
    layers: int = 2
    ffn_dim: int = 64
    dropout: float = 0.2
    encoder_mode: str = "shared"  # or "disjoint": separate towers per head
    learning_rate: float = 1e-4  # Adam; the train message's lr field is advisory
    seed: int = 0
    max_positions: int = 64

    def __post_init__(self):
        if self.embed_dim < 1 or self.layers < 1 or self.ffn_dim < 1:
            raise ValueError("dimensions must be positive")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ValueError(f"heads ({self.heads}) must divide embed_dim ({self.embed_dim})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout outside [0,1): {self.dropout}")
        if self.encoder_mode not in ("shared", "disjoint"):
            raise ValueError(f"unknown encoder_mode: {self.encoder_mode}")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.max_positions < 4:
            raise ValueError("max_positions too small")
