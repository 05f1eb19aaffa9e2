"""Decoder-block model configuration and named presets.

Preset dimensions come from the public Pythia model family configs
(EleutherAI); `tiny` is a deliberately small config for fixtures and tests.
"""

import math
from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    hidden: int
    n_heads: int
    d_head: int
    n_layers: int
    d_mlp: int
    rotary_pct: float
    vocab: int
    ln_eps: float = 1e-5
    theta_base: float = 10000.0
    parallel_residual: bool = True

    def __post_init__(self):
        if self.hidden != self.n_heads * self.d_head:
            raise ValueError(
                f"hidden ({self.hidden}) must equal n_heads * d_head "
                f"({self.n_heads} * {self.d_head})"
            )
        for name in ("hidden", "n_heads", "d_head", "n_layers", "d_mlp", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.rotary_pct <= 1.0:
            raise ValueError("rotary_pct must be in (0, 1]")
        if self.ln_eps <= 0.0:
            raise ValueError("ln_eps must be positive")
        rd = self.rotary_dims
        if rd < 2 or rd % 2:
            raise ValueError(
                f"rotary_dims = floor(rotary_pct * d_head) = {rd} "
                "must be an even number >= 2"
            )

    @property
    def rotary_dims(self) -> int:
        return math.floor(self.rotary_pct * self.d_head)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


PRESETS: dict[str, ModelConfig] = {
    "pythia-2.8b": ModelConfig(
        hidden=2560, n_heads=32, d_head=80, n_layers=32, d_mlp=10240,
        rotary_pct=0.25, vocab=50304,
    ),
    "pythia-6.9b": ModelConfig(
        hidden=4096, n_heads=32, d_head=128, n_layers=32, d_mlp=16384,
        rotary_pct=0.25, vocab=50432,
    ),
    # Small enough that golden fixtures are readable and fast.
    "tiny": ModelConfig(
        hidden=8, n_heads=2, d_head=4, n_layers=2, d_mlp=16,
        rotary_pct=0.5, vocab=11,
    ),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(PRESETS))
        raise KeyError(f"unknown preset {name!r} (known: {known})") from None
