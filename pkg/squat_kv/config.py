"""Cache and run configuration."""

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .models import ReportFormat, RopeMode
from .quant import MAX_BITS, MIN_BITS
from .rope import DEFAULT_THETA_BASE


@dataclass(frozen=True)
class CacheConfig:
    """Quantization and cache-protocol parameters.

    Defaults follow the reference setup: 2-bit codes, groups of 32 tokens, a residual
    buffer of 32 tokens, g=64 channels per solver iteration, λ=0.001 and r=5.
    """
    bits: int = 2
    group_size: int = 32
    residual_len: int = 32
    block: int = 64
    lam: float = 0.001
    rank: int = 5
    mode: RopeMode = RopeMode.POST_ROPE
    theta_base: float = DEFAULT_THETA_BASE
    share_solver_state: bool = True
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", RopeMode(self.mode))
        self._validate()

    def _validate(self) -> None:
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.residual_len < 1:
            raise ValueError(f"residual_len must be >= 1, got {self.residual_len}")
        if self.residual_len % self.group_size:
            raise ValueError(
                f"residual_len (R={self.residual_len}) must be divisible by "
                f"group_size (G={self.group_size})"
            )
        if self.block < 1:
            raise ValueError(f"block (g) must be >= 1, got {self.block}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.rank < 1:
            raise ValueError(f"rank (r) must be >= 1, got {self.rank}")
        if self.theta_base <= 0:
            raise ValueError(f"theta_base must be > 0, got {self.theta_base}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def check_dim(self, dim: int) -> None:
        """Constraints that depend on the head dimension d."""
        if dim % self.block:
            raise ValueError(f"block (g={self.block}) must divide the head dimension (d={dim})")
        if dim % self.group_size:
            raise ValueError(
                f"group_size (G={self.group_size}) must divide the head dimension (d={dim}) "
                "for per-token value groups"
            )
        if self.rank > dim:
            raise ValueError(f"rank (r={self.rank}) must not exceed the head dimension (d={dim})")
        if self.mode == RopeMode.PRE_ROPE and dim % 2:
            raise ValueError(f"pre-rope mode needs an even head dimension, got d={dim}")

    @property
    def groups_per_flush(self) -> int:
        return self.residual_len // self.group_size

    def baseline(self) -> "CacheConfig":
        """Same cache, compression-only quantization (λ = 0)."""
        return replace(self, lam=0.0)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CacheConfig":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one CLI run."""
    cache: CacheConfig = field(default_factory=CacheConfig)
    trace_path: Optional[Path] = None
    out: Optional[Path] = None
    format: ReportFormat = ReportFormat.JSON
    use_rope: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "format", ReportFormat(self.format))
        if self.cache.mode == RopeMode.PRE_ROPE and not self.use_rope:
            raise ValueError("pre-rope mode only makes sense with rotary positions enabled (--rope)")

    @classmethod
    def from_args(cls, args) -> "RunConfig":
        """Build from an argparse namespace carrying the shared cache flags."""
        cache = CacheConfig(
            bits=args.bits,
            group_size=args.group_size,
            residual_len=args.residual,
            block=args.block,
            lam=0.0 if getattr(args, "baseline", False) else args.lam,
            rank=args.rank,
            mode=RopeMode(args.mode),
            workers=getattr(args, "workers", 1),
        )
        trace = getattr(args, "trace", None)
        out = getattr(args, "out", None)
        return cls(
            cache=cache,
            trace_path=Path(trace) if trace else None,
            out=Path(out) if out else None,
            format=ReportFormat(getattr(args, "format", "json")),
            use_rope=getattr(args, "rope", False),
        )
