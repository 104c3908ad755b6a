"""Run configuration shared by training commands and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass
class RunConfig:
    """Model sizes and training knobs at desk scale.

    d_v is the region feature width, d_e the text code width, d_emb the
    word embedding width, d_h the caption decoder width, d_a the
    attention scorer width. The learning rate decays by lr_decay every
    lr_decay_every epochs, computed from the epoch number so resumed runs
    see the same schedule.
    """
    d_v: int = 32
    d_e: int = 64
    d_emb: int = 64
    d_h: int = 64
    d_a: int = 32
    max_len: int = 20
    epochs: int = 200
    batch_size: int = 16
    lr: float = 5e-4
    lr_decay: float = 0.8
    lr_decay_every: int = 50
    clip_norm: float = 5.0
    seed: int = 0
    attention: bool = True
    modality_loss: str = "mse"
    use_mtm: bool = True
    early_stop_token_acc: float | None = None

    def validate(self) -> None:
        """Reject impossible sizes and rates before any model memory is
        allocated; raises ValueError naming the offending field."""
        for name in ("d_v", "d_e", "d_emb", "d_h", "d_a", "max_len",
                     "epochs", "batch_size", "lr_decay_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.lr > 0.0:
            raise ValueError(f"lr must be positive, got {self.lr!r}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must be in (0, 1], got {self.lr_decay!r}")
        if self.clip_norm is not None and not self.clip_norm > 0.0:
            raise ValueError(f"clip_norm must be positive or None, got {self.clip_norm!r}")
        if self.seed < 0:
            raise ValueError(f"seed must be nonnegative, got {self.seed!r}")
        if self.modality_loss not in ("mse", "mae", "cos", "kld", "mmd"):
            raise ValueError(f"unknown modality_loss {self.modality_loss!r}")
        if self.early_stop_token_acc is not None and not 0.0 < self.early_stop_token_acc <= 1.0:
            raise ValueError(
                f"early_stop_token_acc must be in (0, 1], got {self.early_stop_token_acc!r}")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})
