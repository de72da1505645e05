"""Deterministic per-game train/val/test splitting.

Per game, the configured train fraction (rounded half-up) of its frames forms
the train portion; a fixed share of that portion is carved out as validation
and the remainder of the game's frames is the test set.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .types import DatasetManifest, SplitConfig


class SplitError(Exception):
    pass


@dataclass
class SplitResult:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test}

    @staticmethod
    def from_json(obj: dict) -> "SplitResult":
        return SplitResult(
            train=[str(x) for x in obj["train"]],
            val=[str(x) for x in obj["val"]],
            test=[str(x) for x in obj["test"]],
        )


def round_half_up(value: float) -> int:
    return int(Decimal(repr(value)).quantize(Decimal("1"), rounding=ROUND_HALF_UP))


def _game_rng(seed: int, game: str) -> np.random.Generator:
    # hash(game) is salted per process; use a stable digest instead
    digest = hashlib.sha256(game.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")]))


def split(manifest: DatasetManifest, cfg: SplitConfig) -> SplitResult:
    """Partition frame ids into disjoint train/val/test lists, per game.

    Identical (manifest, cfg) inputs produce identical output lists.
    """
    bad = cfg.violations()
    if bad:
        raise SplitError("; ".join(bad))
    result = SplitResult()
    for game in manifest.games():
        if game not in cfg.train_fraction:
            raise SplitError(f"no train fraction configured for game {game!r}")
        ids = sorted(f.frame_id for f in manifest.frames_for_game(game))
        rng = _game_rng(cfg.seed, game)
        perm = rng.permutation(len(ids))
        shuffled = [ids[i] for i in perm]
        n_portion = round_half_up(len(ids) * cfg.train_fraction[game])
        n_val = round_half_up(n_portion * cfg.val_fraction)
        result.train.extend(shuffled[: n_portion - n_val])
        result.val.extend(shuffled[n_portion - n_val : n_portion])
        result.test.extend(shuffled[n_portion:])
    return result
