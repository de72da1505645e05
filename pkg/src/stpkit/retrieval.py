"""Retrieval-augmented late fusion: offline feature bank, max-cosine queries,
and alpha-weighted fusion with the selector scores.

The bank is write-once. Core titles contribute their top-K entries ranked by
a quality score (L2 norm of the embedding plus half its component standard
deviation); support titles contribute every entry. Queries are exhaustive
scans; banks are small enough that this is the contract, not a fallback.
Fusion touches no model parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

EMBEDDING_DIM = 512
DEFAULT_TOP_K = 100
DEFAULT_ALPHA = 0.8
NORMALIZE_MODES = ("softmax", "raw")

BANK_MAGIC = b"STPBANK1\n"


class RetrievalError(Exception):
    pass


def quality_score(embedding: np.ndarray) -> float:
    """L2 norm plus 0.5 x the population std over the embedding components."""
    emb = np.asarray(embedding, dtype=np.float64)
    return float(np.linalg.norm(emb) + 0.5 * np.std(emb))


@dataclass(frozen=True)
class BankEntry:
    embedding: np.ndarray  # float32, EMBEDDING_DIM
    label: str  # "stp" | "mstp"
    source_game: str
    quality: float
    frame_id: str
    ann_index: int


@dataclass
class FeatureBank:
    entries: list[BankEntry] = field(default_factory=list)
    embedder_checksum: str = ""
    recipe: dict = field(default_factory=dict)
    _matrix: np.ndarray | None = None
    _norms: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([e.embedding for e in self.entries]).astype(np.float32)
            self._norms = np.linalg.norm(self._matrix, axis=1)
        return self._matrix

    def counts_per_title(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.source_game] = counts.get(e.source_game, 0) + 1
        return counts


RegionEmbedder = Callable[[np.ndarray], np.ndarray]  # 224x224x3 crop -> 512 vector


def collect_regions(
    manifest,
    manifest_path: str | Path,
    frame_ids: Sequence[str],
    embedder: RegionEmbedder,
    load_image=None,
    crop=None,
) -> list[BankEntry]:
    """Embed every annotated region of the listed frames, in deterministic
    (frame_id, annotation index) order."""
    from .dataset import imaging, manifest as manifest_io

    load_image = load_image or imaging.load_image
    crop = crop or imaging.crop_local
    by_id = manifest.by_id()
    entries = []
    for frame_id in sorted(frame_ids):
        frame = by_id[frame_id]
        image = load_image(manifest_io.image_path(manifest_path, frame.image_path))
        for ai, ann in enumerate(frame.annotations):
            emb = np.asarray(embedder(crop(image, ann.box)), dtype=np.float32)
            if emb.shape != (EMBEDDING_DIM,):
                raise RetrievalError(f"embedder returned shape {emb.shape}, want ({EMBEDDING_DIM},)")
            entries.append(BankEntry(
                embedding=emb,
                label="mstp" if ann.is_mstp else "stp",
                source_game=frame.game,
                quality=quality_score(emb),
                frame_id=frame_id,
                ann_index=ai,
            ))
    return entries


def build_bank(
    regions_by_title: dict[str, list[BankEntry]],
    core_titles: Sequence[str],
    support_titles: Sequence[str] = (),
    k: int = DEFAULT_TOP_K,
    embedder_checksum: str = "",
) -> FeatureBank:
    """Top-K-by-quality entries per core title plus every support-title entry.

    Quality ties break deterministically by (frame_id, annotation index).
    """
    if k <= 0:
        raise RetrievalError(f"top-K must be positive, got {k}")
    entries: list[BankEntry] = []
    for title in core_titles:
        pool = regions_by_title.get(title, [])
        if not pool:
            raise RetrievalError(f"core title {title!r} has no regions")
        ranked = sorted(pool, key=lambda e: (-e.quality, e.frame_id, e.ann_index))
        entries.extend(ranked[:k])
    for title in support_titles:
        entries.extend(regions_by_title.get(title, []))
    return FeatureBank(
        entries=entries,
        embedder_checksum=embedder_checksum,
        recipe={
            "core_titles": list(core_titles),
            "support_titles": list(support_titles),
            "top_k": k,
        },
    )


def query(bank: FeatureBank, probe: np.ndarray) -> float:
    """Maximum cosine similarity of the probe against every bank entry.

    A zero probe is defined to score 0 so degenerate crops don't break
    inference.
    """
    if len(bank) == 0:
        raise RetrievalError("bank is empty")
    probe = np.asarray(probe, dtype=np.float32)
    matrix = bank.matrix()
    if probe.shape != (matrix.shape[1],):
        raise RetrievalError(f"probe shape {probe.shape} != bank dimension {matrix.shape[1]}")
    pnorm = float(np.linalg.norm(probe))
    if pnorm == 0.0:
        return 0.0
    norms = bank._norms
    sims = matrix @ probe
    valid = norms > 0
    if not np.any(valid):
        return 0.0
    sims = sims[valid] / (norms[valid] * pnorm)
    return float(np.max(sims))


def softmax(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr - arr.max()
    e = np.exp(arr)
    return e / e.sum()


@dataclass
class FusionResult:
    s_final: list[float]
    chosen_index: int


def fuse(
    s_sel: Sequence[float],
    s_ret: Sequence[float],
    alpha: float = DEFAULT_ALPHA,
    normalize: str = "softmax",
) -> FusionResult:
    """s_final = alpha * s_sel + (1 - alpha) * s_ret, argmax with low-index ties.

    Selector logits are unbounded while retrieval scores live in [-1, 1]; the
    default per-frame softmax puts both operands on comparable scales before
    mixing. normalize="raw" fuses the literal logits instead.
    """
    if len(s_sel) != len(s_ret):
        raise RetrievalError(f"score lists differ in length: {len(s_sel)} vs {len(s_ret)}")
    if not (0.0 <= alpha <= 1.0):
        raise RetrievalError(f"alpha must be in [0,1], got {alpha}")
    if normalize not in NORMALIZE_MODES:
        raise RetrievalError(f"normalize must be one of {NORMALIZE_MODES}")
    sel = softmax(s_sel) if normalize == "softmax" else np.asarray(s_sel, dtype=np.float64)
    final = alpha * sel + (1.0 - alpha) * np.asarray(s_ret, dtype=np.float64)
    return FusionResult(s_final=[float(v) for v in final], chosen_index=int(np.argmax(final)))


# --- bank file format -------------------------------------------------------
# magic | uint64 header length | header JSON | float32 LE embedding matrix |
# uint64 metadata length | metadata JSON (per-entry table)

def save_bank(bank: FeatureBank, path: str | Path) -> None:
    matrix = bank.matrix() if len(bank) else np.zeros((0, EMBEDDING_DIM), dtype=np.float32)
    header = {
        "dimension": int(matrix.shape[1]),
        "count": len(bank),
        "counts_per_title": bank.counts_per_title(),
        "embedder_checksum": bank.embedder_checksum,
        "recipe": bank.recipe,
    }
    meta = [
        {"label": e.label, "source_game": e.source_game, "quality": e.quality,
         "frame_id": e.frame_id, "ann_index": e.ann_index}
        for e in bank.entries
    ]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    tail = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BANK_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(tail)))
        fh.write(tail)


def read_bank_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(BANK_MAGIC)) != BANK_MAGIC:
            raise RetrievalError(f"{path} is not a feature bank file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_bank(path: str | Path) -> FeatureBank:
    with open(path, "rb") as fh:
        if fh.read(len(BANK_MAGIC)) != BANK_MAGIC:
            raise RetrievalError(f"{path} is not a feature bank file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        dim, count = int(header["dimension"]), int(header["count"])
        raw = fh.read(count * dim * 4)
        matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).astype(np.float32)
        (mlen,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
    entries = [
        BankEntry(embedding=matrix[i], label=m["label"], source_game=m["source_game"],
                  quality=float(m["quality"]), frame_id=m["frame_id"], ann_index=int(m["ann_index"]))
        for i, m in enumerate(meta)
    ]
    return FeatureBank(entries=entries, embedder_checksum=header["embedder_checksum"],
                       recipe=header["recipe"])
