"""Core record types for annotated frame manifests and the synthetic corpus."""

from __future__ import annotations

from dataclasses import dataclass, field


class ManifestError(Exception):
    """Raised when a manifest file cannot be parsed or violates its schema."""


class ValidationError(ManifestError):
    """Raised when record invariants are violated.

    Carries every violation found, each tagged with the offending frame_id,
    so a bad manifest is reported in one pass.
    """

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel coordinates, origin top-left, x1<x2 and y1<y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @staticmethod
    def from_list(coords) -> "Box":
        if len(coords) != 4:
            raise ManifestError(f"box needs 4 coordinates, got {len(coords)}")
        return Box(float(coords[0]), float(coords[1]), float(coords[2]), float(coords[3]))

    def violations(self, width: float | None = None, height: float | None = None) -> list[str]:
        """Invariant check; bounds are only checked when the frame size is given."""
        out = []
        if not (self.x1 < self.x2):
            out.append(f"box x1={self.x1} must be < x2={self.x2}")
        if not (self.y1 < self.y2):
            out.append(f"box y1={self.y1} must be < y2={self.y2}")
        if width is not None and (self.x1 < 0 or self.x2 > width):
            out.append(f"box x range [{self.x1},{self.x2}] outside frame width {width}")
        if height is not None and (self.y1 < 0 or self.y2 > height):
            out.append(f"box y range [{self.y1},{self.y2}] outside frame height {height}")
        return out


@dataclass(frozen=True)
class ScoredBox:
    """A detection: box plus a confidence score in [0,1]."""

    box: Box
    score: float


UNCERTAINTY_LEVELS = ("certain", "uncertain")


@dataclass
class StpAnnotation:
    """One annotated transition region within a frame."""

    box: Box
    is_mstp: bool = False
    uncertainty: str = "certain"
    note: str = ""
    merged_from: int = 1

    def violations(self, width: float | None = None, height: float | None = None) -> list[str]:
        out = self.box.violations(width, height)
        if self.uncertainty not in UNCERTAINTY_LEVELS:
            out.append(f"uncertainty must be one of {UNCERTAINTY_LEVELS}, got {self.uncertainty!r}")
        if self.uncertainty == "uncertain" and not self.note.strip():
            out.append("uncertainty=uncertain requires a non-empty note")
        if self.merged_from < 1:
            out.append(f"merged_from must be >= 1, got {self.merged_from}")
        return out

    def to_json(self) -> dict:
        return {
            "box": self.box.as_list(),
            "is_mstp": self.is_mstp,
            "uncertainty": self.uncertainty,
            "note": self.note,
            "merged_from": self.merged_from,
        }

    @staticmethod
    def from_json(obj: dict) -> "StpAnnotation":
        return StpAnnotation(
            box=Box.from_list(obj["box"]),
            is_mstp=bool(obj.get("is_mstp", False)),
            uncertainty=str(obj.get("uncertainty", "certain")),
            note=str(obj.get("note", "")),
            merged_from=int(obj.get("merged_from", 1)),
        )


@dataclass
class FrameRecord:
    """One annotated screenshot with its transition-point boxes."""

    frame_id: str
    image_path: str
    width: int
    height: int
    game: str
    annotations: list[StpAnnotation] = field(default_factory=list)

    @property
    def mstp_index(self) -> int:
        for i, ann in enumerate(self.annotations):
            if ann.is_mstp:
                return i
        raise ValueError(f"frame {self.frame_id} has no MSTP annotation")

    @property
    def mstp(self) -> StpAnnotation:
        return self.annotations[self.mstp_index]

    @property
    def boxes(self) -> list[Box]:
        return [a.box for a in self.annotations]

    def violations(self) -> list[str]:
        out = []
        if not self.annotations:
            out.append(f"frame {self.frame_id}: needs at least one annotation")
        n_mstp = sum(1 for a in self.annotations if a.is_mstp)
        if n_mstp != 1:
            out.append(f"frame {self.frame_id}: exactly one MSTP required, found {n_mstp}")
        if self.width <= 0 or self.height <= 0:
            out.append(f"frame {self.frame_id}: non-positive size {self.width}x{self.height}")
        for i, ann in enumerate(self.annotations):
            for v in ann.violations(self.width, self.height):
                out.append(f"frame {self.frame_id} annotation {i}: {v}")
        return out

    def to_json(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "image_path": self.image_path,
            "width": self.width,
            "height": self.height,
            "game": self.game,
            "annotations": [a.to_json() for a in self.annotations],
        }

    @staticmethod
    def from_json(obj: dict) -> "FrameRecord":
        return FrameRecord(
            frame_id=str(obj["frame_id"]),
            image_path=str(obj["image_path"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            game=str(obj["game"]),
            annotations=[StpAnnotation.from_json(a) for a in obj.get("annotations", [])],
        )


MANIFEST_VERSION = 1


@dataclass
class DatasetManifest:
    """A validated collection of frame records. Immutable by convention after load."""

    frames: list[FrameRecord] = field(default_factory=list)
    provenance: str = ""
    version: int = MANIFEST_VERSION

    def frame_ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]

    def by_id(self) -> dict[str, FrameRecord]:
        return {f.frame_id: f for f in self.frames}

    def games(self) -> list[str]:
        return sorted({f.game for f in self.frames})

    def frames_for_game(self, game: str) -> list[FrameRecord]:
        return [f for f in self.frames if f.game == game]

    def per_game_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for f in self.frames:
            counts[f.game] = counts.get(f.game, 0) + 1
        return counts

    def violations(self) -> list[str]:
        out = []
        if self.version != MANIFEST_VERSION:
            out.append(f"manifest version must be {MANIFEST_VERSION}, got {self.version}")
        seen: set[str] = set()
        for f in self.frames:
            if f.frame_id in seen:
                out.append(f"duplicate frame_id {f.frame_id}")
            seen.add(f.frame_id)
            out.extend(f.violations())
        return out

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "provenance": self.provenance,
            "frames": [f.to_json() for f in self.frames],
        }

    @staticmethod
    def from_json(obj: dict) -> "DatasetManifest":
        if not isinstance(obj, dict):
            raise ManifestError("manifest root must be a JSON object")
        return DatasetManifest(
            frames=[FrameRecord.from_json(f) for f in obj.get("frames", [])],
            provenance=str(obj.get("provenance", "")),
            version=int(obj.get("version", -1)),
        )


@dataclass
class SplitConfig:
    """Per-game train fractions plus the fixed validation share of the train portion."""

    train_fraction: dict[str, float] = field(default_factory=dict)
    val_fraction: float = 0.2
    seed: int = 42

    def violations(self) -> list[str]:
        out = []
        for game, frac in self.train_fraction.items():
            if not (0.0 < frac < 1.0):
                out.append(f"train fraction for {game} must be in (0,1), got {frac}")
        if not (0.0 < self.val_fraction < 1.0):
            out.append(f"val fraction must be in (0,1), got {self.val_fraction}")
        return out


@dataclass
class SynthConfig:
    """Knobs for the deterministic doorway-scene generator.

    MSTP rule: in local-cue frames the brightest doorway interior wins; in
    global-cue frames all interiors share one luminance and a beacon glyph
    next to the designated doorway is the only mark of the main transition.
    """

    image_size: int = 512
    num_frames: int = 100
    doorways_min: int = 1
    doorways_max: int = 5
    global_cue_fraction: float = 0.5
    noise_level: float = 0.3
    style: str = "stone"
    game: str = "synth"

    def violations(self) -> list[str]:
        out = []
        if self.image_size < 64:
            out.append(f"image_size must be >= 64, got {self.image_size}")
        if self.num_frames < 0:
            out.append(f"num_frames must be >= 0, got {self.num_frames}")
        if not (1 <= self.doorways_min <= self.doorways_max):
            out.append(
                f"doorway range must satisfy 1 <= min <= max, got {self.doorways_min}..{self.doorways_max}"
            )
        if not (0.0 <= self.global_cue_fraction <= 1.0):
            out.append(f"global_cue_fraction must be in [0,1], got {self.global_cue_fraction}")
        if not (0.0 <= self.noise_level <= 1.0):
            out.append(f"noise_level must be in [0,1], got {self.noise_level}")
        if self.style not in ("stone", "ember"):
            out.append(f"style must be 'stone' or 'ember', got {self.style!r}")
        return out
