"""Stage 2: MSTP selection.

Per candidate box, a 224x224 crop runs through the local branch (512-d) and a
64x64 thumbnail of the whole frame runs once through the global branch
(512-d). The concatenated 1024-d vector passes a bottleneck adapter
(r=256) and a two-layer MLP producing one scalar score per candidate; a
candidate-set cross-entropy forces the true MSTP to rank highest.

Local branch options: "resnet18" (torchvision, optionally pretrained) or
"tiny" (small residual net for CPU-scale runs). The global branch is fixed:
four stride-2 conv blocks (16/32/64/128), global average pool, linear to 512,
ReLU.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .adapter import BottleneckAdapter, freeze_for_mode
from .archive import load_archive, save_archive
from .dataset import imaging
from .dataset import manifest as manifest_io
from .dataset.types import Box, DatasetManifest, FrameRecord
from .evaluation import iou

logger = logging.getLogger(__name__)

FEATURE_DIM = 512
FUSED_DIM = 1024
ADAPTER_BOTTLENECK = 256
CANDIDATE_SOURCES = ("ground_truth_boxes", "detector_proposals")


class SelectorBuildError(Exception):
    pass


class _ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.short = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))
        else:
            self.short = nn.Identity()

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.short(x))


class TinyLocalBranch(nn.Module):
    """Residual net: 224 -> /4 stem -> three stride-2 blocks -> GAP -> 512."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 7, 4, 3, bias=False), nn.BatchNorm2d(16), nn.ReLU(inplace=True)
        )
        self.s1 = _ResidualBlock(16, 32, 2)
        self.s2 = _ResidualBlock(32, 64, 2)
        self.s3 = _ResidualBlock(64, 128, 2)
        self.fc = nn.Linear(128, FEATURE_DIM)

    def forward(self, x):
        x = self.s3(self.s2(self.s1(self.stem(x * 2.0 - 1.0))))
        return self.fc(x.mean(dim=(2, 3)))


class Resnet18LocalBranch(nn.Module):
    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, pretrained: bool):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        weights = ResNet18_Weights.IMAGENET1K_V1 if pretrained else None
        try:
            net = resnet18(weights=weights)
        except Exception as exc:
            raise SelectorBuildError(
                "pretrained local-branch weights unavailable; fetch them into the "
                f"TORCH_HOME cache or build with pretrained=False ({exc})"
            )
        net.fc = nn.Identity()
        self.net = net
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1))

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


class GlobalBranch(nn.Module):
    """64x64 thumbnail -> four stride-2 conv blocks -> GAP -> linear 512 -> ReLU."""

    def __init__(self):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 3
        for c in (16, 32, 64, 128):
            layers += [nn.Conv2d(cin, c, 3, 2, 1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            cin = c
        self.blocks = nn.Sequential(*layers)
        self.fc = nn.Linear(128, FEATURE_DIM)

    def forward(self, x):
        return F.relu(self.fc(self.blocks(x * 2.0 - 1.0).mean(dim=(2, 3))))


class MstpSelector(nn.Module):
    """Local + global branches, fusion adapter, scoring MLP.

    use_global=False drops the global branch entirely (its feature slot is
    zeros); this is the local-only ablation with identical downstream shape.
    """

    def __init__(self, arch: str = "tiny", pretrained: bool = False, use_global: bool = True,
                 seed: int = 42):
        super().__init__()
        torch.manual_seed(seed)
        if arch == "tiny":
            self.local_branch: nn.Module = TinyLocalBranch()
        elif arch == "resnet18":
            self.local_branch = Resnet18LocalBranch(pretrained)
        else:
            raise SelectorBuildError(f"unknown selector arch {arch!r}")
        self.global_branch = GlobalBranch() if use_global else None
        self.fusion_adapter = BottleneckAdapter(FUSED_DIM, ADAPTER_BOTTLENECK, init="trainable")
        self.mlp = nn.Sequential(
            nn.Linear(FUSED_DIM, ADAPTER_BOTTLENECK), nn.ReLU(), nn.Linear(ADAPTER_BOTTLENECK, 1)
        )
        self.arch = arch
        self.use_global = use_global
        self.seed = seed

    def adapter_modules(self) -> list[nn.Module]:
        return [self.fusion_adapter]

    def head_modules(self) -> list[nn.Module]:
        return [self.mlp]

    def backbone_modules(self) -> list[nn.Module]:
        mods: list[nn.Module] = [self.local_branch]
        if self.global_branch is not None:
            mods.append(self.global_branch)
        return mods

    def backbone_checksum(self) -> str:
        md = hashlib.sha256()
        for mod in self.backbone_modules():
            for name, tensor in sorted(mod.state_dict().items()):
                md.update(name.encode())
                md.update(tensor.detach().cpu().numpy().tobytes())
        return md.hexdigest()

    def local_checksum(self) -> str:
        md = hashlib.sha256()
        for name, tensor in sorted(self.local_branch.state_dict().items()):
            md.update(name.encode())
            md.update(tensor.detach().cpu().numpy().tobytes())
        return md.hexdigest()

    def forward(self, crops: torch.Tensor, thumbs: torch.Tensor, counts: Sequence[int],
                apply_adapter: bool = True) -> torch.Tensor:
        """Logits for a batch of frames; crops are the frames' candidates
        concatenated in order, thumbs one per frame, counts the candidate
        count per frame."""
        f_loc = self.local_branch(crops)
        if self.global_branch is not None:
            f_glob = self.global_branch(thumbs)
        else:
            f_glob = torch.zeros(len(counts), FEATURE_DIM, dtype=f_loc.dtype, device=f_loc.device)
        repeats = torch.tensor(list(counts), dtype=torch.long, device=f_loc.device)
        fused = torch.cat([f_loc, f_glob.repeat_interleave(repeats, dim=0)], dim=1)
        if apply_adapter:
            fused = self.fusion_adapter(fused)
        return self.mlp(fused).squeeze(-1)

    @torch.no_grad()
    def score_candidates(self, image: np.ndarray, boxes: Sequence[Box],
                         apply_adapter: bool = True) -> np.ndarray:
        """One logit per candidate box, in input order; the global feature is
        computed once per frame and shared."""
        if not boxes:
            raise SelectorBuildError("score_candidates requires at least one box")
        self.eval()
        crops = np.stack([imaging.crop_local(image, b) for b in boxes])
        thumb = imaging.thumbnail(image)[None]
        crops_t = torch.from_numpy(crops).permute(0, 3, 1, 2).float()
        thumb_t = torch.from_numpy(thumb).permute(0, 3, 1, 2).float()
        logits = self.forward(crops_t, thumb_t, [len(boxes)], apply_adapter=apply_adapter)
        return logits.cpu().numpy()

    @torch.no_grad()
    def embed_local(self, crop: np.ndarray) -> np.ndarray:
        """512-d local-branch feature of a 224x224 crop (the retrieval embedder)."""
        self.eval()
        t = torch.from_numpy(np.ascontiguousarray(crop)).permute(2, 0, 1).float()[None]
        return self.local_branch(t)[0].cpu().numpy()


def select(scores: Sequence[float]) -> int:
    """Argmax with ties to the lowest index."""
    if len(scores) == 0:
        raise ValueError("empty score list")
    return int(np.argmax(np.asarray(scores)))


def build_selector(arch: str = "tiny", pretrained: bool = False, use_global: bool = True,
                   seed: int = 42) -> MstpSelector:
    return MstpSelector(arch=arch, pretrained=pretrained, use_global=use_global, seed=seed)


@dataclass
class SelectorTrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 500
    patience: int | None = None  # None: run all epochs
    mode: str = "full"
    candidate_source: str = "ground_truth_boxes"
    seed: int = 42

    def violations(self) -> list[str]:
        out = []
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            out.append("batch_size and epochs must be positive")
        if self.candidate_source not in CANDIDATE_SOURCES:
            out.append(f"candidate_source must be one of {CANDIDATE_SOURCES}")
        return out


class CandidateCache:
    """Precomputed crops/thumbnails/targets for every frame's candidate set.

    With candidate_source="detector_proposals" a trained detector supplies the
    boxes and frames whose proposals never hit the ground-truth MSTP at
    IoU >= 0.5 are dropped (count logged and recorded in `skipped`).
    """

    def __init__(self, manifest: DatasetManifest, manifest_path: str | Path,
                 frame_ids: Sequence[str], candidate_source: str = "ground_truth_boxes",
                 detector=None, score_threshold: float = 0.5):
        if candidate_source not in CANDIDATE_SOURCES:
            raise ValueError(f"candidate_source must be one of {CANDIDATE_SOURCES}")
        if candidate_source == "detector_proposals" and detector is None:
            raise ValueError("detector_proposals source requires a detector")
        by_id = manifest.by_id()
        self.frames: list[FrameRecord] = []
        self.crops: list[np.ndarray] = []  # uint8 (k,224,224,3)
        self.thumbs: list[np.ndarray] = []  # uint8 (64,64,3)
        self.boxes: list[list[Box]] = []
        self.targets: list[int] = []
        self.skipped = 0
        for frame_id in frame_ids:
            frame = by_id[frame_id]
            image = imaging.load_image(manifest_io.image_path(manifest_path, frame.image_path))
            if candidate_source == "ground_truth_boxes":
                boxes = frame.boxes
                target = frame.mstp_index
            else:
                dets = detector.detect(image, score_threshold=score_threshold)
                boxes = [d.box for d in dets]
                ious = [iou(b, frame.mstp.box) for b in boxes]
                if not boxes or max(ious) < 0.5:
                    self.skipped += 1
                    continue
            self.frames.append(frame)
            self.boxes.append(list(boxes))
            if candidate_source == "detector_proposals":
                target = int(np.argmax(ious))
            self.targets.append(target)
            self.crops.append(np.stack(
                [(imaging.crop_local(image, b) * 255.0).astype(np.uint8) for b in boxes]
            ))
            self.thumbs.append((imaging.thumbnail(image) * 255.0).astype(np.uint8))
        if self.skipped:
            logger.info("candidate cache: skipped %d frame(s) without an MSTP hit", self.skipped)

    def __len__(self):
        return len(self.frames)

    def batch(self, indices: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor, list[int], torch.Tensor]:
        crops = np.concatenate([self.crops[i] for i in indices])
        thumbs = np.stack([self.thumbs[i] for i in indices])
        counts = [len(self.boxes[i]) for i in indices]
        targets = torch.tensor([self.targets[i] for i in indices], dtype=torch.long)
        crops_t = torch.from_numpy(crops).permute(0, 3, 1, 2).float() / 255.0
        thumbs_t = torch.from_numpy(thumbs).permute(0, 3, 1, 2).float() / 255.0
        return crops_t, thumbs_t, counts, targets


def _candidate_set_loss(logits: torch.Tensor, counts: Sequence[int],
                        targets: torch.Tensor) -> tuple[torch.Tensor, int]:
    """Mean per-frame cross-entropy over each candidate set; also counts
    frames whose argmax hits the target."""
    losses = []
    correct = 0
    offset = 0
    for fi, k in enumerate(counts):
        seg = logits[offset : offset + k]
        losses.append(F.cross_entropy(seg[None], targets[fi : fi + 1]))
        correct += int(torch.argmax(seg).item() == int(targets[fi]))
        offset += k
    return torch.stack(losses).mean(), correct


@dataclass
class SelectorEpochStats:
    epoch: int
    train_acc: float
    val_acc: float
    train_loss: float


@dataclass
class SelectorTrainResult:
    best_epoch: int
    best_accuracy: float
    curves: list[SelectorEpochStats] = field(default_factory=list)
    checkpoint_path: Path | None = None
    skipped_frames: int = 0


@torch.no_grad()
def evaluate_selector(model: MstpSelector, cache: CandidateCache, batch_size: int = 8) -> float:
    """MSTP accuracy over the cache's frames."""
    if len(cache) == 0:
        raise ValueError("empty evaluation set")
    model.eval()
    correct = 0
    for start in range(0, len(cache), batch_size):
        idx = range(start, min(start + batch_size, len(cache)))
        crops, thumbs, counts, targets = cache.batch(list(idx))
        logits = model(crops, thumbs, counts)
        offset = 0
        for fi, k in enumerate(counts):
            correct += int(torch.argmax(logits[offset : offset + k]).item() == int(targets[fi]))
            offset += k
    return correct / len(cache)


def train_selector(
    model: MstpSelector,
    train_cache: CandidateCache,
    val_cache: CandidateCache,
    cfg: SelectorTrainConfig,
    out_dir: str | Path | None = None,
) -> SelectorTrainResult:
    """Candidate-set cross-entropy training; best checkpoint by validation
    accuracy (ties to the earlier epoch), restored into the model at the end."""
    bad = cfg.violations()
    if bad:
        raise ValueError("; ".join(bad))
    if len(train_cache) == 0:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    params = freeze_for_mode(model, cfg.mode)
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    best_state = None
    best_acc = -1.0
    best_epoch = -1
    since_improve = 0
    curves: list[SelectorEpochStats] = []

    for epoch in range(cfg.epochs):
        model.train()
        if cfg.mode == "adapter_only":
            for mod in model.backbone_modules():
                mod.eval()
        order = list(range(len(train_cache)))
        rng.shuffle(order)
        losses = []
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            crops, thumbs, counts, targets = train_cache.batch(idx)
            logits = model(crops, thumbs, counts)
            loss, batch_correct = _candidate_set_loss(logits, counts, targets)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))
            correct += batch_correct
        val_acc = evaluate_selector(model, val_cache) if len(val_cache) else 0.0
        curves.append(SelectorEpochStats(
            epoch=epoch, train_acc=correct / len(train_cache), val_acc=val_acc,
            train_loss=float(np.mean(losses)),
        ))
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_improve = 0
        else:
            since_improve += 1
            if cfg.patience is not None and since_improve > cfg.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    result = SelectorTrainResult(
        best_epoch=best_epoch, best_accuracy=best_acc, curves=curves,
        skipped_frames=train_cache.skipped + val_cache.skipped,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "selector_curves.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_acc", "val_acc", "train_loss"])
            for row in curves:
                writer.writerow([row.epoch, row.train_acc, row.val_acc, row.train_loss])
        result.checkpoint_path = out_dir / "selector.ckpt"
        save_selector_checkpoint(model, result.checkpoint_path, cfg.mode, best_epoch, best_acc)
    return result


def save_selector_checkpoint(model: MstpSelector, path: str | Path, mode: str,
                             epoch: int, val_accuracy: float) -> None:
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    save_archive(path, header={
        "kind": "selector",
        "arch": model.arch,
        "use_global": model.use_global,
        "mode": mode,
        "seed": model.seed,
        "epoch": epoch,
        "val_accuracy": val_accuracy,
    }, tensors=tensors)


def load_selector_checkpoint(path: str | Path) -> MstpSelector:
    header, tensors = load_archive(path)
    if header.get("kind") != "selector":
        raise SelectorBuildError(f"{path} is not a selector checkpoint")
    model = build_selector(arch=header["arch"], use_global=bool(header["use_global"]),
                           seed=int(header.get("seed", 0)))
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model
