"""Stage 1: region-proposal transition-point detector.

A Faster R-CNN with a feature-pyramid backbone and a bottleneck adapter
inserted after the shared box-head representation, in front of both the
classification and regression predictors. Two backbones are available:

- "resnet50_fpn": the full-scale configuration (general-image pretrained
  weights when requested).
- "tiny": a small residual FPN for CPU-scale runs; same head structure, same
  adapter placement, recorded in checkpoints so results stay attributable.

Class set is {background, stp}.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torchvision.models.detection import FasterRCNN
from torchvision.models.detection.faster_rcnn import FastRCNNPredictor, TwoMLPHead
from torchvision.models.detection.rpn import AnchorGenerator
from torchvision.ops import MultiScaleRoIAlign
from torchvision.ops.feature_pyramid_network import FeaturePyramidNetwork

from .adapter import BottleneckAdapter, freeze_for_mode, trainable_parameters
from .archive import load_archive, save_archive
from .dataset.types import Box, DatasetManifest, FrameRecord, ScoredBox
from .evaluation import DetectionMetrics, evaluate_detections

NMS_IOU = 0.5
MAX_DETECTIONS = 100
DETECT_SCORE_THRESHOLD = 0.5


class DetectorBuildError(Exception):
    pass


class TrainingDivergedError(Exception):
    pass


class _TinyBody(nn.Module):
    """Three-stage strided CNN emitting /4, /8 and /16 feature maps."""

    def __init__(self, width: int = 24):
        super().__init__()

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, 2, 1, bias=False), nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )

        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 7, 2, 3, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)
        )
        self.c2 = block(width, width)
        self.c3 = block(width, 2 * width)
        self.c4 = block(2 * width, 4 * width)
        self.widths = [width, 2 * width, 4 * width]

    def forward(self, x):
        x = self.stem(x)
        c2 = self.c2(x)
        c3 = self.c3(c2)
        c4 = self.c4(c3)
        return OrderedDict([("0", c2), ("1", c3), ("2", c4)])


class _TinyFpnBackbone(nn.Module):
    def __init__(self, width: int = 24, out_channels: int = 64):
        super().__init__()
        self.body = _TinyBody(width)
        self.fpn = FeaturePyramidNetwork(self.body.widths, out_channels)
        self.out_channels = out_channels

    def forward(self, x):
        return self.fpn(self.body(x))


class _AdapterBoxHead(nn.Module):
    """Shared box-head representation followed by the bottleneck adapter."""

    def __init__(self, shared: nn.Module, adapter: BottleneckAdapter):
        super().__init__()
        self.shared = shared
        self.adapter = adapter

    def forward(self, x):
        return self.adapter(self.shared(x))


@dataclass
class DetectorBuildConfig:
    arch: str = "tiny"  # "tiny" | "resnet50_fpn"
    image_size: int = 192
    pretrained: bool = False
    representation_size: int | None = None  # default: 256 tiny, 1024 resnet50


class StpDetector(nn.Module):
    """Wrapper exposing the adapter/head/backbone structure and detection API."""

    def __init__(self, net: FasterRCNN, arch: str, image_size: int, seed: int):
        super().__init__()
        self.net = net
        self.arch = arch
        self.image_size = image_size
        self.seed = seed

    def adapter_modules(self) -> list[nn.Module]:
        return [self.net.roi_heads.box_head.adapter]

    def head_modules(self) -> list[nn.Module]:
        return [self.net.rpn.head, self.net.roi_heads.box_predictor]

    def backbone_modules(self) -> list[nn.Module]:
        return [self.net.backbone, self.net.roi_heads.box_head.shared]

    def forward(self, images, targets=None):
        return self.net(images, targets)

    def backbone_checksum(self) -> str:
        md = hashlib.sha256()
        for mod in self.backbone_modules():
            for name, tensor in sorted(mod.state_dict().items()):
                md.update(name.encode())
                md.update(tensor.detach().cpu().numpy().tobytes())
        return md.hexdigest()

    @torch.no_grad()
    def detect(self, image: np.ndarray, score_threshold: float = DETECT_SCORE_THRESHOLD) -> list[ScoredBox]:
        """Score-descending detections with score >= threshold, NMS applied."""
        self.net.eval()
        tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
        out = self.net([tensor])[0]
        boxes = out["boxes"].cpu().numpy()
        scores = out["scores"].cpu().numpy()
        dets = []
        for (x1, y1, x2, y2), s in zip(boxes, scores):
            if s < score_threshold or x2 <= x1 or y2 <= y1:
                continue
            dets.append(ScoredBox(Box(float(x1), float(y1), float(x2), float(y2)), float(s)))
        dets.sort(key=lambda d: -d.score)
        return dets


def build_detector(
    mode: str = "full",
    pretrained: bool = False,
    seed: int = 42,
    build: DetectorBuildConfig | None = None,
) -> StpDetector:
    """Construct the detector with deterministic head init for the given seed.

    The adapter starts as an exact identity (trainable init). `mode` only
    records the intended training regime; freezing is applied by the trainer.
    """
    build = build or DetectorBuildConfig(pretrained=pretrained)
    torch.manual_seed(seed)
    if build.arch == "tiny":
        backbone = _TinyFpnBackbone()
        rep_size = build.representation_size or 256
        anchor_sizes = ((16,), (32,), (64,))
        featmaps = ["0", "1", "2"]
    elif build.arch == "resnet50_fpn":
        from torchvision.models import ResNet50_Weights
        from torchvision.models.detection.backbone_utils import resnet_fpn_backbone

        weights = ResNet50_Weights.IMAGENET1K_V1 if (pretrained or build.pretrained) else None
        try:
            backbone = resnet_fpn_backbone("resnet50", weights=weights)
        except Exception as exc:  # weight download or cache failure
            raise DetectorBuildError(
                "pretrained backbone weights unavailable; download them on a "
                "connected machine and point TORCH_HOME at the cache directory, "
                f"or build with pretrained=False ({exc})"
            )
        rep_size = build.representation_size or 1024
        anchor_sizes = ((32,), (64,), (128,), (256,), (512,))
        featmaps = ["0", "1", "2", "3"]
    else:
        raise DetectorBuildError(f"unknown detector arch {build.arch!r}")

    anchor_gen = AnchorGenerator(sizes=anchor_sizes, aspect_ratios=((0.5, 1.0, 2.0),) * len(anchor_sizes))
    roi_pool = MultiScaleRoIAlign(featmap_names=featmaps, output_size=7, sampling_ratio=2)
    shared = TwoMLPHead(backbone.out_channels * 7 * 7, rep_size)
    adapter = BottleneckAdapter(rep_size, rep_size // 4, init="trainable")
    net = FasterRCNN(
        backbone,
        num_classes=2,
        min_size=build.image_size,
        max_size=build.image_size,
        rpn_anchor_generator=anchor_gen,
        box_roi_pool=roi_pool,
        box_head=_AdapterBoxHead(shared, adapter),
        box_predictor=FastRCNNPredictor(rep_size, 2),
        box_nms_thresh=NMS_IOU,
        box_detections_per_img=MAX_DETECTIONS,
        box_score_thresh=0.0,
        rpn_pre_nms_top_n_train=500,
        rpn_post_nms_top_n_train=250,
        rpn_pre_nms_top_n_test=250,
        rpn_post_nms_top_n_test=100,
    )
    model = StpDetector(net, arch=build.arch, image_size=build.image_size, seed=seed)
    model.mode = mode
    return model


@dataclass
class DetectorTrainConfig:
    learning_rate: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    hflip_probability: float = 0.5
    max_epochs: int = 50
    patience: int = 10
    mode: str = "full"  # "full" | "adapter_only"
    seed: int = 42

    def violations(self) -> list[str]:
        out = []
        for name in ("learning_rate", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            out.append("batch_size and max_epochs must be positive")
        if not (0.0 <= self.hflip_probability <= 1.0):
            out.append("hflip_probability must be in [0,1]")
        if self.patience < 0:
            out.append("patience must be >= 0")
        return out


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_map: float
    val_miou: float
    val_recall: float
    val_composite: float


@dataclass
class DetectorTrainResult:
    best_epoch: int
    best_composite: float
    curves: list[EpochStats] = field(default_factory=list)
    checkpoint_path: Path | None = None
    stopped_early: bool = False


class FrameCache:
    """Images (uint8) and ground-truth boxes held in memory for fast epochs."""

    def __init__(self, manifest: DatasetManifest, manifest_path: str | Path, frame_ids: Sequence[str]):
        from .dataset import imaging, manifest as manifest_io

        by_id = manifest.by_id()
        self.frames: list[FrameRecord] = [by_id[i] for i in frame_ids]
        self.images: list[np.ndarray] = []
        for frame in self.frames:
            img = imaging.load_image(manifest_io.image_path(manifest_path, frame.image_path))
            self.images.append((img * 255.0).astype(np.uint8))

    def __len__(self):
        return len(self.frames)

    def image(self, i: int) -> np.ndarray:
        return self.images[i].astype(np.float32) / 255.0


def _targets_for(frame: FrameRecord, flip: bool) -> dict:
    boxes = []
    for ann in frame.annotations:
        b = ann.box
        if flip:
            boxes.append([frame.width - b.x2, b.y1, frame.width - b.x1, b.y2])
        else:
            boxes.append(b.as_list())
    return {
        "boxes": torch.tensor(boxes, dtype=torch.float32),
        "labels": torch.ones(len(boxes), dtype=torch.int64),
    }


def evaluate_detector(
    model: StpDetector, cache: FrameCache, score_thr: float = DETECT_SCORE_THRESHOLD
) -> DetectionMetrics:
    frames = []
    for i, frame in enumerate(cache.frames):
        dets = model.detect(cache.image(i), score_threshold=0.0)
        frames.append((dets, frame.boxes))
    return evaluate_detections(frames, score_thr=score_thr)


def train_detector(
    model: StpDetector,
    train_cache: FrameCache,
    val_cache: FrameCache,
    cfg: DetectorTrainConfig,
    out_dir: str | Path | None = None,
) -> DetectorTrainResult:
    """SGD training with horizontal-flip augmentation and early stopping on the
    validation composite; the best checkpoint (ties to the earlier epoch) is
    restored into the model at the end."""
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
    best_composite = -1.0
    best_epoch = -1
    since_improve = 0
    curves: list[EpochStats] = []
    stopped_early = False

    for epoch in range(cfg.max_epochs):
        model.net.train()
        if cfg.mode == "adapter_only":
            # frozen BN statistics must not drift with the backbone frozen
            for mod in model.backbone_modules():
                mod.eval()
        order = list(range(len(train_cache)))
        rng.shuffle(order)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            images, targets = [], []
            for i in batch:
                img = train_cache.image(i)
                flip = rng.random() < cfg.hflip_probability
                if flip:
                    img = img[:, ::-1].copy()
                images.append(torch.from_numpy(img).permute(2, 0, 1))
                targets.append(_targets_for(train_cache.frames[i], flip))
            loss_dict = model.net(images, targets)
            loss = sum(loss_dict.values())
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: "
                    + ", ".join(f"{k}={float(v):.4g}" for k, v in loss_dict.items())
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss))

        metrics = evaluate_detector(model, val_cache) if len(val_cache) else DetectionMetrics(
            0.0, 0.0, 0.0, 0.0, 0, 0
        )
        curves.append(EpochStats(
            epoch=epoch, train_loss=float(np.mean(losses)),
            val_map=metrics.map50, val_miou=metrics.mean_iou,
            val_recall=metrics.recall, val_composite=metrics.composite,
        ))
        if metrics.composite > best_composite:
            best_composite = metrics.composite
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_improve = 0
        else:
            since_improve += 1
            if since_improve > cfg.patience:
                stopped_early = True
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    result = DetectorTrainResult(
        best_epoch=best_epoch, best_composite=best_composite, curves=curves,
        stopped_early=stopped_early,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_curves(curves, out_dir / "detector_curves.csv")
        result.checkpoint_path = out_dir / "detector.ckpt"
        save_detector_checkpoint(model, result.checkpoint_path, cfg.mode, best_epoch, best_composite)
    return result


def write_curves(curves: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_map", "val_miou", "val_recall", "val_composite"])
        for row in curves:
            writer.writerow([row.epoch, row.train_loss, row.val_map, row.val_miou,
                             row.val_recall, row.val_composite])


def read_curves(path: str | Path) -> list[EpochStats]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EpochStats(
                epoch=int(row["epoch"]), train_loss=float(row["train_loss"]),
                val_map=float(row["val_map"]), val_miou=float(row["val_miou"]),
                val_recall=float(row["val_recall"]), val_composite=float(row["val_composite"]),
            ))
    return out


def save_detector_checkpoint(
    model: StpDetector, path: str | Path, mode: str, epoch: int, val_composite: float
) -> None:
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    save_archive(path, header={
        "kind": "detector",
        "arch": model.arch,
        "image_size": model.image_size,
        "mode": mode,
        "seed": model.seed,
        "epoch": epoch,
        "val_composite": val_composite,
    }, tensors=tensors)


def load_detector_checkpoint(path: str | Path) -> StpDetector:
    header, tensors = load_archive(path)
    if header.get("kind") != "detector":
        raise DetectorBuildError(f"{path} is not a detector checkpoint")
    model = build_detector(
        mode=header.get("mode", "full"),
        seed=int(header.get("seed", 0)),
        build=DetectorBuildConfig(arch=header["arch"], image_size=int(header["image_size"])),
    )
    state = {name: torch.from_numpy(arr.copy()) for name, arr in tensors.items()}
    model.load_state_dict(state)
    return model


__all__ = [
    "DetectorBuildConfig",
    "DetectorBuildError",
    "DetectorTrainConfig",
    "DetectorTrainResult",
    "EpochStats",
    "FrameCache",
    "StpDetector",
    "TrainingDivergedError",
    "build_detector",
    "evaluate_detector",
    "load_detector_checkpoint",
    "read_curves",
    "save_detector_checkpoint",
    "train_detector",
    "trainable_parameters",
    "write_curves",
]
