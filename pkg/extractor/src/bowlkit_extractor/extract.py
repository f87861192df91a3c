"""Image list -> BWLE embedding file, one grid of ViT key features per image.

Images are processed strictly in input-list order (downstream codebook
construction is order-dependent) in a single process. Unreadable images are
skipped with a warning and recorded in the sidecar manifest; a model that
fails to load is fatal. Features are stored raw (no normalization): unit
scaling is the consumer's policy.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .embedding_file import EmbeddingWriter, GridRecord
from .vit import ViTKeyExtractor, load_extractor

log = logging.getLogger("bowlkit_extractor")

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class ExtractorConfig:
    model: str
    images: list[str]
    output: str
    stride: int = 8
    layer: int = 11
    num_heads: int = 6
    max_side: Optional[int] = None
    manifest: Optional[str] = None

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.layer < 0:
            raise ValueError("layer must be >= 0")
        if self.max_side is not None and self.max_side < 16:
            raise ValueError("max side must be at least one patch")


@dataclass
class ExtractReport:
    processed: list[tuple[int, str, int, int]] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.processed)


def load_model(config: ExtractorConfig) -> ViTKeyExtractor:
    """Local checkpoint path, or a torch.hub DINO identifier as fallback."""
    if os.path.isfile(config.model):
        return load_extractor(
            config.model, stride=config.stride, num_heads=config.num_heads
        )
    try:
        hub_model = torch.hub.load("facebookresearch/dino:main", config.model)
    except Exception as exc:  # any hub failure is fatal per contract
        raise RuntimeError(
            f"cannot load model {config.model!r}: not a local file and "
            f"hub load failed ({exc})"
        ) from exc
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".pth", delete=False) as tmp:
        torch.save(hub_model.state_dict(), tmp.name)
        path = tmp.name
    try:
        return load_extractor(path, stride=config.stride,
                              num_heads=config.num_heads)
    finally:
        os.unlink(path)


def _load_image_tensor(path, max_side):
    with Image.open(path) as img:
        img = img.convert("RGB")
        if max_side is not None and max(img.size) > max_side:
            scale = max_side / max(img.size)
            new_size = (
                max(16, int(round(img.size[0] * scale))),
                max(16, int(round(img.size[1] * scale))),
            )
            img = img.resize(new_size, Image.BICUBIC)
        array = np.asarray(img, dtype=np.float32) / 255.0
    array = (array - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(array.transpose(2, 0, 1).copy())


def extract(config: ExtractorConfig) -> ExtractReport:
    """Run the model over every readable image and write the embedding file."""
    # Single-threaded inference keeps reruns bit-identical.
    torch.set_num_threads(1)
    model = load_model(config)
    if not 0 <= config.layer < len(model.blocks):
        raise ValueError(
            f"layer {config.layer} outside 0..{len(model.blocks) - 1}"
        )

    report = ExtractReport()
    with EmbeddingWriter(config.output, model.embed_dim) as writer:
        for index, path in enumerate(config.images):
            try:
                tensor = _load_image_tensor(path, config.max_side)
            except (OSError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
                report.skipped.append((path, str(exc)))
                continue
            try:
                features = model.key_features(tensor, config.layer)
            except ValueError as exc:  # image smaller than one patch
                log.warning("skipping %s: %s", path, exc)
                report.skipped.append((path, str(exc)))
                continue
            grid = features.numpy().astype(np.float32)
            writer.add(
                GridRecord(
                    image_id=index,
                    patch_size=model.patch_size,
                    stride=config.stride,
                    data=grid,
                )
            )
            report.processed.append((index, path, grid.shape[0], grid.shape[1]))

    if config.manifest:
        write_manifest(config, report, config.manifest)
    return report


def write_manifest(config: ExtractorConfig, report: ExtractReport, path):
    resize = "none" if config.max_side is None else f"max-side={config.max_side}"
    lines = [
        f"model\t{config.model}",
        f"stride\t{config.stride}",
        f"layer\t{config.layer}",
        f"resize_policy\t{resize}",
    ]
    for image_id, image_path, gh, gw in report.processed:
        lines.append(f"processed\t{image_id}\t{image_path}\t{gh}x{gw}")
    for image_path, reason in report.skipped:
        lines.append(f"skipped\t{image_path}\t{reason}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
