"""Desk-scale A/B probe: does negative supervision improve novel recall?

A linear scorer on pooled anchor embeddings is trained twice with identical
seeds and data order: once on positive targets only, once with mined
background negatives added. Both models score every anchor of a held-out
split; anchors become detections and novel-class AR is compared.

The synthetic dataset plants three latent appearance clusters. Background
comes in an "easy" flavor (orthogonal to everything) and a "hard" flavor
that resembles the base-object direction more than novel objects do. A
positives-only scorer therefore ranks hard background above novel objects
and wastes the detection budget on it; a scorer that also saw negatives
pushes background down. That ordering gap is the measured quantity.

Object boxes are squares of 2x2 patch cells placed on even cell boundaries,
so the stride-32 anchor level contains an exactly aligned anchor for every
object, and single-patch anchors are always purely background or purely
object.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .codebook import ExemplarSet
from .embedding_store import PatchGrid
from .errors import ConfigError, DimensionError, EmptyDatasetError
from .evalkit import Detection, ar_novel, average_recall
from .geometry import AnchorConfig, Box, GtBox, generate_anchors
from .labeler import GammaPolicy, label_anchors, pool_anchor_embeddings
from .supervision import POSITIVE, TargetRecord, assign_targets, sigmoid

WITH_NEGATIVES = "with_negatives"
POSITIVES_ONLY = "positives_only"
CONDITIONS = (WITH_NEGATIVES, POSITIVES_ONLY)

# Cosines between the planted appearance directions. Hard background is
# closer to the base-object direction than novel objects are, which is what
# makes the positives-only condition rank it above novel objects.
BASE_HARD_BG_COS = 0.75
BASE_NOVEL_COS = 0.55

BASE_CLASS_ID = 1
NOVEL_CLASS_ID = 2


@dataclass(frozen=True)
class ProbeModel:
    weights: np.ndarray
    bias: float


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 5.0
    epochs: int = 400
    seed: int = 0
    condition: str = WITH_NEGATIVES

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.condition not in CONDITIONS:
            raise ConfigError(f"unknown condition {self.condition!r}")


def train_probe(
    features: np.ndarray,
    targets: Sequence[TargetRecord],
    config: ProbeConfig,
) -> ProbeModel:
    """Full-batch gradient descent on the objectness L1 objective.

    ``features`` rows align with ``targets``. Under the positives-only
    condition, negative records (and their rows) are dropped before any
    arithmetic, so runs with no negatives are bitwise identical across
    conditions.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(targets):
        raise DimensionError(
            f"features {feats.shape} do not align with {len(targets)} targets"
        )
    keep = np.array(
        [config.condition == WITH_NEGATIVES or t.role == POSITIVE for t in targets],
        dtype=bool,
    )
    x = feats[keep]
    wanted = np.array(
        [t.objectness_target for t, use in zip(targets, keep) if use],
        dtype=np.float64,
    )
    n = x.shape[0]
    if n == 0:
        raise EmptyDatasetError("no training records after condition filtering")

    rng = np.random.default_rng(config.seed)
    weights = 0.01 * rng.standard_normal(x.shape[1])
    bias = 0.0
    for _ in range(config.epochs):
        z = x @ weights + bias
        s = sigmoid(z)
        grad_z = np.sign(s - wanted) * s * (1.0 - s) / n
        weights = weights - config.learning_rate * (x.T @ grad_z)
        bias = bias - config.learning_rate * grad_z.sum()
    return ProbeModel(weights=weights, bias=float(bias))


def score_anchors(model: ProbeModel, features: np.ndarray) -> np.ndarray:
    """sigmoid(w . phi + bias) per feature row."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != model.weights.shape[0]:
        raise DimensionError(
            f"features {feats.shape} do not match model dim {model.weights.shape}"
        )
    return sigmoid(feats @ model.weights + model.bias)


def probe_training_loss(
    model: ProbeModel, features: np.ndarray, targets: Sequence[TargetRecord]
) -> float:
    scores = score_anchors(model, features)
    wanted = np.array([t.objectness_target for t in targets])
    return float(np.abs(scores - wanted).mean()) if len(targets) else 0.0


# ---------------------------------------------------------------------------
# Synthetic dataset


@dataclass(frozen=True)
class SyntheticConfig:
    n_train_images: int = 12
    n_eval_images: int = 8
    grid_h: int = 12
    grid_w: int = 12
    dim: int = 16
    patch_size: int = 16
    stride: int = 16
    noise: float = 0.05

    def __post_init__(self):
        if min(self.n_train_images, self.n_eval_images) < 1:
            raise ConfigError("need at least one train and one eval image")
        if self.grid_h < 4 or self.grid_w < 4:
            raise ConfigError("synthetic grids need at least 4x4 patches")
        if self.dim < 4:
            raise ConfigError("synthetic embeddings need dim >= 4")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")

    @property
    def image_width(self) -> int:
        return self.grid_w * self.stride

    @property
    def image_height(self) -> int:
        return self.grid_h * self.stride


@dataclass
class SyntheticDataset:
    config: SyntheticConfig
    grids: dict[int, PatchGrid]
    gts: dict[int, list[GtBox]]
    train_ids: list[int]
    eval_ids: list[int]
    directions: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def train_grids(self) -> list[PatchGrid]:
        return [self.grids[i] for i in self.train_ids]

    def eval_grids(self) -> list[PatchGrid]:
        return [self.grids[i] for i in self.eval_ids]

    def flat_gts(self, image_ids) -> list[tuple[int, GtBox]]:
        out = []
        for image_id in image_ids:
            for gt in self.gts[image_id]:
                out.append((image_id, gt))
        return out


def _latent_directions(rng: np.random.Generator, dim: int) -> dict[str, np.ndarray]:
    basis, _ = np.linalg.qr(rng.standard_normal((dim, 4)))
    q0, q1, q2, q3 = basis.T
    a = BASE_HARD_BG_COS
    c = BASE_NOVEL_COS
    b = np.sqrt(1.0 - a * a)
    e = np.sqrt(1.0 - c * c)
    x = -(c * a) / (e * b)  # cancels the novel/hard-bg cosine to exactly 0
    y = np.sqrt(1.0 - x * x)
    return {
        "base": q0,
        "bg_easy": q1,
        "bg_hard": a * q0 + b * q2,
        "novel": c * q0 + e * (x * q2 + y * q3),
    }


def _place_objects(rng, config):
    """Two distinct 2x2-cell slots on even cell boundaries per image."""
    slots = [
        (r, c)
        for r in range(0, config.grid_h - 1, 2)
        for c in range(0, config.grid_w - 1, 2)
    ]
    picked = rng.choice(len(slots), size=2, replace=False)
    return slots[int(picked[0])], slots[int(picked[1])]


def make_synthetic_dataset(
    seed: int, config: Optional[SyntheticConfig] = None
) -> SyntheticDataset:
    """Deterministic planted dataset: embeddings plus base/novel ground truth.

    Every image holds one labeled base object and one unlabeled novel object
    on a background that alternates between the easy and hard flavors by
    image parity.
    """
    config = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    directions = _latent_directions(rng, config.dim)

    grids = {}
    gts = {}
    n_total = config.n_train_images + config.n_eval_images
    for index in range(n_total):
        image_id = index + 1
        bg_key = "bg_easy" if index % 2 == 0 else "bg_hard"
        base_slot, novel_slot = _place_objects(rng, config)

        field_dirs = np.tile(directions[bg_key], (config.grid_h, config.grid_w, 1))
        for (r, c), key in ((base_slot, "base"), (novel_slot, "novel")):
            field_dirs[r : r + 2, c : c + 2] = directions[key]

        noise = config.noise * rng.standard_normal(
            (config.grid_h, config.grid_w, config.dim)
        )
        data = field_dirs + noise
        data /= np.linalg.norm(data, axis=2, keepdims=True)
        grids[image_id] = PatchGrid(
            image_id=image_id,
            grid_h=config.grid_h,
            grid_w=config.grid_w,
            patch_size=config.patch_size,
            stride=config.stride,
            dim=config.dim,
            data=data.astype(np.float32),
        )

        def slot_box(slot):
            r, c = slot
            return Box(
                c * config.stride,
                r * config.stride,
                2 * config.stride,
                2 * config.stride,
            )

        gts[image_id] = [
            GtBox(box=slot_box(base_slot), class_id=BASE_CLASS_ID, is_base=True),
            GtBox(box=slot_box(novel_slot), class_id=NOVEL_CLASS_ID, is_base=False),
        ]

    ids = list(range(1, n_total + 1))
    return SyntheticDataset(
        config=config,
        grids=grids,
        gts=gts,
        train_ids=ids[: config.n_train_images],
        eval_ids=ids[config.n_train_images :],
        directions=directions,
    )


def synthetic_anchor_config(config: SyntheticConfig) -> AnchorConfig:
    """Two levels: single-patch anchors and object-sized anchors."""
    return AnchorConfig(
        strides=(config.stride, 2 * config.stride),
        scales=(config.stride, 2 * config.stride),
        aspect_ratios=(1.0,),
    )


# Negatives are mined on the single-patch level only: those anchors align
# exactly with patch cells, mirroring the fixed-size-anchor protocol of the
# precision experiment.
NEGATIVE_MINING_LEVELS = (0,)


def dataset_to_coco(dataset: SyntheticDataset, image_ids: Sequence[int]) -> dict:
    """COCO-style annotation payload for the given image subset."""
    config = dataset.config
    images = [
        {"id": i, "width": config.image_width, "height": config.image_height}
        for i in image_ids
    ]
    annotations = []
    ann_id = 1
    for image_id in image_ids:
        for gt in dataset.gts[image_id]:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "bbox": [gt.box.x, gt.box.y, gt.box.w, gt.box.h],
                    "category_id": gt.class_id,
                    "area": gt.box.area,
                }
            )
            ann_id += 1
    categories = [
        {"id": BASE_CLASS_ID, "name": "base-object", "split": "base"},
        {"id": NOVEL_CLASS_ID, "name": "novel-object", "split": "novel"},
    ]
    return {"images": images, "annotations": annotations, "categories": categories}


def make_mock_detections(
    dataset: SyntheticDataset, image_ids: Sequence[int], seed: int
) -> list[dict]:
    """Deterministic stand-in proposals: jittered ground truth plus clutter."""
    rng = np.random.default_rng(seed)
    out = []
    for image_id in image_ids:
        for gt in dataset.gts[image_id]:
            jitter = rng.uniform(-2.0, 2.0, size=2)
            out.append(
                {
                    "image_id": image_id,
                    "bbox": [
                        float(gt.box.x + jitter[0]),
                        float(gt.box.y + jitter[1]),
                        gt.box.w,
                        gt.box.h,
                    ],
                    "score": float(rng.uniform(0.7, 1.0)),
                }
            )
        for _ in range(3):
            size = float(rng.uniform(16, 48))
            out.append(
                {
                    "image_id": image_id,
                    "bbox": [
                        float(rng.uniform(0, dataset.config.image_width - size)),
                        float(rng.uniform(0, dataset.config.image_height - size)),
                        size,
                        size,
                    ],
                    "score": float(rng.uniform(0.0, 0.5)),
                }
            )
    return out


# ---------------------------------------------------------------------------
# The A/B experiment


@dataclass
class AbResult:
    seed: int
    ar_novel_with: Optional[float]
    ar_novel_without: Optional[float]
    ar_all_with: Optional[float]
    ar_all_without: Optional[float]
    n_positive_records: int
    n_negative_records: int

    @property
    def improvement(self) -> float:
        return (self.ar_novel_with or 0.0) - (self.ar_novel_without or 0.0)


def _collect_training_records(dataset, exemplars, policy, anchor_cfg):
    features = []
    records = []
    n_pos = 0
    n_neg = 0
    for image_id in dataset.train_ids:
        grid = dataset.grids[image_id].normalized()
        gts = dataset.gts[image_id]
        anchors = generate_anchors(
            dataset.config.image_width, dataset.config.image_height, anchor_cfg
        )
        labels = label_anchors(
            anchors,
            grid,
            exemplars,
            policy,
            gts,
            levels=NEGATIVE_MINING_LEVELS,
        )
        image_records = assign_targets(labels, anchors, gts, image_id=image_id)
        pooled = pool_anchor_embeddings([a.box for a in anchors], grid)
        for rec in image_records:
            vec = pooled[rec.anchor_index]
            if vec is None:
                continue
            features.append(vec)
            records.append(rec)
            if rec.role == POSITIVE:
                n_pos += 1
            else:
                n_neg += 1
    if not records:
        raise EmptyDatasetError("no training records were produced")
    return np.stack(features).astype(np.float64), records, n_pos, n_neg


def _score_eval_split(dataset, model, anchor_cfg) -> list[Detection]:
    dets = []
    for image_id in dataset.eval_ids:
        grid = dataset.grids[image_id].normalized()
        anchors = generate_anchors(
            dataset.config.image_width, dataset.config.image_height, anchor_cfg
        )
        pooled = pool_anchor_embeddings([a.box for a in anchors], grid)
        have = [i for i, v in enumerate(pooled) if v is not None]
        if not have:
            continue
        feats = np.stack([pooled[i] for i in have]).astype(np.float64)
        scores = score_anchors(model, feats)
        for i, score in zip(have, scores):
            dets.append(
                Detection(image_id=image_id, box=anchors[i].box, score=float(score))
            )
    return dets


def ab_experiment(
    dataset: SyntheticDataset,
    exemplars: ExemplarSet,
    config: ProbeConfig,
    budget: int = 100,
    gamma_policy: Optional[GammaPolicy] = None,
):
    """Train both conditions on the train split, compare novel AR on eval.

    Returns an AbResult. Both conditions share the seed, the data order, and
    the mined records; they differ only in whether negative records reach
    the trainer.
    """
    if len(exemplars) == 0:
        raise ConfigError("ab_experiment requires a nonempty exemplar set")
    policy = gamma_policy or GammaPolicy(mode="otsu")
    anchor_cfg = synthetic_anchor_config(dataset.config)

    features, records, n_pos, n_neg = _collect_training_records(
        dataset, exemplars, policy, anchor_cfg
    )

    models = {}
    for condition in CONDITIONS:
        cond_config = ProbeConfig(
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            seed=config.seed,
            condition=condition,
        )
        models[condition] = train_probe(features, records, cond_config)

    base_gts = [
        (i, g) for i, g in dataset.flat_gts(dataset.eval_ids) if g.is_base
    ]
    novel_gts = [
        (i, g) for i, g in dataset.flat_gts(dataset.eval_ids) if not g.is_base
    ]
    all_gts = base_gts + novel_gts

    results = {}
    for condition in CONDITIONS:
        dets = _score_eval_split(dataset, models[condition], anchor_cfg)
        results[condition] = (
            ar_novel(dets, base_gts, novel_gts, budget),
            average_recall(dets, all_gts, budget),
        )

    return AbResult(
        seed=config.seed,
        ar_novel_with=results[WITH_NEGATIVES][0],
        ar_novel_without=results[POSITIVES_ONLY][0],
        ar_all_with=results[WITH_NEGATIVES][1],
        ar_all_without=results[POSITIVES_ONLY][1],
        n_positive_records=n_pos,
        n_negative_records=n_neg,
    )
