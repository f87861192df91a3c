import numpy as np
import pytest

from bowlkit.codebook import Exemplar, ExemplarSet
from bowlkit.embedding_store import PatchGrid, normalize
from bowlkit.errors import ConfigError, DegenerateInputError
from bowlkit.geometry import AnchorBox, Box, GtBox
from bowlkit.labeler import (
    GammaPolicy,
    IGNORED,
    NEGATIVE,
    POSITIVE,
    label_anchors,
    label_negatives,
    mask_to_negative_anchors,
    match_positives,
    otsu_gamma,
    pool_anchor_embedding,
    pool_anchor_embeddings,
    self_correlation_labels,
)
from oracles import (
    exhaustive_otsu,
    pairwise_mean_similarity,
    rasterized_mask_overlap,
)


def unit(v):
    return normalize(np.asarray(v, dtype=np.float32))


def grid_from_vectors(vectors, patch_size=16, stride=16, image_id=1):
    """vectors: (h, w, d) array laid out as already-normalized patch embeddings."""
    data = np.asarray(vectors, dtype=np.float32)
    return PatchGrid(
        image_id=image_id,
        grid_h=data.shape[0],
        grid_w=data.shape[1],
        patch_size=patch_size,
        stride=stride,
        dim=data.shape[2],
        data=data,
    )


def exemplar_set(vectors, lam=0.2):
    exemplars = [
        Exemplar(unit(v), count=1, image_id=0, row=0, col=i, insertion_index=i)
        for i, v in enumerate(vectors)
    ]
    return ExemplarSet(exemplars, lam=lam, dim=len(vectors[0]))


def square_anchor(x, y, size, level=0):
    return AnchorBox(
        box=Box(x, y, size, size), level=level, cx=x + size / 2.0, cy=y + size / 2.0
    )


E1 = [1, 0, 0, 0]
E2 = [0, 1, 0, 0]
E3 = [0, 0, 1, 0]


class TestPooling:
    def test_single_patch(self):
        grid = grid_from_vectors([[unit(E1)]])
        pooled = pool_anchor_embedding(Box(0, 0, 16, 16), grid)
        assert np.allclose(pooled, unit(E1))

    def test_mean_of_identical(self):
        grid = grid_from_vectors([[unit(E1), unit(E1)]])
        pooled = pool_anchor_embedding(Box(0, 0, 32, 16), grid)
        assert np.allclose(pooled, unit(E1), atol=1e-6)

    def test_orthogonal_mean(self):
        grid = grid_from_vectors([[unit(E1), unit(E2)]])
        pooled = pool_anchor_embedding(Box(0, 0, 32, 16), grid)
        expected = [1 / np.sqrt(2), 1 / np.sqrt(2), 0, 0]
        assert np.allclose(pooled, expected, atol=1e-6)

    def test_no_center_inside(self):
        grid = grid_from_vectors([[unit(E1)]])
        # Patch center is (8, 8); this anchor misses it.
        assert pool_anchor_embedding(Box(10, 10, 4, 4), grid) is None

    def test_half_open_containment(self):
        grid = grid_from_vectors([[unit(E1), unit(E2)]])
        # Right edge at x=24 equals the second patch center: excluded.
        pooled = pool_anchor_embedding(Box(0, 0, 24, 16), grid)
        assert np.allclose(pooled, unit(E1))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((3, 4, 8))
        raw /= np.linalg.norm(raw, axis=2, keepdims=True)
        grid = grid_from_vectors(raw)
        anchors = [Box(0, 0, 33, 33), Box(16, 16, 32, 16), Box(100, 100, 5, 5)]
        batch = pool_anchor_embeddings(anchors, grid)
        for box, got in zip(anchors, batch):
            single = pool_anchor_embedding(box, grid)
            if single is None:
                assert got is None
            else:
                assert np.allclose(got, single)


class TestOtsu:
    def test_bimodal_separation(self):
        values = np.array([0.1] * 50 + [0.9] * 50)
        gamma = otsu_gamma(values, bins=256)
        assert 0.1 < gamma < 0.9

    def test_degenerate_rejected(self):
        with pytest.raises(DegenerateInputError):
            otsu_gamma(np.full(30, 0.5))

    def test_single_value_rejected(self):
        with pytest.raises(DegenerateInputError):
            otsu_gamma(np.array([0.3]))

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(40):
            n = int(rng.integers(10, 400))
            mode = rng.random()
            if mode < 0.5:
                values = rng.random(n)
            else:
                values = np.concatenate(
                    [rng.normal(0.2, 0.05, n), rng.normal(0.8, 0.1, n)]
                )
            assert otsu_gamma(values, bins=256) == exhaustive_otsu(values, bins=256)

    def test_affine_invariance(self):
        rng = np.random.default_rng(22)
        values = rng.random(200)
        gamma = otsu_gamma(values, bins=128)
        for scale, shift in ((2.0, 0.0), (0.5, 1.0), (3.0, -2.0)):
            mapped = otsu_gamma(values * scale + shift, bins=128)
            assert mapped == pytest.approx(gamma * scale + shift, abs=1e-9)


class TestMatchPositives:
    def test_identical_box_is_positive(self):
        gt = GtBox(Box(0, 0, 16, 16), class_id=1)
        anchors = [square_anchor(0, 0, 16)]
        labels = match_positives(anchors, [gt])
        assert labels[0].role == POSITIVE
        assert labels[0].matched_gt == 0

    def test_disjoint_not_positive(self):
        gt = GtBox(Box(100, 100, 16, 16), class_id=1)
        labels = match_positives([square_anchor(0, 0, 16)], [gt])
        assert labels[0].role == IGNORED

    def test_low_iou_not_positive(self):
        # 2x2 boxes offset by (1, 1) have IoU 1/7 < 0.3.
        gt = GtBox(Box(1, 1, 2, 2), class_id=1)
        labels = match_positives([square_anchor(0, 0, 2)], [gt], iou_threshold=0.3)
        assert labels[0].role == IGNORED

    def test_ties_take_lower_gt_index(self):
        box = Box(0, 0, 16, 16)
        gts = [GtBox(box, class_id=1), GtBox(box, class_id=2)]
        labels = match_positives([square_anchor(0, 0, 16)], gts)
        assert labels[0].matched_gt == 0

    def test_novel_gts_do_not_match(self):
        gt = GtBox(Box(0, 0, 16, 16), class_id=2, is_base=False)
        labels = match_positives([square_anchor(0, 0, 16)], [gt])
        assert labels[0].role == IGNORED


class TestLabelNegatives:
    def test_exemplar_match_is_negative(self):
        grid = grid_from_vectors([[unit(E1)]])
        anchors = [square_anchor(0, 0, 16)]
        labels = label_negatives(
            anchors, grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.9), gts=[],
        )
        assert labels[0].role == NEGATIVE
        assert labels[0].similarity == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_anchor_ignored(self):
        grid = grid_from_vectors([[unit(E2)]])
        labels = label_negatives(
            [square_anchor(0, 0, 16)], grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.5), gts=[],
        )
        assert labels[0].role == IGNORED
        assert labels[0].similarity is None

    def test_positive_takes_precedence(self):
        grid = grid_from_vectors([[unit(E1)]])
        gts = [GtBox(Box(0, 6.4, 16, 16), class_id=1)]  # IoU ~0.43 with the anchor
        labels = label_anchors(
            [square_anchor(0, 0, 16)], grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.5), gts,
        )
        assert labels[0].role == POSITIVE

    def test_guard_blocks_overlapping_negative(self):
        grid = grid_from_vectors([[unit(E1)]])
        gts = [GtBox(Box(12, 0, 16, 16), class_id=1)]  # IoU ~0.14: not positive
        labels = label_anchors(
            [square_anchor(0, 0, 16)], grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.5), gts,
        )
        assert labels[0].role == IGNORED

    def test_guard_ignores_novel_boxes(self):
        grid = grid_from_vectors([[unit(E1)]])
        gts = [GtBox(Box(0, 0, 16, 16), class_id=2, is_base=False)]
        labels = label_anchors(
            [square_anchor(0, 0, 16)], grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.5), gts,
        )
        assert labels[0].role == NEGATIVE

    def test_empty_exemplars_rejected(self):
        grid = grid_from_vectors([[unit(E1)]])
        with pytest.raises(ConfigError):
            label_negatives(
                [square_anchor(0, 0, 16)], grid, ExemplarSet([], 0.2, 4),
                GammaPolicy(mode="fixed", value=0.5), gts=[],
            )

    def test_partition_is_exhaustive_and_exclusive(self):
        rng = np.random.default_rng(3)
        raw = rng.standard_normal((4, 4, 4))
        raw /= np.linalg.norm(raw, axis=2, keepdims=True)
        grid = grid_from_vectors(raw)
        anchors = [
            square_anchor(x * 16, y * 16, 16) for x in range(4) for y in range(4)
        ]
        gts = [GtBox(Box(0, 0, 32, 32), class_id=1)]
        labels = label_anchors(
            anchors, grid, exemplar_set([E1, E2]),
            GammaPolicy(mode="fixed", value=0.3), gts,
        )
        assert len(labels) == len(anchors)
        assert sorted(l.anchor_index for l in labels) == list(range(len(anchors)))
        for label in labels:
            assert label.role in (POSITIVE, NEGATIVE, IGNORED)

    def test_raising_gamma_never_adds_negatives(self):
        rng = np.random.default_rng(4)
        raw = rng.standard_normal((5, 5, 4))
        raw /= np.linalg.norm(raw, axis=2, keepdims=True)
        grid = grid_from_vectors(raw)
        anchors = [
            square_anchor(x * 16, y * 16, 16) for y in range(5) for x in range(5)
        ]
        previous = None
        for gamma in (0.1, 0.3, 0.5, 0.7, 0.9):
            labels = label_anchors(
                anchors, grid, exemplar_set([E1, E2]),
                GammaPolicy(mode="fixed", value=gamma), gts=[],
            )
            negatives = {l.anchor_index for l in labels if l.role == NEGATIVE}
            if previous is not None:
                assert negatives <= previous
            previous = negatives

    def test_gamma_above_cosine_range_yields_none(self):
        grid = grid_from_vectors([[unit(E1)]])
        labels = label_negatives(
            [square_anchor(0, 0, 16)], grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=1.01), gts=[],
        )
        assert labels[0].role == IGNORED

    def test_level_filter(self):
        grid = grid_from_vectors([[unit(E1), unit(E1)]])
        anchors = [square_anchor(0, 0, 16, level=0), square_anchor(16, 0, 16, level=1)]
        labels = label_negatives(
            anchors, grid, exemplar_set([E1]),
            GammaPolicy(mode="fixed", value=0.5), gts=[], levels=(0,),
        )
        assert labels[0].role == NEGATIVE
        assert labels[1].role == IGNORED

    def test_otsu_policy_separates_planted_modes(self):
        # 3 object patches (orthogonal) among 13 background patches.
        vectors = np.tile(unit(E1), (4, 4, 1))
        vectors[0, 0] = unit(E2)
        vectors[0, 1] = unit(E2)
        vectors[0, 2] = unit(E2)
        grid = grid_from_vectors(vectors)
        anchors = [
            square_anchor(x * 16, y * 16, 16) for y in range(4) for x in range(4)
        ]
        labels, sims, gamma = label_anchors(
            anchors, grid, exemplar_set([E1]), GammaPolicy(mode="otsu"), gts=[],
            return_similarities=True,
        )
        assert 0.0 < gamma < 1.0
        negatives = [l for l in labels if l.role == NEGATIVE]
        assert len(negatives) == 13


class TestSelfCorrelation:
    def test_uniform_grid_selects_floor_share_by_index(self):
        vectors = np.tile(unit(E1), (3, 3, 1))
        grid = grid_from_vectors(vectors)
        mask = self_correlation_labels(grid, quantile=8 / 9)
        assert mask.sum() == 1
        assert mask[0, 0]

    def test_outlier_never_background(self):
        vectors = np.tile(unit(E1), (3, 3, 1))
        vectors[2, 2] = unit(E2)
        grid = grid_from_vectors(vectors)
        for quantile in (0.1, 0.5, 8 / 9):
            mask = self_correlation_labels(grid, quantile)
            assert not mask[2, 2]

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(17)
        raw = rng.standard_normal((4, 5, 6))
        raw /= np.linalg.norm(raw, axis=2, keepdims=True)
        grid = grid_from_vectors(raw)
        means = pairwise_mean_similarity(grid)
        m = 20
        for quantile in (0.25, 0.5, 0.75):
            mask = self_correlation_labels(grid, quantile)
            keep = int(np.floor(m * (1 - quantile)))
            order = np.argsort(-means, kind="stable")
            expected = np.zeros(m, dtype=bool)
            expected[order[:keep]] = True
            assert np.array_equal(mask.ravel(), expected)

    def test_single_patch_rejected(self):
        grid = grid_from_vectors([[unit(E1)]])
        with pytest.raises(DegenerateInputError):
            self_correlation_labels(grid, 0.5)

    def test_quantile_validated(self):
        grid = grid_from_vectors([[unit(E1), unit(E2)]])
        with pytest.raises(ConfigError):
            self_correlation_labels(grid, 0.0)


class TestMaskToNegatives:
    def make_grid(self, h=4, w=4):
        vectors = np.tile(unit(E1), (h, w, 1))
        return grid_from_vectors(vectors)

    def test_fully_inside_is_negative(self):
        grid = self.make_grid()
        mask = np.ones((4, 4), dtype=bool)
        labels = mask_to_negative_anchors(mask, grid, [square_anchor(8, 8, 32)])
        assert labels[0].role == NEGATIVE

    def test_half_overlap_not_negative(self):
        grid = self.make_grid()
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :2] = True  # left half of the 64x64 extent
        labels = mask_to_negative_anchors(mask, grid, [square_anchor(16, 16, 32)])
        assert labels[0].role == IGNORED

    def test_exact_ninety_percent_inclusive(self):
        grid = self.make_grid()
        mask = np.zeros((4, 4), dtype=bool)
        mask[:, :3] = True  # masked region covers x < 48
        # 40x16 anchor starting at x=12: 36 of 40 columns masked = 90%.
        anchor = AnchorBox(box=Box(12, 16, 40, 16), level=0, cx=32, cy=24)
        labels = mask_to_negative_anchors(mask, grid, [anchor])
        assert labels[0].role == NEGATIVE
        oracle = rasterized_mask_overlap(mask, grid, anchor.box)
        assert oracle == pytest.approx(0.9, abs=1e-12)

    def test_matches_rasterized_oracle(self):
        rng = np.random.default_rng(23)
        grid = self.make_grid(5, 5)
        mask = rng.random((5, 5)) < 0.5
        anchors = []
        for _ in range(30):
            x = int(rng.integers(0, 70))
            y = int(rng.integers(0, 70))
            w = int(rng.integers(4, 40))
            h = int(rng.integers(4, 40))
            anchors.append(AnchorBox(Box(x, y, w, h), 0, x + w / 2, y + h / 2))
        labels = mask_to_negative_anchors(mask, grid, anchors, overlap_fraction=0.9)
        for anchor, label in zip(anchors, labels):
            frac = rasterized_mask_overlap(mask, grid, anchor.box)
            assert (label.role == NEGATIVE) == (frac >= 0.9)
