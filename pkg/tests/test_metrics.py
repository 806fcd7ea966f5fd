import numpy as np
import pytest

from gald.metrics import (
    BOUNDARY_SLACKS, boundary_fscore, boundary_mask, confusion_matrix, iou_from_confusion, mean_boundary_fscore,
    miou,
)


def square(size, top, left, side):
    m = np.zeros((size, size), dtype=int)
    m[top:top + side, left:left + side] = 1
    return m


SHIFT5_FSCORE = 17 / 30  # frozen from the brute-force oracle below


def brute_boundary(mask):
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and not mask[yy, xx]:
                    out[y, x] = True
    return out


def brute_fscore(pred, gt, cls, slack):
    """Scalar double-loop matching with Chebyshev distance."""
    bp = [tuple(p) for p in np.argwhere(brute_boundary(pred == cls))]
    bg = [tuple(p) for p in np.argwhere(brute_boundary(gt == cls))]

    def matched(src, dst):
        hits = 0
        for y, x in src:
            if any(max(abs(y - v), abs(x - u)) <= slack for v, u in dst):
                hits += 1
        return hits

    p = matched(bp, bg) / len(bp)
    r = matched(bg, bp) / len(bg)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class TestMiou:
    def test_perfect(self):
        labels = np.random.default_rng(0).integers(0, 4, size=(6, 7))
        assert miou(labels, labels, 4)[0] == 1.0

    def test_disjoint(self):
        assert miou(np.zeros((3, 3), int), np.ones((3, 3), int), 2)[0] == 0.0

    def test_hand_case(self):
        gt = np.array([[0, 0], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        mean, per_class = miou(pred, gt, 2)
        assert per_class[0] == 1 / 2 and per_class[1] == 2 / 3
        assert mean == 7 / 12

    def test_absent_class_is_nan_and_skipped(self):
        mean, per_class = miou(np.zeros((2, 2), int), np.zeros((2, 2), int), 3)
        assert mean == 1.0 and np.isnan(per_class[1]) and np.isnan(per_class[2])

    def test_ignore_index(self):
        gt = np.array([[0, 255], [1, 1]])
        pred = np.array([[0, 1], [1, 1]])
        assert miou(pred, gt, 2, ignore_index=255)[0] == 1.0

    def test_symmetric_per_class(self):
        r = np.random.default_rng(1)
        a, b = r.integers(0, 3, size=(8, 8)), r.integers(0, 3, size=(8, 8))
        assert np.array_equal(miou(a, b, 3)[1], miou(b, a, 3)[1])

    def test_relabel_invariant(self):
        r = np.random.default_rng(2)
        a, b = r.integers(0, 3, size=(8, 8)), r.integers(0, 3, size=(8, 8))
        perm = np.array([2, 0, 1])
        m1, pc1 = miou(a, b, 3)
        m2, pc2 = miou(perm[a], perm[b], 3)
        assert m1 == pytest.approx(m2, abs=1e-15) and np.allclose(pc1, pc2[perm])

    def test_errors(self):
        with pytest.raises(ValueError):
            miou(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)
        with pytest.raises(ValueError):
            miou(np.full((2, 2), 5), np.zeros((2, 2), int), 2)

    def test_confusion_layout(self):
        cm = confusion_matrix(np.array([[0, 1]]), np.array([[1, 1]]), 2)
        assert cm.tolist() == [[0, 0], [1, 1]]


class TestBoundary:
    def test_mask_matches_brute_force(self):
        r = np.random.default_rng(3)
        for _ in range(20):
            m = r.random((9, 11)) < 0.4
            assert np.array_equal(boundary_mask(m), brute_boundary(m))

    def test_image_border_is_not_boundary(self):
        assert not boundary_mask(np.ones((4, 4), bool)).any()

    @pytest.mark.parametrize("slack", BOUNDARY_SLACKS)
    def test_identical(self, slack):
        m = square(32, 8, 10, 12)
        assert boundary_fscore(m, m, 1, slack) == 1.0

    def test_shift_1_within_slack_3(self):
        assert boundary_fscore(square(32, 9, 10, 12), square(32, 8, 10, 12), 1, 3) == 1.0

    def test_shift_5_slack_3(self):
        gt = square(48, 12, 12, 16)
        pred = square(48, 12, 17, 16)
        got = boundary_fscore(pred, gt, 1, 3)
        assert got == pytest.approx(brute_fscore(pred, gt, 1, 3), abs=1e-15)
        assert got == pytest.approx(SHIFT5_FSCORE, abs=1e-15)

    def test_matches_brute_force_on_random_maps(self):
        r = np.random.default_rng(4)
        for _ in range(10):
            a, b = r.integers(0, 2, size=(12, 12)), r.integers(0, 2, size=(12, 12))
            for slack in (0, 1, 3):
                assert boundary_fscore(a, b, 1, slack) == pytest.approx(brute_fscore(a, b, 1, slack), abs=1e-15)

    def test_monotone_in_slack(self):
        r = np.random.default_rng(5)
        for _ in range(100):
            a = square(24, *r.integers(0, 12, size=2), int(r.integers(3, 12)))
            b = square(24, *r.integers(0, 12, size=2), int(r.integers(3, 12)))
            scores = [boundary_fscore(a, b, 1, s) for s in range(0, 13)]
            assert all(x <= y for x, y in zip(scores, scores[1:]))

    def test_empty_conventions(self):
        empty = np.zeros((8, 8), int)
        assert boundary_fscore(empty, empty, 1, 3) == 1.0
        assert boundary_fscore(square(8, 2, 2, 3), empty, 1, 3) == 0.0
        assert boundary_fscore(empty, square(8, 2, 2, 3), 1, 3) == 0.0

    def test_relabel_invariant(self):
        a, b = square(20, 3, 3, 8), square(20, 5, 4, 8)
        perm = np.array([1, 0])
        assert mean_boundary_fscore(a, b, 2, 2) == mean_boundary_fscore(perm[a], perm[b], 2, 2)

    def test_negative_slack(self):
        with pytest.raises(ValueError):
            boundary_fscore(np.zeros((2, 2)), np.zeros((2, 2)), 0, -1)

    def test_mean_over_present_classes(self):
        a = square(16, 2, 2, 6)
        b = square(16, 3, 2, 6)
        expected = np.mean([boundary_fscore(a, b, c, 0) for c in (0, 1)])
        assert mean_boundary_fscore(a, b, 5, 0) == expected


class TestIouFromConfusion:
    def test_exact_mean(self):
        mean, per_class = iou_from_confusion([[1, 0], [1, 2]])
        assert mean == 7 / 12 and per_class.tolist() == [0.5, 2 / 3]

    def test_empty_class(self):
        mean, per_class = iou_from_confusion([[3, 0, 0], [0, 0, 0], [0, 0, 1]])
        assert mean == 1.0 and np.isnan(per_class[1])

    def test_all_empty(self):
        assert np.isnan(iou_from_confusion(np.zeros((2, 2)))[0])
