"""
mIoU and boundary F-score
=========================

Boundary F matches the one-pixel contours of prediction and ground truth,
allowing a Chebyshev slack of a few pixels.
"""
import numpy as np

from gald.metrics import BOUNDARY_SLACKS, boundary_fscore, miou

gt = np.zeros((48, 48), dtype=int)
gt[12:28, 12:28] = 1
for shift in (0, 1, 5):
    pred = np.roll(gt, shift, axis=1)
    scores = "  ".join(f"@{s}px {boundary_fscore(pred, gt, 1, s):.3f}" for s in BOUNDARY_SLACKS)
    print(f"shift {shift}: mIoU {miou(pred, gt, 2)[0]:.3f}  boundary F {scores}")

# the textbook 2x2 case
mean, per_class = miou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)
print("hand case:", per_class, mean, mean == 7 / 12)
