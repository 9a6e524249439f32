"""The IRSTD metrics on hand-drawn masks.

Pixel-level IoU/nIoU and target-level Pd/Fa answer different questions. A
prediction that overlaps its target poorly still counts as a detection when
the centroids are close, and a stray blob in empty sky shows up in Fa.

    python demos/02_metrics_walkthrough.py
"""
import numpy as np

from mscanet.metrics import compute_report, match_targets, roc_curve, even_thresholds


def square(shape, centre, half=1):
    m = np.zeros(shape, bool)
    m[centre[0] - half : centre[0] + half + 1, centre[1] - half : centre[1] + half + 1] = True
    return m


shape = (64, 64)
gt = square(shape, (10, 10)) | square(shape, (40, 20)) | square(shape, (50, 50), 0)

# a prediction that finds the first target slightly off-centre, misses the
# single-pixel one, and adds a blob in empty sky
pred = square(shape, (11, 11)) | square(shape, (40, 20)) | square(shape, (25, 55))

m = match_targets(pred, gt, dist_px=3)
print("matched %d of %d targets, %d false-alarm pixels" % m)

report = compute_report([pred.astype(float)], [gt], threshold=0.5)
print(report.summary())
print("raw counts: TP=%d T=%d P=%d" % (report.tp[0], report.t[0], report.p[0]))

# a soft prediction: the binary one plus low-level noise, swept over thresholds
rng = np.random.default_rng(0)
prob = np.clip(0.8 * pred + 0.15 * rng.random(shape), 0, 0.999)
print("\nthreshold    Fa(1e-6)   Pd")
for t, fa, pd in roc_curve([prob], [gt], even_thresholds(9)):
    print(f"{t:9.2f} {fa * 1e6:11.1f} {pd:5.2f}")
