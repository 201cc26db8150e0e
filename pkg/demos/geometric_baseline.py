"""
Contour geometry on a crossing
==============================

The classical approach: trace the outline of a cross-shaped cluster,
simplify it, find the concave corners, and take the quadrilateral they span
as the overlap.
"""

import numpy as np

from chromoseg import baselines as bl
from chromoseg.evaluation import iou

# two bars crossing at right angles
mask = np.zeros((40, 40), bool)
mask[15:23, 4:36] = True
mask[4:36, 16:24] = True
truth = np.zeros((40, 40), np.uint8)
truth[mask] = 1
truth[15:23, 16:24] = 3

contour = bl.trace_contour(mask)
poly = bl.polygonal_approx(contour, epsilon=2.0)
print(len(contour), "boundary pixels ->", len(poly), "polygon vertices")

reflex = bl.find_remarkable_points(poly)
corners = bl.snap_to_concave_corners(poly.vertices[reflex], mask)
print("concave corners (x, y):", corners.tolist())

domain = bl.crossing_domain(corners, mask)
pred = mask.astype(np.uint8)
pred[domain] = 3
print("overlap IOU:", iou(pred, truth, 3))

# the four arms can be joined into two chromosomes in three ways; choosing
# between them needs more than geometry
for pairing in bl.enumerate_pairings(["north", "east", "south", "west"]):
    print(pairing)

# a blob without notches gives the method nothing to work with
yy, xx = np.mgrid[:40, :40]
blob = (yy - 20) ** 2 + (xx - 20) ** 2 < 100
_, applicable = bl.geometric_resolve(blob * 0.5, bl.ThresholdModel(0.2, 0.7))
print("blob applicable:", applicable)
