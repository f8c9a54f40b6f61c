"""
COCO-style AP by hand
=====================

Greedy score-ordered matching, 101-point interpolated precision and the
0.50:0.95 IoU sweep, checked on cases small enough to work by hand.
"""

from pyramid_transformer.detection_eval import Box, Detection, GroundTruthBox, evaluate, iou

gt = GroundTruthBox("img0", 0, Box(0, 0, 10, 10))

# a box shifted by 2 px overlaps 8x10 / (100 + 100 - 80) = 2/3
shifted = Box(2, 0, 12, 10)
print("IoU", iou(gt.box, shifted))

# passes 0.50..0.65, fails from 0.70 up: AP = 4 / 10
report = evaluate([Detection("img0", 0, shifted, 0.9)], [gt])
print("AP50", report.map_50, "AP75", report.map_75, "AP", report.map)

# a confident false positive ahead of the true positive halves AP
dets = [Detection("img0", 0, Box(40, 40, 50, 50), 0.95), Detection("img0", 0, gt.box, 0.6)]
print("FP then TP:", evaluate(dets, [gt]).map_50)
print(evaluate(dets, [gt]).table())
