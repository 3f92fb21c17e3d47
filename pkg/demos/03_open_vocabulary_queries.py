"""
Open-vocabulary queries on a trained field
==========================================

Labels come from cosine matching between the distilled semantic features and
text embeddings; no label is ever used for training. Here the "text
embeddings" are the scene's planted class vectors.

Needs ``demo_checkpoint.ooc`` from ``02_train_and_reconstruct.py``.
"""

import numpy as np

from occlang.evaluation import observed_mask, seg_metrics, transfer_labels
from occlang.query import build_occ_feature_map, query_similarity, render_segmentation, segment_3d
from occlang.synthetic import generate_synthetic, two_box_room
from occlang.trainer import read_checkpoint_fields

fields = read_checkpoint_fields("demo_checkpoint")
scene = two_box_room()
frames, gt = generate_synthetic(scene, 40, (128, 128), seed=0)
prompts = scene.prompts()

# %%
# Decode the occupied lattice once, then label every occupied point.
res = np.round(scene.bounds.extent / 0.04).astype(int) + 1
fmap = build_occ_feature_map(fields, res)
labels = segment_3d(fmap, prompts)
print(f"{fmap.n_occupied} occupied points:", dict(zip(prompts.labels, np.bincount(labels, minlength=4).tolist())))

# %%
# Carry the labels to observed ground-truth surface samples and score them.
pts, cls, normals = scene.sample_surface(1e4, seed=1, with_normals=True)
seen = observed_mask(pts, frames, normals=normals)
pred = transfer_labels(fmap.points, labels, pts[seen], 0.08)
m = seg_metrics(pred, cls[seen], scene.n_classes)
print("mIoU %.3f, per class %s" % (m.miou, np.round(m.iou, 3)))

# %%
# A single query embedding gives a similarity score per point.
sim = query_similarity(fmap, prompts.embeddings[2])
print(f"points matching '{prompts.labels[2]}' with cosine > 0.8: {(sim > 0.8).sum()}")

# %%
# Per-pixel labels from a rendered view agree with the analytic classes.
view = render_segmentation(fields, frames.frames[0].pose, frames.intrinsics, prompts, 128, 128, n_samples=64)
valid = gt.classes[0] >= 0
print("pixel accuracy in view 0: %.3f" % np.mean(view[valid] == gt.classes[0][valid]))
