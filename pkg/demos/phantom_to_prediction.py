"""
From a synthetic phantom to a predicted lesion mask
===================================================

Builds a few phantoms, trains a small 2-D U-Net on their lesion slices and
writes an overlay of ground truth and prediction to ``overlay.svg``.
Runs in well under a minute on one CPU core.
"""

import numpy as np

from strokeseg.data import PhantomConfig, Protocol2D, generate_phantom, slices_dataset
from strokeseg.models import ModelSpec, build_model
from strokeseg.report import overlay_svg
from strokeseg.train import TrainConfig, evaluate, predict, train

# Phantoms are ellipsoidal "brains" with darker ellipsoidal lesions.
vols = [generate_phantom(PhantomConfig(seed=s, extents=(48, 48, 24), lesion_radius_mm=(3.0, 9.0)))
        for s in range(5)]
print(vols[0].subject_id, vols[0].extents, "lesion voxels:", int(vols[0].mask.sum()))

# Slices too small for the standard crop box go through at native size.
protocol = Protocol2D(box=None, size=48)
train_ds = slices_dataset(vols[:4], "train", protocol)
test_ds = slices_dataset(vols[4:], "test", protocol)
print(len(train_ds), "training slices,", len(test_ds), "test slices")

# An eighth of the published width keeps this fast.
model = build_model(ModelSpec("unet2d", width_scale=8, input_extents=(48, 48), dropout=0.0), seed=0)
cfg = TrainConfig(lr=3e-3, epochs=15, batch_size=8, scheduler="cosine_annealing", seed=0)
model, record = train(model, train_ds, train_ds, cfg, log=print)

report = evaluate(model, test_ds)
print(report.summary("unet2d"))

# Overlay for the test slice with the most lesion.
i = int(np.argmax(test_ds.masks.reshape(len(test_ds), -1).sum(1)))
prob = predict(model, test_ds.images[i:i + 1])[0, 0]
svg = overlay_svg(test_ds.images[i, 0], test_ds.masks[i, 0], prob >= 0.5, title=test_ds.ids[i])
with open("overlay.svg", "w") as fh:
    fh.write(svg)
print("wrote overlay.svg (green: missed, red: false alarm, gold: hit)")
