"""
Training a small segmentation network
=====================================

A few epochs on a couple of hundred samples, then a comparison with the
fitted threshold baseline.  Expect modest numbers: the acceptance suite uses
800 samples and 30 epochs.
"""

import time

from chromoseg import baselines as bl
from chromoseg import datagen as dg
from chromoseg import evaluation as ev
from chromoseg import network as nw
from chromoseg import preprocess as pp

ds = pp.clean_dataset(dg.generate_dataset(dg.GenConfig(n_samples=200, seed=3)))
train_set, val_set, test_set = pp.split(ds, pp.SplitSpec(seed=0))
print("split sizes:", len(train_set), len(val_set), len(test_set))

net = nw.NetConfig()
print("parameters:", net.param_count())


def log(rec):
    ious = ", ".join("n/a" if v is None else f"{v:.2f}" for v in rec["val_iou"])
    print(f"epoch {rec['epoch']}: train {rec['train_loss']:.4f} val {rec['val_loss']:.4f} iou [{ious}]")


t0 = time.time()
params, history = nw.train(nw.init_params(net, 0), train_set, val_set,
                           nw.TrainConfig(epochs=5, seed=0), log=log)
print(f"trained in {time.time() - t0:.0f}s")

pred = nw.predict(params, test_set.images)
print(ev.evaluate(pred, test_set.labels).to_text())

# thresholds cannot tell the two chromosomes apart, so compare on merged classes
model = bl.fit_threshold(train_set.images, train_set.labels)
merged = ev.evaluate(ev.merge_chromosomes(pred), ev.merge_chromosomes(test_set.labels))
base = bl.threshold_report(model, test_set.images, test_set.labels)
print("overlap IOU, network:", round(merged.per_class_global[3], 3),
      " threshold:", round(base.per_class_global[3], 3))
