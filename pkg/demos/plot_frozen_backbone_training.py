"""
Training a head on a frozen backbone
====================================

A classification head is grafted onto a convolutional backbone whose
weights never change. Random backbone weights stand in for pretrained
ones here so the demo runs offline in well under a minute on a CPU; pass
``pretrained=True`` to fetch the ImageNet weights instead.
"""

import matplotlib

matplotlib.use("Agg")
import numpy as np
import torch
from torch.utils.data import TensorDataset

from path24.dataset import PreprocessConfig, preprocess_array
from path24.model import BackboneSpec, HeadConfig, build_classifier, state_hash, trainable_parameter_count
from path24.training import TrainConfig, plot_curves, train

torch.set_num_threads(1)
SIZE = 64

# %%
# Three "scans", each a noisy solid colour.
rng = np.random.default_rng(0)
config = PreprocessConfig("rgb", SIZE)


def make_split(n_per_class):
    xs, ys = [], []
    for label, colour in enumerate([(190, 60, 90), (90, 170, 60), (70, 80, 200)]):
        for _ in range(n_per_class):
            img = np.clip(np.array(colour) + rng.integers(-20, 21, (SIZE, SIZE, 3)), 0, 255)
            xs.append(torch.from_numpy(preprocess_array(img.astype(np.uint8), config)).permute(2, 0, 1))
            ys.append(label)
    return TensorDataset(torch.stack(xs), torch.tensor(ys))


train_set, val_set = make_split(20), make_split(5)

# %%
# Only the head is trainable. Validation runs in eval mode on the batch-norm
# running statistics, which need a few epochs to settle with only two
# batches per epoch, so validation accuracy lags the training accuracy.
model = build_classifier(BackboneSpec("resnet50", pretrained=False), HeadConfig(num_classes=3), config)
before = state_hash(model.backbone)
print("trainable parameters:", trainable_parameter_count(model))

model, report = train(model, train_set, val_set, TrainConfig(epochs=10, batch_size=32))
for e in report.epochs:
    print(f"epoch {e.epoch:2d}  train acc {e.train_acc:.3f}  val acc {e.val_acc:.3f}")
print("backbone unchanged:", state_hash(model.backbone) == before)

plot_curves(report, "curves.png")
