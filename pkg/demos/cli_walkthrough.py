"""
Command-line walkthrough
========================

The same pipeline driven through ``path24``: ingest a dataset tree,
train, evaluate and predict. A tiny synthetic tree and a small backbone
keep the run short.
"""

import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from path24.cli import main

work = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)
colours = [(200, 40, 40), (40, 200, 40), (40, 40, 200)]


def save(path, colour):
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.clip(np.array(colour) + rng.integers(-10, 11, (48, 48, 3)), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


for k, colour in enumerate(colours):
    for i in range(12):
        save(work / "data" / f"s{k}" / f"p{i}.png", colour)
    for i in range(4):
        save(work / "data" / "test" / f"s{k}_{i}.png", colour)

# %%
# Ingest writes the manifest. Training reads a flat ``key = value`` config.
main(["ingest", str(work / "data"), "--out", str(work / "manifest.csv")])

(work / "run.cfg").write_text(f"""\
manifest_path = {work / "manifest.csv"}
backbone = resnet18
pretrained = false
output_dir = {work / "runs"}
head.num_classes = 3
preprocess.target_size = 48
train.epochs = 5
train.batch_size = 8
""")
main(["train", "--config", str(work / "run.cfg")])
(run,) = (work / "runs").iterdir()
print(sorted(p.name for p in run.iterdir()))

# %%
# Evaluate on the test split, then classify a new image.
main(["evaluate", str(run / "best.pt"), str(run / "manifest.csv"), "--out", str(work / "eval")])
save(work / "new.png", colours[2])
main(["predict", str(run / "best.pt"), str(work / "new.png")])
