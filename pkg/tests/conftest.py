import gzip

import numpy as np
import pytest

from clwb import data as dt


@pytest.fixture(scope="session")
def digits_idx(tmp_path_factory):
    """The bundled 8x8 handwritten-digits corpus written as gzip IDX files.

    Stand-in for MNIST at desk scale: same format, same 10-digit task
    structure, stratified 80/20 train/test split, deterministic.
    """
    sklearn = pytest.importorskip("sklearn.datasets")
    d = sklearn.load_digits()
    images = np.round(d.images / 16.0 * 255).astype(np.uint8)
    labels = d.target.astype(np.intp)
    rng = np.random.default_rng(0)
    test_mask = np.zeros(len(labels), dtype=bool)
    for c in range(10):
        members = np.flatnonzero(labels == c)
        test_mask[rng.permutation(members)[: len(members) // 5]] = True

    root = tmp_path_factory.mktemp("digits")
    paths = {}
    for name, mask in (("train", ~test_mask), ("test", test_mask)):
        img = root / f"{name}-images.idx.gz"
        lbl = root / f"{name}-labels.idx.gz"
        img.write_bytes(gzip.compress(dt.serialize_idx(images[mask] / 255.0)))
        lbl.write_bytes(gzip.compress(dt.serialize_idx(labels[mask])))
        paths[f"{name}_images"] = str(img)
        paths[f"{name}_labels"] = str(lbl)
    return paths


def digits_config_text(paths, *, seed=7, out="runs", tasks=5,
                       classes_per_task=2, backbone="hat", hidden="100, 100",
                       epochs=40, lr=0.1, batch=32, lambdas="0.1, 0.05",
                       extra=""):
    return f"""
[experiment]
seed = {seed}
out = {out}

[data]
source = idx
train_images = {paths['train_images']}
train_labels = {paths['train_labels']}
test_images = {paths['test_images']}
test_labels = {paths['test_labels']}

[tasks]
count = {tasks}
classes_per_task = {classes_per_task}

[backbone]
kind = {backbone}
hidden = {hidden}
epochs = {epochs}
lr = {lr}
batch = {batch}
lambdas = {lambdas}
{extra}
"""


@pytest.fixture()
def synth_config_text(tmp_path):
    def make(seed=11, tasks=3, dim=4, epochs=15, backbone="hat", extra=""):
        return f"""
[experiment]
seed = {seed}
out = {tmp_path / 'run'}

[data]
source = synthetic
dim = {dim}
separation = 8.0
per_class = 40

[tasks]
count = {tasks}
classes_per_task = 2

[backbone]
kind = {backbone}
hidden = 16
epochs = {epochs}
lr = 0.1
batch = 8
{extra}
"""
    return make
