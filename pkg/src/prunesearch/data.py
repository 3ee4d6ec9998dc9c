"""Synthetic image classification data: class-coded blobs or stripe textures.

Regeneration from the same spec is bitwise deterministic; train and eval
splits come from independent seeded substreams of the same generator.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

GENERATORS = ("gaussian-blobs", "striped-textures")


@dataclass
class SyntheticDatasetSpec:
    n_train: int = 2048
    n_eval: int = 512
    classes: int = 4
    image_size: int = 32
    channels: int = 1
    generator: str = "gaussian-blobs"
    noise_sigma: float = 0.25
    seed: int = 7

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {GENERATORS}")
        for n, what in ((self.n_train, "n_train"), (self.n_eval, "n_eval")):
            if n % self.classes != 0:
                raise ValueError(f"{what}={n} is not divisible by classes={self.classes}")


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    spec: SyntheticDatasetSpec


def _blob_means(spec):
    """One smooth bump per class on a grid of centers."""
    s = spec.image_size
    grid = int(np.ceil(np.sqrt(spec.classes)))
    yy, xx = np.mgrid[0:s, 0:s]
    means = []
    for c in range(spec.classes):
        cy = (c // grid + 0.5) * s / grid
        cx = (c % grid + 0.5) * s / grid
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (s / 6.0) ** 2)))
        means.append(np.tile(bump, (spec.channels, 1, 1)))
    return np.stack(means)


def _stripe_means(spec):
    """One sinusoidal grating orientation per class."""
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    means = []
    for c in range(spec.classes):
        theta = np.pi * c / spec.classes
        phase = (np.cos(theta) * xx + np.sin(theta) * yy) * (2 * np.pi / (s / 4.0))
        means.append(np.tile(np.sin(phase), (spec.channels, 1, 1)))
    return np.stack(means)


def _split(spec, n, stream):
    rng = np.random.default_rng([spec.seed, stream])
    means = _blob_means(spec) if spec.generator == "gaussian-blobs" else _stripe_means(spec)
    per_class = n // spec.classes
    labels = np.repeat(np.arange(spec.classes), per_class)
    images = means[labels] + rng.normal(0.0, spec.noise_sigma, size=(n, spec.channels,
                                                                     spec.image_size, spec.image_size))
    order = rng.permutation(n)
    return np.ascontiguousarray(images[order]), np.ascontiguousarray(labels[order])


def generate(spec):
    train_x, train_y = _split(spec, spec.n_train, 0)
    eval_x, eval_y = _split(spec, spec.n_eval, 1)
    return Dataset(train_x, train_y, eval_x, eval_y, spec)


def save_dataset(ds, out_dir):
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr, dtype in (("train_images", ds.train_x, "<f8"),
                             ("train_labels", ds.train_y, "<i8"),
                             ("eval_images", ds.eval_x, "<f8"),
                             ("eval_labels", ds.eval_y, "<i8")):
        path = out_dir / f"{name}.bin"
        np.ascontiguousarray(arr.astype(dtype)).tofile(path)
        files[name] = {"file": path.name, "shape": list(arr.shape), "dtype": dtype}
    manifest = {"spec": asdict(ds.spec), "files": files}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_dataset(in_dir):
    manifest = json.loads((in_dir / "manifest.json").read_text())
    arrays = {}
    for name, meta in manifest["files"].items():
        arrays[name] = np.fromfile(in_dir / meta["file"], dtype=meta["dtype"]).reshape(meta["shape"])
    spec = SyntheticDatasetSpec(**manifest["spec"])
    return Dataset(arrays["train_images"], arrays["train_labels"],
                   arrays["eval_images"], arrays["eval_labels"], spec)
