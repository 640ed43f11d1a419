"""Datasets: CIFAR-10 binary records, augmentation, and planted teacher tasks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .cell import Genotype, Network, NetworkSpec

__all__ = [
    "RECORD_BYTES", "Dataset", "DataError", "PlantedTask", "read_cifar_records",
    "write_cifar_records", "load_cifar_binary", "box_downsample", "normalize",
    "augment", "flip", "crop", "make_planted_task", "batches",
]

RECORD_BYTES = 1 + 3 * 32 * 32


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,)
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, dict(self.meta))

    def split(self, val_fraction: float = 0.2) -> tuple["Dataset", "Dataset"]:
        """Deterministic head/tail split; the tail is the validation part."""
        n_val = int(round(len(self) * val_fraction))
        cut = len(self) - n_val
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))


def read_cifar_records(path, take: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (N, 3, 32, 32) and labels from one binary batch file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from None
    if len(buf) % RECORD_BYTES:
        raise DataError(f"{path}: size {len(buf)} is not a multiple of {RECORD_BYTES} (truncated?)")
    n = len(buf) // RECORD_BYTES
    if take is not None:
        if take > n:
            raise DataError(f"{path}: asked for {take} records, file holds {n}")
        n = take
    rec = np.frombuffer(buf, dtype=np.uint8, count=n * RECORD_BYTES).reshape(n, RECORD_BYTES)
    return rec[:, 1:].reshape(n, 3, 32, 32).copy(), rec[:, 0].astype(np.int64)


def write_cifar_records(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images)
    if images.shape[1:] != (3, 32, 32) or images.dtype != np.uint8:
        raise DataError("records need uint8 images of shape (N, 3, 32, 32)")
    rec = np.empty((len(images), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


def box_downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Repeated 2x2 box averaging down to ``size`` pixels per side."""
    x = np.asarray(images, dtype=np.float64)
    while x.shape[-1] > size:
        if x.shape[-1] % 2:
            raise DataError(f"cannot halve odd size {x.shape[-1]}")
        b, c, h, w = x.shape
        x = x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    if x.shape[-1] != size:
        raise DataError(f"resize target {size} is not a power-of-two fraction of the input")
    return x


def normalize(images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel standardisation; returns (normalised, mean, std)."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return (images - mean[None, :, None, None]) / std[None, :, None, None], mean, std


def load_cifar_binary(path, take: int | None = None, resize_to: int = 32, dtype=np.float32) -> Dataset:
    """Read a file or every ``data_batch_*.bin`` in a directory."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("data_batch_*.bin"))
        if not files:
            raise DataError(f"{path}: no data_batch_*.bin files")
    else:
        files = [path]
    imgs, labs, need = [], [], take
    for f in files:
        if need is not None and need <= 0:
            break
        size = f.stat().st_size // RECORD_BYTES if f.exists() else 0
        x, y = read_cifar_records(f, None if need is None else min(need, size) or None)
        imgs.append(x)
        labs.append(y)
        if need is not None:
            need -= len(y)
    if need is not None and need > 0:
        raise DataError(f"{path}: {take} records requested, only {take - need} available")
    raw = box_downsample(np.concatenate(imgs) / 255.0, resize_to)
    x, mean, std = normalize(raw)
    meta = {"source": str(path), "norm_mean": mean.tolist(), "norm_std": std.tolist(), "resize": resize_to}
    return Dataset(x.astype(dtype), np.concatenate(labs), 10, meta)


# ----------------------------------------------------------------------------
# augmentation


def flip(batch: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = batch.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def crop(padded: np.ndarray, offsets: np.ndarray, size: int) -> np.ndarray:
    out = np.empty(padded.shape[:2] + (size, size), dtype=padded.dtype)
    for n, (r, c) in enumerate(offsets):
        out[n] = padded[n, :, r : r + size, c : c + size]
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int | None = None) -> np.ndarray:
    """Zero-pad, random crop back to size, then flip horizontally with p=0.5.

    The pad is 4 pixels at 32x32 and shrinks proportionally with resolution.
    """
    n, _, h, w = batch.shape
    if pad is None:
        pad = max(1, round(4 * h / 32))
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return flip(crop(padded, offsets, h), rng.random(n) < 0.5)


def batches(data: Dataset, batch_size: int, rng: np.random.Generator | None = None, drop_last: bool = True):
    """Yield (images, labels); shuffled when ``rng`` is given."""
    idx = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    stop = len(idx) - (len(idx) % batch_size if drop_last else 0)
    for s in range(0, stop, batch_size):
        sel = idx[s : s + batch_size]
        if len(sel):
            yield data.images[sel], data.labels[sel]


# ----------------------------------------------------------------------------
# planted tasks


@dataclass
class PlantedTask:
    genotype: Genotype
    spec: NetworkSpec
    teacher: Network
    seed: int
    noise: float = 0.0

    def label(self, x: np.ndarray) -> np.ndarray:
        # one pass over the whole set: batch-norm statistics then match the
        # input distribution rather than a particular mini-batch
        return np.argmax(self.teacher(x, genotype=self.genotype).data, axis=1)


def make_planted_task(genotype: Genotype, spec: NetworkSpec, seed: int, n: int = 1280, latent_dim: int = 4,
                      keep: float = 0.3, noise: float = 0.1, margin_target: float | None = 4.0,
                      dtype=np.float32) -> tuple[PlantedTask, Dataset]:
    """Random frozen teacher running ``genotype``; its argmax labels the inputs.

    Inputs are random mixtures of ``latent_dim`` smooth prototype images plus
    white noise of scale ``noise``.  The classifier bias is shifted until the
    classes are equally frequent, then only the ``keep`` fraction of draws with
    the widest top-two logit margin is retained (class-balanced), so labels
    are stable under small perturbations of the teacher.  Finally the
    teacher's classifier is scaled so the 10% quantile of kept margins equals
    ``margin_target`` nats.
    """
    if not 0 < keep <= 1:
        raise ValueError("keep must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    teacher = Network(spec, rng, dtype=np.float64)
    shape = (spec.in_channels, spec.image_size, spec.image_size)
    protos = uniform_filter(rng.standard_normal((latent_dim,) + shape), size=(1, 1, 3, 3), mode="wrap")
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    k = spec.num_classes
    m = int(np.ceil(n / keep))
    x = np.tensordot(rng.standard_normal((m, latent_dim)), protos, axes=1) + noise * rng.standard_normal((m,) + shape)
    task = PlantedTask(genotype, spec, teacher, seed, noise)
    logits = teacher(x, genotype=genotype).data
    b = teacher.params["classifier.b"]
    for _ in range(300):
        share = np.bincount(np.argmax(logits + b.data, axis=1), minlength=k) / m
        b.data = b.data - 0.5 * np.std(logits) * (share - 1.0 / k)
    logits = logits + b.data
    top2 = np.sort(logits, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    y = np.argmax(logits, axis=1)
    idx = []
    for c in range(k):
        ic = np.flatnonzero(y == c)
        idx.append(ic[np.argsort(-margin[ic], kind="stable")][: n // k])
    idx = np.concatenate(idx)
    idx = idx[rng.permutation(len(idx))]
    if margin_target is not None:
        # positive rescaling leaves every label unchanged but makes the
        # teacher confident, so its own loss on the kept draws is small
        scale = margin_target / max(np.quantile(margin[idx], 0.1), 1e-12)
        teacher.params["classifier.w"].data = teacher.params["classifier.w"].data * scale
        b.data = b.data * scale
    # final labels come from one teacher pass over exactly the shipped inputs;
    # the selection pass above saw batch statistics of every draw
    xs = x[idx].astype(dtype)
    meta = {"planted": genotype.to_text(), "seed": seed, "noise": noise, "latent_dim": latent_dim, "keep": keep}
    return task, Dataset(xs, task.label(xs.astype(np.float64)), k, meta)
