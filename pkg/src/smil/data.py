"""Bimodal datasets: ingestion, pairing, the modality-ratio mask, and
synthetic tasks.

A dataset holds every sample's image, its audio feature map, and a boolean
presence flag per sample: the modality-complete subset (both modalities)
and the modality-incomplete subset (image only) partition the training
split. Validation data always keeps both modalities; missing-at-test is an
evaluation-mode switch, not a data property.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from smil.rand import RandomStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

IMAGE_SHAPE = (28, 28)
AUDIO_SHAPE = (20, 20)


class IdxParseError(ValueError):
    """Structured IDX parse failure; carries the byte offset."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class PairingError(ValueError):
    """Modalities cannot be paired class-by-class."""


@dataclass(frozen=True)
class BimodalSample:
    modality1: np.ndarray  # (28, 28) in [0, 1]
    modality2: np.ndarray | None  # (20, 20) feature map, None when missing
    label: int | np.ndarray  # class id, or bit-vector for multi-label tasks


@dataclass(frozen=True)
class MaskedDataset:
    images: np.ndarray  # (N, 28, 28)
    audio: np.ndarray  # (N, 20, 20); rows with has_audio False are inert
    labels: np.ndarray  # (N,) int, or (N, C) bits for multi-label
    has_audio: np.ndarray  # (N,) bool
    num_classes: int
    eta: float
    seed: int
    split_tag: str  # train | validation

    def __post_init__(self):
        n = len(self.images)
        if not (len(self.audio) == len(self.labels) == len(self.has_audio) == n):
            raise PairingError("modality, label, and mask lengths differ")
        if self.labels.ndim == 1 and n and int(self.labels.max()) >= self.num_classes:
            raise PairingError("label outside declared class count")

    def __len__(self):
        return len(self.images)

    @property
    def multi_label(self):
        return self.labels.ndim == 2

    def sample(self, i) -> BimodalSample:
        return BimodalSample(
            modality1=self.images[i],
            modality2=self.audio[i] if self.has_audio[i] else None,
            label=self.labels[i],
        )

    def complete_indices(self):
        """Indices of the modality-complete subset."""
        return np.flatnonzero(self.has_audio)

    def incomplete_indices(self):
        """Indices of the modality-incomplete subset."""
        return np.flatnonzero(~self.has_audio)

    def subset(self, indices, split_tag=None):
        return replace(
            self,
            images=self.images[indices],
            audio=self.audio[indices],
            labels=self.labels[indices],
            has_audio=self.has_audio[indices],
            split_tag=split_tag or self.split_tag,
        )


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise IdxParseError(path, fh.tell() - len(data), f"truncated while reading {what}")
    return data


def load_idx(images_path, labels_path):
    """Read paired IDX image/label files: pixels scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(fh, 16, images_path, "image header"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxParseError(images_path, 0, f"bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = _read_exact(fh, count * rows * cols, images_path, f"{count} images")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows, cols).astype(np.float64) / 255.0

    with open(labels_path, "rb") as fh:
        magic, label_count = struct.unpack(">II", _read_exact(fh, 8, labels_path, "label header"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxParseError(labels_path, 0, f"bad label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        raw = _read_exact(fh, label_count, labels_path, f"{label_count} labels")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if label_count != count:
        raise IdxParseError(labels_path, 8, f"{label_count} labels for {count} images")
    return images, labels


def write_idx(images_path, labels_path, images, labels):
    """Inverse of load_idx; images given in [0, 1]."""
    images = np.asarray(images)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


def round_half_up(x):
    return int(np.floor(x + 0.5))


def pair_by_class(image_labels, audio_labels, num_classes=10):
    """Pair the two modalities by digit class and per-class rank.

    Returns (image_order, audio_order): equal-length index arrays such that
    position k of each selects one paired sample.
    """
    image_order, audio_order = [], []
    for c in range(num_classes):
        img_idx = np.flatnonzero(np.asarray(image_labels) == c)
        aud_idx = np.flatnonzero(np.asarray(audio_labels) == c)
        if len(img_idx) != len(aud_idx):
            raise PairingError(
                f"class {c}: {len(img_idx)} images vs {len(aud_idx)} audio clips"
            )
        image_order.extend(img_idx)
        audio_order.extend(aud_idx)
    return np.array(image_order, dtype=np.int64), np.array(audio_order, dtype=np.int64)


def pair_and_split(images, image_labels, audio, audio_labels, train_fraction=0.7, seed=0, num_classes=10):
    """Pair modalities class-by-class, shuffle with the seed, split 70/30.

    Both returned datasets are unmasked (eta 1): masking is applied to the
    train split separately.
    """
    img_order, aud_order = pair_by_class(image_labels, audio_labels, num_classes)
    n = len(img_order)
    perm = RandomStream(seed).child("split").permutation(n)
    img_order, aud_order = img_order[perm], aud_order[perm]

    n_train = round_half_up(train_fraction * n)
    full = MaskedDataset(
        images=np.asarray(images)[img_order],
        audio=np.asarray(audio)[aud_order],
        labels=np.asarray(image_labels, dtype=np.int64)[img_order],
        has_audio=np.ones(n, dtype=bool),
        num_classes=num_classes,
        eta=1.0,
        seed=seed,
        split_tag="train",
    )
    train = full.subset(np.arange(n_train), split_tag="train")
    validation = full.subset(np.arange(n_train, n), split_tag="validation")
    return train, validation


def mask_modality(train: MaskedDataset, eta: float, seed: int) -> MaskedDataset:
    """Keep modality 2 for exactly round(eta * N) samples (half-up).

    The kept samples form the modality-complete subset; selection is a
    seeded uniform shuffle of indices. Never applied to validation data.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    if train.split_tag != "train":
        raise ValueError("masking applies to the train split only")
    n = len(train)
    keep = round_half_up(eta * n)
    order = RandomStream(seed).child("mask").permutation(n)
    has_audio = np.zeros(n, dtype=bool)
    has_audio[order[:keep]] = True
    return replace(train, has_audio=has_audio, eta=float(eta), seed=seed)


def synth_bimodal(num_samples, num_classes, feature_dims, noise_scale, multi_label=False, seed=0):
    """Synthetic bimodal dataset: both views are fixed random linear maps of
    a shared class-dependent latent plus independent Gaussian noise.

    View 1 is shaped like an image (28x28, squashed into [0, 1]), view 2
    like a feature map (20x20), so the full model stack runs unchanged.
    """
    if feature_dims < 2 or num_classes < 2:
        raise ValueError("need feature_dims >= 2 and num_classes >= 2")
    stream = RandomStream(seed).child("synth")
    gen = stream.generator

    prototypes = gen.standard_normal((num_classes, feature_dims))
    # map scaling keeps expected class separation ~2*gain regardless of the
    # view dimension, so noise_scale=1 leaves each view imperfect but usable
    gain = 1.85
    d1, d2 = int(np.prod(IMAGE_SHAPE)), int(np.prod(AUDIO_SHAPE))
    map1 = gen.standard_normal((d1, feature_dims)) * (gain / np.sqrt(d1 * feature_dims))
    map2 = gen.standard_normal((d2, feature_dims)) * (gain / np.sqrt(d2 * feature_dims))

    if multi_label:
        labels = (gen.uniform(0.0, 1.0, (num_samples, num_classes)) < 0.35).astype(np.int64)
        active = labels.sum(axis=1, keepdims=True)
        latent = (labels @ prototypes) / np.maximum(active, 1)
    else:
        labels = gen.integers(0, num_classes, num_samples)
        latent = prototypes[labels]

    raw1 = latent @ map1.T + noise_scale * gen.standard_normal((num_samples, map1.shape[0]))
    raw2 = latent @ map2.T + noise_scale * gen.standard_normal((num_samples, map2.shape[0]))
    # identical /6 scaling keeps the two views commensurate for fusion
    images = np.clip(0.5 + raw1 / 6.0, 0.0, 1.0).reshape(num_samples, *IMAGE_SHAPE)
    audio = (raw2 / 6.0).reshape(num_samples, *AUDIO_SHAPE)

    return MaskedDataset(
        images=images,
        audio=audio,
        labels=labels,
        has_audio=np.ones(num_samples, dtype=bool),
        num_classes=num_classes,
        eta=1.0,
        seed=seed,
        split_tag="train",
    )


def split_dataset(ds: MaskedDataset, train_fraction, seed):
    """Seeded shuffle + split of an unmasked dataset."""
    n = len(ds)
    perm = RandomStream(seed).child("split").permutation(n)
    n_train = round_half_up(train_fraction * n)
    train = ds.subset(perm[:n_train], split_tag="train")
    validation = ds.subset(perm[n_train:], split_tag="validation")
    return train, validation


def save_manifest(path, ds: MaskedDataset):
    """One record per sample: index<TAB>label<TAB>has_audio(0|1)."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            fh.write(f"{i}\t{int(ds.labels[i])}\t{int(ds.has_audio[i])}\n")


def load_manifest(path):
    """Returns (labels, has_audio) in manifest order."""
    labels, has_audio = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise PairingError(f"{path}: malformed manifest line {line_no + 1}")
            idx, label, flag = (int(p) for p in parts)
            if idx != line_no:
                raise PairingError(f"{path}: non-sequential index at line {line_no + 1}")
            labels.append(label)
            has_audio.append(bool(flag))
    return np.array(labels, dtype=np.int64), np.array(has_audio, dtype=bool)
