"""Dataset container, normalization, patching, subject splits, synthetic EEG.

Container layout (one directory):
    meta.json   sampling_rate, epoch_samples, channel_names, montage, class_names,
                epochs: [{subject, label, offset}], offset in float32 elements
    data.bin    little-endian float32, each epoch row-major [C, epoch_samples]
    <montage>   electrode file, ``NAME x y z`` per line
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .geometry import Montage, great_circle, load_montage, save_montage, synthetic_ring_montage

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
SPLITS = ("train", "val", "test")


@dataclass
class Recording:
    subject_id: str
    label: int
    samples: np.ndarray  # [C, T]
    sampling_rate: float


@dataclass
class EpochSet:
    """Normalized, patched epochs [N, C, W, t] plus per-epoch subject and label."""

    x: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    montage: Montage
    class_names: list
    sampling_rate: float
    split_of: dict = field(default_factory=dict)  # subject -> split name

    @property
    def n_patches(self):
        return self.x.shape[2]

    @property
    def patch_len(self):
        return self.x.shape[3]

    @property
    def n_classes(self):
        return len(self.class_names)

    def split_index(self, name):
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        if not self.split_of:
            raise ConfigError("dataset has no split assignment")
        return np.array([i for i, s in enumerate(self.subjects) if self.split_of[s] == name], dtype=np.intp)

    def split(self, name):
        """(x, labels) for one split."""
        idx = self.split_index(name)
        return self.x[idx], self.labels[idx]


# ---------------------------------------------------------------- transforms

def normalize(x, eps=DEFAULT_EPS):
    """Divide each channel (row) by max(max |x|, eps)."""
    if eps <= 0:
        raise ConfigError("normalization eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    scale = np.maximum(np.abs(x).max(axis=-1, keepdims=True), eps)
    return x / scale


def patch(epoch, t):
    """[C, T_epoch] -> [C, T_epoch // t, t]; trailing samples dropped."""
    C, total = epoch.shape
    w = total // t
    return epoch[:, :w * t].reshape(C, w, t)


def unpatch(patches):
    C, w, t = patches.shape
    return patches.reshape(C, w * t)


def epoch_and_patch(rec: Recording, epoch_seconds, t):
    epoch_len = epoch_seconds * rec.sampling_rate
    if abs(epoch_len - round(epoch_len)) > 1e-9:
        raise ConfigError(f"{epoch_seconds}s at {rec.sampling_rate} Hz is not a whole number of samples")
    epoch_len = int(round(epoch_len))
    if epoch_len % t:
        raise ConfigError(f"epoch length {epoch_len} samples is not divisible by patch length {t}")
    samples = np.asarray(rec.samples, dtype=np.float64)
    n = samples.shape[1] // epoch_len
    if n == 0:
        log.info("recording of subject %s too short (%d < %d samples)", rec.subject_id,
                 samples.shape[1], epoch_len)
        return []
    return [patch(samples[:, i * epoch_len:(i + 1) * epoch_len], t) for i in range(n)]


def split_subjects(subject_ids, fractions=(0.70, 0.15, 0.15), seed=42):
    """Seeded shuffle of distinct subjects; val/test get floor(f * N) (at least 1), train the rest."""
    subjects = sorted(set(subject_ids))
    N = len(subjects)
    if N < 3:
        raise ConfigError(f"subject-independent split needs at least 3 subjects, got {N}")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = np.random.default_rng(seed).permutation(N)
    n_val = max(1, int(math.floor(fractions[1] * N + 1e-9)))
    n_test = max(1, int(math.floor(fractions[2] * N + 1e-9)))
    shuffled = [subjects[i] for i in order]
    split = {}
    for s in shuffled[:n_val]:
        split[s] = "val"
    for s in shuffled[n_val:n_val + n_test]:
        split[s] = "test"
    for s in shuffled[n_val + n_test:]:
        split[s] = "train"
    return split


# ---------------------------------------------------------------- container IO

def write_dataset(out_dir, epochs, subjects, labels, montage: Montage, sampling_rate, class_names,
                  montage_file="montage.txt"):
    """Write raw epochs [N, C, T_epoch] in the container format."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    epochs = np.asarray(epochs, dtype=np.float64)
    N, C, T_epoch = epochs.shape
    if C != len(montage):
        raise ConfigError(f"epochs have {C} channels, montage has {len(montage)}")
    records = [{"subject": str(s), "label": int(l), "offset": i * C * T_epoch}
               for i, (s, l) in enumerate(zip(subjects, labels))]
    meta = {
        "sampling_rate": float(sampling_rate),
        "epoch_samples": int(T_epoch),
        "channel_names": list(montage.channel_names),
        "montage": montage_file,
        "class_names": list(class_names),
        "epochs": records,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")
    (out / "data.bin").write_bytes(epochs.astype("<f4").tobytes())
    save_montage(montage, out / montage_file)
    return out


def read_raw(path):
    """(meta, montage, raw epochs [N, C, T_epoch] float64) without normalization."""
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{path}: no meta.json") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}/meta.json: {e}") from None
    for key in ("sampling_rate", "epoch_samples", "channel_names", "montage", "class_names", "epochs"):
        if key not in meta:
            raise ParseError(f"{path}/meta.json missing {key!r}")
    montage = load_montage(path / meta["montage"])
    if list(montage.channel_names) != list(meta["channel_names"]):
        raise ParseError(f"{path}: channel_names in meta.json do not match the montage file")
    C, T_epoch = len(montage), int(meta["epoch_samples"])
    flat = np.fromfile(path / "data.bin", dtype="<f4")
    raw = np.empty((len(meta["epochs"]), C, T_epoch))
    for i, rec in enumerate(meta["epochs"]):
        off = int(rec["offset"])
        if off + C * T_epoch > flat.size:
            raise ParseError(f"{path}: epoch {i} runs past the end of data.bin")
        raw[i] = flat[off:off + C * T_epoch].reshape(C, T_epoch)
    return meta, montage, raw


def load_dataset(path, patch_len, sampling_rate=None, eps=DEFAULT_EPS, split_seed=42,
                 fractions=(0.70, 0.15, 0.15)) -> EpochSet:
    """Load, normalize each epoch channel-wise, patch, and assign subject splits."""
    meta, montage, raw = read_raw(path)
    sr = float(meta["sampling_rate"])
    if sampling_rate is not None and abs(sr - sampling_rate) > 1e-9:
        raise ConfigError(f"{path}: sampling rate {sr} Hz, expected {sampling_rate} Hz (resample first)")
    if raw.shape[2] % patch_len:
        raise ConfigError(f"epoch length {raw.shape[2]} is not divisible by patch length {patch_len}")
    x = np.stack([patch(normalize(e, eps), patch_len) for e in raw]) if len(raw) else \
        np.empty((0, len(montage), raw.shape[2] // patch_len, patch_len))
    labels = np.array([int(r["label"]) for r in meta["epochs"]], dtype=np.int64)
    K = len(meta["class_names"])
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ParseError(f"{path}: labels must be integers in [0, {K})")
    subjects = np.array([str(r["subject"]) for r in meta["epochs"]], dtype=object)
    split_of = split_subjects(subjects, fractions, split_seed) if len(set(subjects)) >= 3 else {}
    return EpochSet(x, labels, subjects, montage, list(meta["class_names"]), sr, split_of)


# ---------------------------------------------------------------- synthetic generator

MODES = ("channel-coded", "spatial-class")


def channel_frequencies(C, f0=1.3, step=0.7):
    """Distinct, non-integer frequencies so a 1 s patch's phase depends on its index."""
    return f0 + step * np.arange(C)


def class_seed_electrodes(montage: Montage, K, min_separation):
    """Farthest-point selection of K seed electrodes starting at channel 0."""
    C = len(montage)
    if K > C:
        raise ConfigError(f"{K} classes need at least {K} electrodes, montage has {C}")
    dist = np.array([[great_circle(a, b) for b in montage.positions] for a in montage.positions])
    seeds = [0]
    while len(seeds) < K:
        nearest = dist[:, seeds].min(axis=1)
        seeds.append(int(np.argmax(nearest)))
    sep = min(dist[a, b] for i, a in enumerate(seeds) for b in seeds[i + 1:]) if K > 1 else math.inf
    if sep < min_separation:
        raise ConfigError(f"cannot place {K} well-separated class regions on {C} electrodes "
                          f"(closest seeds {sep:.3f} rad < {min_separation:.3f} rad)")
    return seeds, dist


def generate_synthetic(out_dir, mode="channel-coded", n_channels=8, n_subjects=20, epochs_per_subject=10,
                       n_classes=2, seed=0, sampling_rate=40.0, epoch_samples=160, noise=0.2,
                       amplitude=1.0, region_width=0.6, source_freq=6.0):
    """Write a synthetic dataset and return its directory.

    channel-coded: channel i carries amplitude * sin(2 pi f_i n / sr) + noise,
        with n restarting at every epoch; labels are uniform random.
    spatial-class: a class-k epoch carries a random-phase oscillation whose gain on
        channel c is exp(-0.5 (dist(c, seed_k) / region_width)^2) times a per-subject
        scalar jitter in [0.75, 1.25], plus white noise on every channel.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown synthetic mode {mode!r}; choose from {', '.join(MODES)}")
    for name, v in (("channels", n_channels), ("subjects", n_subjects),
                    ("epochs per subject", epochs_per_subject), ("classes", n_classes),
                    ("epoch samples", epoch_samples)):
        if v < 1:
            raise ConfigError(f"{name} must be positive, got {v}")
    if sampling_rate <= 0 or noise < 0:
        raise ConfigError("sampling rate must be positive and noise non-negative")
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    montage = synthetic_ring_montage(n_channels)
    n = np.arange(epoch_samples)
    N = n_subjects * epochs_per_subject
    subjects = [f"S{s + 1:03d}" for s in range(n_subjects) for _ in range(epochs_per_subject)]
    epochs = np.empty((N, n_channels, epoch_samples))
    if mode == "channel-coded":
        freqs = channel_frequencies(n_channels)
        template = amplitude * np.sin(2 * np.pi * freqs[:, None] * n[None, :] / sampling_rate)
        labels = rng.integers(0, n_classes, N)
        for i in range(N):
            epochs[i] = template + noise * rng.standard_normal(template.shape)
    else:
        seeds, dist = class_seed_electrodes(montage, n_classes, region_width)
        gains = np.exp(-0.5 * (dist[:, seeds].T / region_width) ** 2)  # [K, C]
        jitter = rng.uniform(0.75, 1.25, n_subjects)
        labels = rng.integers(0, n_classes, N)
        for i in range(N):
            subj = i // epochs_per_subject
            phase = rng.uniform(0, 2 * np.pi)
            src = amplitude * np.sin(2 * np.pi * source_freq * n / sampling_rate + phase)
            epochs[i] = (jitter[subj] * gains[labels[i]])[:, None] * src[None, :] \
                + noise * rng.standard_normal((n_channels, epoch_samples))
    class_names = [f"class{k}" for k in range(n_classes)]
    return write_dataset(out_dir, epochs, subjects, labels, montage, sampling_rate, class_names)
