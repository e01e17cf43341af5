"""Aligned (speech, image) pair datasets: manifests, MFCC cache, batching and a synthetic generator."""

from __future__ import annotations

import colorsys
import csv
import logging
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import container
from .dsp import MAX_FRAMES, MfccParams, RawAudio, mfcc
from .image import augment_train, preprocess_eval

log = logging.getLogger(__name__)

MANIFEST_FIELDS = ("pair_id", "audio_path", "image_path", "split")
SPLITS = ("train", "val", "test")
CACHE_SUFFIX = ".mfcc"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class AlignedPair:
    pair_id: str
    audio_path: Path
    image_path: Path
    split: str


def read_wav(path: str | os.PathLike) -> RawAudio:
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1 or wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = wf.getframerate()
        pcm = np.frombuffer(wf.readframes(wf.getnframes()), dtype="<i2")
    return RawAudio.from_pcm16(pcm, rate)


def write_wav(path: str | os.PathLike, samples: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Decode to a (3, H, W) uint8 array."""
    with Image.open(path) as im:
        return np.ascontiguousarray(np.asarray(im.convert("RGB")).transpose(2, 0, 1))


def scan_manifest(manifest: str | os.PathLike) -> list[AlignedPair]:
    """Read ``pair_id,audio_path,image_path,split`` rows; relative paths resolve against the manifest's directory."""
    manifest = Path(manifest)
    root = manifest.parent
    pairs: list[AlignedPair] = []
    seen: set[str] = set()
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return pairs
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{manifest}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            pid = row["pair_id"]
            if pid in seen:
                raise ManifestError(f"{manifest}:{lineno}: duplicate pair_id {pid!r}")
            if row["split"] not in SPLITS:
                raise ManifestError(f"{manifest}:{lineno}: unknown split {row['split']!r}")
            audio, img = root / row["audio_path"], root / row["image_path"]
            for p in (audio, img):
                if not p.is_file():
                    raise ManifestError(f"{manifest}:{lineno} (pair {pid}): missing file {p}")
            seen.add(pid)
            pairs.append(AlignedPair(pid, audio, img, row["split"]))
    return pairs


def write_manifest(path: str | os.PathLike, pairs: Sequence[AlignedPair]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for p in pairs:
            writer.writerow([p.pair_id, _rel(p.audio_path, path.parent), _rel(p.image_path, path.parent), p.split])


def _rel(p: Path, root: Path) -> str:
    try:
        return Path(p).relative_to(root).as_posix()
    except ValueError:
        return str(p)


# --- MFCC cache -------------------------------------------------------------


@dataclass
class CacheReport:
    computed: int = 0
    skipped: int = 0
    dropped: list[str] = field(default_factory=list)

    def __str__(self) -> str:
        s = f"computed={self.computed} skipped={self.skipped} dropped={len(self.dropped)}"
        if self.dropped:
            s += " (" + ", ".join(self.dropped) + ")"
        return s


def cache_path(pair: AlignedPair, cache_root: Path, data_root: Path) -> Path:
    rel = Path(_rel(pair.audio_path, data_root))
    if rel.is_absolute():
        rel = Path(*rel.parts[1:])
    return Path(cache_root) / rel.with_suffix(rel.suffix + CACHE_SUFFIX)


def _params_meta(params: MfccParams) -> dict:
    return {"n_fft": params.n_fft, "hop": params.hop, "n_mels": params.n_mels, "n_mfcc": params.n_mfcc}


def _up_to_date(entry: Path, source: Path, params: MfccParams) -> bool:
    if not entry.is_file() or entry.stat().st_mtime_ns < source.stat().st_mtime_ns:
        return False
    try:
        _, meta = container.load(entry)
    except (container.ContainerError, ValueError):
        return False
    return meta.get("params") == _params_meta(params)


def build_mfcc_cache(
    pairs: Sequence[AlignedPair],
    cache_root: str | os.PathLike,
    data_root: str | os.PathLike,
    params: MfccParams = MfccParams(),
    max_frames: int = MAX_FRAMES,
) -> CacheReport:
    """Compute each clip's MFCC once into a tree mirroring the audio files.

    Clips with more than ``max_frames`` frames leave a marker entry with no
    tensor and are reported as dropped.
    """
    report = CacheReport()
    cache_root, data_root = Path(cache_root), Path(data_root)
    for pair in pairs:
        entry = cache_path(pair, cache_root, data_root)
        if _up_to_date(entry, pair.audio_path, params):
            _, meta = container.load(entry)
            if meta.get("dropped"):
                report.dropped.append(pair.pair_id)
            else:
                report.skipped += 1
            continue
        seq = mfcc(read_wav(pair.audio_path), params, source_id=pair.pair_id)
        meta = {"source_id": pair.pair_id, "n_frames": seq.n_frames, "params": _params_meta(params)}
        if seq.n_frames > max_frames:
            log.warning("dropping %s: %d MFCC frames > %d", pair.pair_id, seq.n_frames, max_frames)
            container.save(entry, {}, {**meta, "dropped": True})
            report.dropped.append(pair.pair_id)
            continue
        container.save(entry, {"mfcc": seq.frames.astype(np.float32)}, meta)
        report.computed += 1
    return report


# --- batching ---------------------------------------------------------------


@dataclass
class Batch:
    mfcc: torch.Tensor
    lengths: torch.Tensor
    mask: torch.Tensor
    images: torch.Tensor
    pair_ids: list[str]

    def __len__(self) -> int:
        return len(self.pair_ids)


class PairDataset:
    """Pairs plus lazily-loaded, memoized MFCC and image arrays."""

    def __init__(
        self,
        pairs: Sequence[AlignedPair],
        data_root: str | os.PathLike,
        cache_root: str | os.PathLike | None = None,
        params: MfccParams = MfccParams(),
    ):
        self.pairs = list(pairs)
        self.data_root = Path(data_root)
        self.cache_root = None if cache_root is None else Path(cache_root)
        self.params = params
        self._mfcc: dict[str, np.ndarray] = {}
        self._images: dict[str, np.ndarray] = {}

    @classmethod
    def from_manifest(cls, manifest, cache_root=None, params: MfccParams = MfccParams()) -> "PairDataset":
        manifest = Path(manifest)
        return cls(scan_manifest(manifest), manifest.parent, cache_root, params)

    def split(self, name: str) -> list[AlignedPair]:
        return [p for p in self.pairs if p.split == name]

    def mfcc(self, pair: AlignedPair) -> np.ndarray:
        frames = self._mfcc.get(pair.pair_id)
        if frames is None:
            frames = None
            if self.cache_root is not None:
                entry = cache_path(pair, self.cache_root, self.data_root)
                if entry.is_file():
                    tensors, meta = container.load(entry)
                    if meta.get("dropped"):
                        raise ValueError(f"pair {pair.pair_id} was dropped by the length cap")
                    frames = tensors["mfcc"]
            if frames is None:
                frames = mfcc(read_wav(pair.audio_path), self.params).frames.astype(np.float32)
            self._mfcc[pair.pair_id] = frames
        return frames

    def image(self, pair: AlignedPair) -> np.ndarray:
        img = self._images.get(pair.pair_id)
        if img is None:
            img = read_image(pair.image_path)
            self._images[pair.pair_id] = img
        return img

    def usable(self, pairs: Sequence[AlignedPair], max_frames: int = MAX_FRAMES) -> list[AlignedPair]:
        """Pairs whose MFCC fits the length cap (consults the cache when present)."""
        keep = []
        for p in pairs:
            try:
                n = len(self.mfcc(p))
            except ValueError:
                continue
            if n <= max_frames:
                keep.append(p)
        return keep


def pad_sequences(seqs: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.int64)
    t_max = int(lengths.max())
    out = np.zeros((len(seqs), t_max, seqs[0].shape[1]), dtype=np.float32)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    mask = torch.arange(t_max).unsqueeze(0) < lengths.unsqueeze(1)
    return torch.from_numpy(out), lengths, mask


def load_batch(
    dataset: PairDataset,
    pairs: Sequence[AlignedPair],
    rng: np.random.Generator | None = None,
    mode: str = "train",
) -> Batch:
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("training batches need an rng for augmentation")
    feats, lengths, mask = pad_sequences([dataset.mfcc(p) for p in pairs])
    imgs = []
    for p in pairs:
        raw = dataset.image(p)
        crop = augment_train(raw, rng) if mode == "train" else preprocess_eval(raw)
        imgs.append(crop)
    images = torch.from_numpy(np.stack(imgs).astype(np.float32) / 255.0)
    return Batch(feats, lengths, mask, images, [p.pair_id for p in pairs])


def iter_batches(
    dataset: PairDataset,
    pairs: Sequence[AlignedPair],
    batch_size: int,
    rng: np.random.Generator | None,
    mode: str = "train",
    shuffle: bool = True,
    min_batch: int = 1,
) -> Iterator[Batch]:
    order = np.arange(len(pairs))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < min_batch:
            continue
        yield load_batch(dataset, [pairs[i] for i in idx], rng, mode)


# --- synthetic data ---------------------------------------------------------

SHAPES = ("circle", "square", "triangle", "diamond")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 16
    pairs_per_class: int = 25
    f_low: float = 200.0
    f_high: float = 3000.0
    snr_db: float = 20.0
    min_duration: float = 0.5
    max_duration: float = 2.0
    image_size: int = 256
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_classes < 1 or self.pairs_per_class < 1:
            raise ValueError("need at least one class and one pair per class")
        if not 0.5 <= self.min_duration <= self.max_duration <= 2.0:
            raise ValueError("durations must lie within [0.5, 2] s")

    def fundamental(self, cls: int) -> float:
        if self.n_classes == 1:
            return self.f_low
        return float(self.f_low * (self.f_high / self.f_low) ** (cls / (self.n_classes - 1)))

    def bursts(self, cls: int) -> int:
        return 1 + cls % 3

    def shape(self, cls: int) -> str:
        return SHAPES[cls % len(SHAPES)]

    def color(self, cls: int) -> tuple[int, int, int]:
        n_colors = -(-self.n_classes // len(SHAPES))
        hue = (cls // len(SHAPES)) / n_colors
        rgb = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
        return tuple(int(round(255 * v)) for v in rgb)


def synth_audio(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> np.ndarray:
    """Tone bursts at the class fundamental (plus a weaker octave) in white noise."""
    sr = spec.sample_rate
    n = int(round(rng.uniform(spec.min_duration, spec.max_duration) * sr))
    t = np.arange(n) / sr
    f0 = spec.fundamental(cls) * rng.uniform(0.99, 1.01)
    tone = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    if 2 * f0 < sr / 2:
        tone += 0.3 * np.sin(2 * np.pi * 2 * f0 * t)
    envelope = np.zeros(n)
    k = spec.bursts(cls)
    slot = n / k
    for b in range(k):
        start = int(b * slot + rng.uniform(0.05, 0.15) * slot)
        stop = int(b * slot + rng.uniform(0.8, 0.95) * slot)
        ramp = min(160, (stop - start) // 4)
        env = np.ones(stop - start)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[len(env) - ramp :] = np.linspace(1, 0, ramp)
        envelope[start:stop] = env
    signal = 0.4 * tone * envelope
    p_signal = np.mean(signal**2)
    noise = rng.standard_normal(n) * np.sqrt(p_signal / 10 ** (spec.snr_db / 10))
    return np.clip(signal + noise, -1.0, 1.0)


def synth_image(spec: SyntheticSpec, cls: int, rng: np.random.Generator) -> Image.Image:
    size = spec.image_size
    base = rng.integers(200, 240)
    bg = np.clip(base + rng.normal(0, 6, (size, size, 1)), 0, 255).astype(np.uint8).repeat(3, axis=2)
    im = Image.fromarray(bg)
    draw = ImageDraw.Draw(im)
    r = rng.uniform(0.16, 0.27) * size
    cx, cy = rng.uniform(0.35, 0.65, size=2) * size
    color = spec.color(cls)
    shape = spec.shape(cls)
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    else:
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
    return im


def _stratified_counts(total: int, n_classes: int, per_class: int) -> list[tuple[int, int, int]]:
    """Per-class (train, val, test) counts hitting a global 80/10/10 split."""
    n_val = n_test = int(round(0.1 * total))
    val_each, val_extra = divmod(n_val, n_classes)
    test_each, test_extra = divmod(n_test, n_classes)
    counts = []
    for c in range(n_classes):
        v = val_each + (1 if c < val_extra else 0)
        # spread test extras over the classes that did not get a val extra first
        order = (c - val_extra) % n_classes
        te = test_each + (1 if order < test_extra else 0)
        v, te = min(v, per_class), min(te, max(per_class - v, 0))
        counts.append((per_class - v - te, v, te))
    return counts


def generate_synthetic(spec: SyntheticSpec, root: str | os.PathLike, seed: int = 0) -> Path:
    """Write WAV/PNG pairs and ``manifest.csv`` under ``root``; returns the manifest path."""
    root = Path(root)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    total = spec.n_classes * spec.pairs_per_class
    counts = _stratified_counts(total, spec.n_classes, spec.pairs_per_class)
    pairs = []
    for cls in range(spec.n_classes):
        n_train, n_val, _ = counts[cls]
        splits = ["train"] * n_train + ["val"] * n_val
        splits += ["test"] * (spec.pairs_per_class - len(splits))
        splits = [splits[i] for i in rng.permutation(len(splits))]
        for i in range(spec.pairs_per_class):
            pid = f"c{cls:03d}_{i:04d}"
            wav_path = root / "audio" / f"{pid}.wav"
            png_path = root / "images" / f"{pid}.png"
            write_wav(wav_path, synth_audio(spec, cls, rng), spec.sample_rate)
            synth_image(spec, cls, rng).save(png_path, format="PNG")
            pairs.append(AlignedPair(pid, wav_path, png_path, splits[i]))
    manifest = root / "manifest.csv"
    write_manifest(manifest, pairs)
    return manifest


def class_of(pair_id: str) -> int:
    """Class index encoded in synthetic pair ids (``c<class>_<index>``)."""
    return int(pair_id.split("_")[0][1:])
