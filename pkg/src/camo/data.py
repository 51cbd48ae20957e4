"""Dataset manifests, binary feature files, vocabulary, splits and synthetic data."""

from __future__ import annotations

import json
import math
import struct
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .decoder import BOS_ID, EOS_ID, PAD_ID, UNK_ID
from .metrics import CiderD, tok

FEATURE_MAGIC = b"CVFF"
FEATURE_VERSION = 1
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class ManifestError(ValueError):
    """Schema violation; the message starts with the offending JSON path."""


class FeatureFormatError(ValueError):
    pass


class SplitError(ValueError):
    pass


# -- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    feature_key: str


@dataclass(frozen=True)
class Annotation:
    image_id: int
    caption: str


@dataclass
class DatasetManifest:
    images: list[ImageRecord]
    annotations: list[Annotation]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen = set()
        for i, img in enumerate(self.images):
            if img.id in seen:
                raise ManifestError(f"$.images[{i}].id: duplicate image id {img.id}")
            seen.add(img.id)
        covered = set()
        for i, ann in enumerate(self.annotations):
            if ann.image_id not in seen:
                raise ManifestError(f"$.annotations[{i}].image_id: unknown image id {ann.image_id}")
            covered.add(ann.image_id)
        for i, img in enumerate(self.images):
            if img.id not in covered:
                raise ManifestError(f"$.images[{i}]: image id {img.id} has no caption")

    def captions_by_image(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann.caption)
        return out

    def subset(self, image_ids: Iterable[int]) -> "DatasetManifest":
        keep = set(image_ids)
        return DatasetManifest(
            [img for img in self.images if img.id in keep],
            [ann for ann in self.annotations if ann.image_id in keep],
        )

    def to_dict(self) -> dict:
        return {
            "images": [{"id": i.id, "file_name": i.file_name, "feature_key": i.feature_key} for i in self.images],
            "annotations": [{"image_id": a.image_id, "caption": a.caption} for a in self.annotations],
        }


def _field(obj, key, kind, path):
    if not isinstance(obj, dict):
        raise ManifestError(f"{path}: expected an object")
    if key not in obj:
        raise ManifestError(f"{path}.{key}: missing field")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ManifestError(f"{path}.{key}: expected an integer, got {type(value).__name__}")
    if kind is str and not isinstance(value, str):
        raise ManifestError(f"{path}.{key}: expected a string, got {type(value).__name__}")
    return value


def parse_manifest(doc) -> DatasetManifest:
    if not isinstance(doc, dict):
        raise ManifestError("$: expected an object with 'images' and 'annotations'")
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise ManifestError(f"$.{key}: expected a list")
    images = [
        ImageRecord(
            _field(img, "id", int, f"$.images[{i}]"),
            _field(img, "file_name", str, f"$.images[{i}]"),
            _field(img, "feature_key", str, f"$.images[{i}]"),
        )
        for i, img in enumerate(doc["images"])
    ]
    anns = [
        Annotation(
            _field(a, "image_id", int, f"$.annotations[{i}]"),
            unicodedata.normalize("NFC", _field(a, "caption", str, f"$.annotations[{i}]")),
        )
        for i, a in enumerate(doc["annotations"])
    ]
    return DatasetManifest(images, anns)


def load_manifest(path) -> DatasetManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"$: invalid JSON ({exc})") from None
    return parse_manifest(doc)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# -- feature file -----------------------------------------------------------------


def write_features(path, features: Mapping[str, np.ndarray]) -> None:
    """Write ``{key: [T x d]}`` as a CVFF container (little-endian float32)."""
    dims = {np.asarray(v).shape[1] for v in features.values() if np.asarray(v).ndim == 2}
    if len(dims) > 1:
        raise FeatureFormatError(f"feature widths differ: {sorted(dims)}")
    d = dims.pop() if dims else 0
    chunks = [FEATURE_MAGIC, struct.pack("<IIQ", FEATURE_VERSION, d, len(features))]
    for key, mat in features.items():
        mat = np.asarray(mat)
        if mat.ndim != 2 or mat.shape[0] < 1 or mat.shape[1] != d:
            raise FeatureFormatError(f"feature {key!r} must be [T x {d}] with T >= 1, got {mat.shape}")
        raw = key.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FeatureFormatError(f"feature key too long: {key[:40]}...")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", mat.shape[0]))
        chunks.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_features(path) -> dict[str, np.ndarray]:
    """Read a CVFF container; matrices are returned as float32."""
    buf = Path(path).read_bytes()
    if buf[:4] != FEATURE_MAGIC:
        raise FeatureFormatError("not a CVFF feature file")
    try:
        version, d, count = struct.unpack_from("<IIQ", buf, 4)
        if version != FEATURE_VERSION:
            raise FeatureFormatError(f"unsupported feature file version {version}")
        off = 20
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            key = buf[off : off + klen].decode("utf-8")
            off += klen
            (t,) = struct.unpack_from("<I", buf, off)
            off += 4
            if t < 1:
                raise FeatureFormatError(f"feature {key!r} has T=0")
            nbytes = 4 * t * d
            if off + nbytes > len(buf):
                raise FeatureFormatError("truncated feature file")
            out[key] = np.frombuffer(buf, dtype="<f4", count=t * d, offset=off).reshape(t, d).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        raise FeatureFormatError(f"truncated feature file ({exc})") from None
    if off != len(buf):
        raise FeatureFormatError("trailing bytes after last feature block")
    return out


# -- vocabulary -------------------------------------------------------------------


@dataclass
class Vocabulary:
    itos: list[str]
    min_freq: int = 1
    stoi: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.itos[:4]) != SPECIALS:
            raise ValueError("vocabulary must start with <pad>, <bos>, <eos>, <unk>")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, caption: str, max_len: int | None = None) -> list[int]:
        """``[BOS, w..., EOS]`` with the words truncated so at most ``max_len`` tokens follow BOS."""
        ids = [self.stoi.get(t, UNK_ID) for t in tok(caption)]
        if max_len is not None:
            ids = ids[: max_len - 1]
        return [BOS_ID, *ids, EOS_ID]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            words.append(self.itos[i])
        return " ".join(words)


def build_vocab(manifest: DatasetManifest, min_freq: int = 1) -> Vocabulary:
    if not manifest.annotations:
        raise ValueError("cannot build a vocabulary from an empty manifest")
    counts = Counter(t for ann in manifest.annotations for t in tok(ann.caption))
    kept = sorted((t for t, c in counts.items() if c >= min_freq and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return Vocabulary([*SPECIALS, *kept], min_freq)


def save_vocab(path, vocab: Vocabulary, idf: CiderD | None = None) -> None:
    doc = {"min_freq": vocab.min_freq, "tokens": vocab.itos}
    if idf is not None:
        doc["idf"] = idf.to_dict()
    Path(path).write_text(json.dumps(doc, ensure_ascii=False) + "\n", encoding="utf-8")


def load_vocab(path) -> tuple[Vocabulary, CiderD | None]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    idf = CiderD.from_dict(doc["idf"]) if "idf" in doc else None
    return Vocabulary(list(doc["tokens"]), int(doc.get("min_freq", 1))), idf


def reference_idf(manifest: DatasetManifest) -> CiderD:
    refs = manifest.captions_by_image()
    return CiderD.from_references([[tok(c) for c in refs[i]] for i in sorted(refs)])


# -- split ------------------------------------------------------------------------


def _draw_until(pool: list[int], total: int, ratio: Fraction, rng: np.random.Generator) -> list[int]:
    """Draw uniformly without replacement until ``len(drawn)/total >= ratio``."""
    drawn: list[int] = []
    while Fraction(len(drawn), total) < ratio:
        if not pool:
            raise SplitError("ran out of images before the held-out ratio was met")
        drawn.append(pool.pop(int(rng.integers(len(pool)))))
    return drawn


def split_dataset(manifest: DatasetManifest, seed: int, val_ratio: float = 0.15, test_ratio: float = 0.15):
    """Return ``(train, val, test)`` manifests partitioning the images.

    Validation images are drawn first, then test images, each by repeated
    uniform draws until the held-out share reaches its ratio.
    """
    if val_ratio < 0 or test_ratio < 0 or val_ratio + test_ratio >= 1:
        raise SplitError(f"ratios must be non-negative and sum below 1, got {val_ratio} + {test_ratio}")
    ids = [img.id for img in manifest.images]
    n = len(ids)
    rv = Fraction(str(val_ratio))
    rt = Fraction(str(test_ratio))
    need = math.ceil(rv * n) + math.ceil(rt * n)
    if n == 0 or need >= n:
        raise SplitError(f"{n} images are too few for held-out ratios {val_ratio}/{test_ratio}")
    rng = np.random.default_rng(seed)
    pool = list(ids)
    val = _draw_until(pool, n, rv, rng)
    test = _draw_until(pool, n, rt, rng)
    return manifest.subset(pool), manifest.subset(val), manifest.subset(test)


# -- synthetic data ---------------------------------------------------------------

# A tiny template grammar; every slot value owns a random prototype vector,
# so the caption is recoverable from the features.
SYNTH_SLOTS = (
    ("object", ("con mèo", "con chó", "cậu bé", "cô gái", "chiếc xe", "người đàn ông")),
    ("color", ("đỏ", "xanh", "vàng", "trắng", "đen")),
    ("action", ("đang đứng", "đang chạy", "đang ngồi", "đang nằm")),
    ("place", ("trên đường", "trong công viên", "gần bãi biển", "trước cửa hàng")),
)
SYNTH_PREFIXES = ("", "có ", "một ")


def _synth_caption(choice: tuple[int, ...], variant: int) -> str:
    obj, color, action, place = (SYNTH_SLOTS[s][1][c] for s, c in enumerate(choice))
    return f"{SYNTH_PREFIXES[variant % len(SYNTH_PREFIXES)]}{obj} màu {color} {action} {place}".strip()


def synth_features(seed: int, n_images: int, T: int, d: int, captions_per_image: int = 1, noise: float = 0.3):
    """Seeded Gaussian features plus a matching manifest.

    Each image samples one value per slot; feature row ``t`` carries the
    prototype of slot ``t % n_slots`` plus Gaussian noise. Distinct images get
    distinct slot combinations while the combinations last.
    """
    if n_images < 1 or T < 1 or d < 1:
        raise ValueError("sizes must be positive")
    rng = np.random.default_rng(seed)
    protos = [rng.standard_normal((len(values), d)) for _, values in SYNTH_SLOTS]
    sizes = [len(values) for _, values in SYNTH_SLOTS]
    n_combo = int(np.prod(sizes))
    flat = rng.permutation(n_combo)
    if n_images > n_combo:
        flat = np.concatenate([flat, rng.integers(n_combo, size=n_images - n_combo)])
    scale = 1.0 / math.sqrt(1.0 + noise**2)
    features: dict[str, np.ndarray] = {}
    images, anns = [], []
    for i in range(n_images):
        choice = tuple(int(c) for c in np.unravel_index(int(flat[i]), sizes))
        rows = np.stack([protos[t % len(SYNTH_SLOTS)][choice[t % len(SYNTH_SLOTS)]] for t in range(T)])
        mat = scale * (rows + noise * rng.standard_normal((T, d)))
        key = f"img{i:06d}"
        features[key] = mat.astype(np.float32)
        images.append(ImageRecord(i, f"{key}.jpg", key))
        for v in range(captions_per_image):
            anns.append(Annotation(i, _synth_caption(choice, v)))
    return features, DatasetManifest(images, anns)
