# Copyright 2026 The rasp-dg Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Procedural multi-domain glyph images.

Ten glyph classes rendered with per-instance jitter, each under four domain
styles that change channel statistics while keeping the glyph geometry.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DatasetError
from .util import canonical_hash, deserialize_json, serialize_json, worker_cap

logger = logging.getLogger("rasp.dg.glyphs")

FORMAT_VERSION = "1.0.0"
SIZE = 32
SUPERSAMPLE = 2
CHANNELS = 3
IMAGE_SHAPE = (CHANNELS, SIZE, SIZE)
IMAGE_BYTES = CHANNELS * SIZE * SIZE * 4

# half extent in pixels of a glyph at scale 1, its corners stay inside the
# canvas at the largest shift
GLYPH_RADIUS = 9.0
MAX_SHIFT = 3.0
SCALE_RANGE = (0.7, 1.0)
MAX_ROTATION = 20.0

GLYPHS = ("circle", "square", "triangle", "cross", "ring", "hbars", "vbars", "diamond", "x", "checker")
DOMAINS = ("flat", "texture", "inverted", "noisy_hue")
SPLITS = ("train", "val", "test")
NUM_CLASSES = len(GLYPHS)

GRATING_FREQUENCY = 0.15
GRATING_ANGLE = np.deg2rad(30.0)
INVERTED_CONTRAST = 0.6
HUE_ANGLE = np.deg2rad(100.0)
NOISE_STD = 0.05


class SplitSizes(NamedTuple):
    """Examples per class per domain."""

    train: int = 200
    val: int = 40
    test: int = 60

    def offset(self, split):
        return sum(getattr(self, s) for s in SPLITS[: SPLITS.index(split)])


def _bars(t):
    return np.floor((t + 0.85) / 0.34) % 2 == 0


def _mask(glyph, u, v):
    r = np.hypot(u, v)
    box = np.maximum(np.abs(u), np.abs(v))
    inside = box <= 0.85
    if glyph == "circle":
        return r <= 0.9
    if glyph == "square":
        return box <= 0.8
    if glyph == "triangle":
        return (v <= 0.8) & (np.abs(u) <= 0.5 * (v + 0.9))
    if glyph == "cross":
        return ((np.abs(u) <= 0.25) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.25) & (np.abs(u) <= 0.9))
    if glyph == "ring":
        return (r >= 0.55) & (r <= 0.9)
    if glyph == "hbars":
        return inside & _bars(v)
    if glyph == "vbars":
        return inside & _bars(u)
    if glyph == "diamond":
        return np.abs(u) + np.abs(v) <= 0.95
    if glyph == "x":
        return inside & ((np.abs(u - v) <= 0.3) | (np.abs(u + v) <= 0.3))
    if glyph == "checker":
        cells = np.floor((u + 0.85) / 0.425) + np.floor((v + 0.85) / 0.425)
        return inside & (cells % 2 == 0)
    raise ValueError(f"unknown glyph: {glyph}")


def render_glyph(cls, rng):
    """Antialiased (SIZE, SIZE) coverage mask of a jittered glyph."""

    n = SIZE * SUPERSAMPLE
    dx, dy = rng.uniform(-MAX_SHIFT, MAX_SHIFT, size=2)
    scale = rng.uniform(*SCALE_RANGE)
    angle = np.deg2rad(rng.uniform(-MAX_ROTATION, MAX_ROTATION))

    coords = (np.arange(n) + 0.5) / SUPERSAMPLE - SIZE / 2
    y, x = np.meshgrid(coords - dy, coords - dx, indexing="ij")
    cos, sin = np.cos(angle), np.sin(angle)
    u = (cos * x + sin * y) / (GLYPH_RADIUS * scale)
    v = (-sin * x + cos * y) / (GLYPH_RADIUS * scale)

    mask = _mask(GLYPHS[cls], u, v).astype(np.float64)
    return mask.reshape(SIZE, SUPERSAMPLE, SIZE, SUPERSAMPLE).mean(axis=(1, 3))


def _flat(mask, rng):
    bg = rng.uniform(0.05, 0.2, size=CHANNELS)
    fg = rng.uniform(0.7, 1.0, size=CHANNELS)
    return bg[:, None, None] + mask[None] * (fg - bg)[:, None, None]


def _hue_rotation(angle):
    k = np.ones(CHANNELS) / np.sqrt(CHANNELS)
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(CHANNELS) + np.sin(angle) * cross + (1 - np.cos(angle)) * cross @ cross


def _style(domain, mask, rng):
    if domain == "flat":
        return _flat(mask, rng)
    if domain == "texture":
        phase = rng.uniform(0, 2 * np.pi)
        tint = rng.uniform(0.5, 1.0, size=CHANNELS)
        fg = rng.uniform(0.7, 1.0, size=CHANNELS)
        y, x = np.mgrid[0:SIZE, 0:SIZE]
        wave = 0.5 + 0.35 * np.sin(2 * np.pi * GRATING_FREQUENCY * (x * np.cos(GRATING_ANGLE) + y * np.sin(GRATING_ANGLE)) + phase)
        bg = wave[None] * tint[:, None, None]
        return bg * (1 - mask[None]) + mask[None] * fg[:, None, None]
    if domain == "inverted":
        return 0.5 + INVERTED_CONTRAST * ((1 - _flat(mask, rng)) - 0.5)
    if domain == "noisy_hue":
        image = np.einsum("ij,jhw->ihw", _hue_rotation(HUE_ANGLE), _flat(mask, rng))
        return image + rng.normal(0.0, NOISE_STD, size=image.shape)
    raise ValueError(f"unknown domain: {domain}")


def render_example(cls, domain, index, seed):
    """Image (3, 32, 32) in [0, 1] and label, a pure function of the arguments."""

    if not 0 <= cls < NUM_CLASSES:
        raise ValueError(f"invalid class: {cls} (expected 0..{NUM_CLASSES - 1})")
    if not 0 <= domain < len(DOMAINS):
        raise ValueError(f"invalid domain: {domain} (expected 0..{len(DOMAINS) - 1})")
    rng = np.random.default_rng([seed, domain, cls, index])
    mask = render_glyph(cls, rng)
    image = np.clip(_style(DOMAINS[domain], mask, rng), 0.0, 1.0)
    return image.astype("<f4"), cls


def render_split(domain, split, seed, sizes=SplitSizes()):
    count = getattr(sizes, split)
    offset = sizes.offset(split)
    images = np.empty((NUM_CLASSES * count,) + IMAGE_SHAPE, dtype="<f4")
    labels = np.empty(NUM_CLASSES * count, dtype="<u4")
    for cls in range(NUM_CLASSES):
        for k in range(count):
            row = cls * count + k
            images[row], labels[row] = render_example(cls, domain, offset + k, seed)
    return images, labels


def _file_names(domain, split):
    name = DOMAINS[domain]
    return f"{name}_{split}_images.f32", f"{name}_{split}_labels.u32"


def _write_split(out_dir, domain, split, seed, sizes):
    import hashlib

    images, labels = render_split(domain, split, seed, sizes)
    images_file, labels_file = _file_names(domain, split)
    images_blob = images.tobytes()
    labels_blob = labels.tobytes()
    (out_dir / images_file).write_bytes(images_blob)
    (out_dir / labels_file).write_bytes(labels_blob)
    logger.debug(f"wrote {images_file}: {len(labels)} examples")
    return {
        "domain": DOMAINS[domain],
        "split": split,
        "count": len(labels),
        "images": images_file,
        "labels": labels_file,
        "images-sha256": hashlib.sha256(images_blob).hexdigest(),
        "labels-sha256": hashlib.sha256(labels_blob).hexdigest(),
    }


def generate_dataset(out_dir, seed=0, sizes=SplitSizes(), jobs=1):
    """Render every (domain, split) to ``out_dir`` and write its manifest."""

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory '{out_dir}': {e.strerror}") from e

    tasks = [(domain, split) for domain in range(len(DOMAINS)) for split in SPLITS]
    try:
        jobs = worker_cap(jobs)
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_write_split, out_dir, d, s, seed, sizes) for d, s in tasks]
                files = [f.result() for f in futures]
        else:
            files = [_write_split(out_dir, d, s, seed, sizes) for d, s in tasks]
    except OSError as e:
        raise DatasetError(f"cannot write dataset to '{out_dir}': {e.strerror}") from e

    manifest = {
        "name": "styled-glyphs",
        "format-version": FORMAT_VERSION,
        "seed": seed,
        "image-shape": list(IMAGE_SHAPE),
        "classes": list(GLYPHS),
        "domains": list(DOMAINS),
        "per-class-per-domain": sizes._asdict(),
        "files": files,
    }
    with open(out_dir / "manifest.json", "w") as f:
        serialize_json(f, manifest)
    logger.info(f"generated {sum(f['count'] for f in files)} images in '{out_dir}'")
    return manifest


def manifest_hash(manifest):
    return canonical_hash(manifest)


def split_totals(manifest):
    totals = dict.fromkeys(SPLITS, 0)
    for entry in manifest["files"]:
        totals[entry["split"]] += entry["count"]
    return totals


class DomainDataset:
    """In-memory images and labels by (domain, split)."""

    def __init__(self, data, domains, num_classes=NUM_CLASSES, path=None):
        self.data = data
        self.domains = list(domains)
        self.num_classes = num_classes
        self.path = path

    def split(self, domain, split):
        try:
            return self.data[(domain, split)]
        except KeyError:
            raise DatasetError(f"no such domain split: {domain}/{split}") from None

    def pooled(self, domains, split):
        parts = [self.split(d, split) for d in domains]
        if not parts:
            raise DatasetError(f"no domains to pool for split '{split}'")
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def resolve(self, domain):
        """Domain name from a name or a numeric index."""

        if domain is None or domain in self.domains:
            return domain
        try:
            return self.domains[int(domain)]
        except (ValueError, IndexError):
            raise DatasetError(f"unknown domain: '{domain}' (expected one of {', '.join(self.domains)})") from None


def _read_blob(path, expected):
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"{path.name}: cannot read: {e.strerror}") from e
    if len(blob) < expected:
        raise DatasetError(f"{path.name}: truncated at byte offset {len(blob)} (expected {expected} bytes)")
    if len(blob) > expected:
        raise DatasetError(f"{path.name}: unexpected data at byte offset {expected} (file has {len(blob)} bytes)")
    return blob


def load_dataset(path):
    path = Path(path)
    try:
        with open(path / "manifest.json") as f:
            manifest = deserialize_json(f)
    except FileNotFoundError:
        raise DatasetError(f"manifest.json: not found in '{path}'") from None
    except ValueError as e:
        raise DatasetError(f"manifest.json: invalid JSON: {e}") from e

    try:
        return _load_splits(path, manifest)
    except (KeyError, TypeError, AttributeError) as e:
        raise DatasetError(f"manifest.json: malformed manifest in '{path}': {e!r}") from None


def _load_splits(path, manifest):
    from semver import VersionInfo

    version = manifest.get("format-version", "0.0.0")
    if VersionInfo.parse(version).major != VersionInfo.parse(FORMAT_VERSION).major:
        raise DatasetError(f"manifest.json: unsupported format version {version} (expected {FORMAT_VERSION})")

    classes = manifest.get("classes", GLYPHS)
    data = {}
    for entry in manifest["files"]:
        count = entry["count"]
        images = np.frombuffer(_read_blob(path / entry["images"], count * IMAGE_BYTES), dtype="<f4")
        labels = np.frombuffer(_read_blob(path / entry["labels"], count * 4), dtype="<u4")
        bad = np.flatnonzero(labels >= len(classes))
        if bad.size:
            raise DatasetError(f"{entry['labels']}: label out of range at byte offset {4 * bad[0]}")
        data[(entry["domain"], entry["split"])] = (images.reshape((count,) + IMAGE_SHAPE), labels.astype(np.int64))

    logger.debug(f"loaded {len(data)} splits from '{path}'")
    return DomainDataset(data, manifest["domains"], len(classes), path=path)
