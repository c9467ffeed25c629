"""Dataset manifests, synthetic data generation, part maps, PK sampling.

A dataset is described by an explicit JSON manifest:

    {"image_size": [H, W],
     "records": [{"path": str, "id": int, "cam": int, "clothes": int,
                  "split": "train"|"query"|"gallery"}, ...]}

Image paths are resolved relative to the manifest file. Part pseudolabel
maps live next to each image as single-channel PNGs whose pixel values are
part class indices (0 = background, K_PARTS classes total).

The synthetic generator encodes identity in body shape and clothes in
torso/leg color, so clothing desensitization is directly testable: two
images of the same identity always share a pixel-identical silhouette,
while different clothes ids recolor it.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

K_PARTS = 8
# Part class indices used by the synthetic renderer.
BACKGROUND, HEAD, TORSO, ARM_L, ARM_R, LEG_L, LEG_R, FEET = range(K_PARTS)

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    identity_id: int
    camera_id: int
    clothes_id: int
    split: str


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    num_identities: int          # distinct train identities (densely 0..M-1)
    image_size: tuple[int, int]  # (height, width)
    root: str = "."

    def split_records(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    @property
    def train_records(self) -> list[SampleRecord]:
        return self.split_records("train")

    def resolve(self, record: SampleRecord) -> str:
        return os.path.join(self.root, record.image_path)

    def part_map_path(self, record: SampleRecord) -> str:
        """Part pseudolabel file convention: parts/<image stem>.png."""
        rel = Path(record.image_path)
        return os.path.join(self.root, "parts", rel.stem + ".png")


@dataclass
class PKBatch:
    p: int
    k: int
    samples: list[SampleRecord]  # P*K records, grouped by identity

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity_id for s in self.samples], dtype=np.int64)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a JSON manifest; densely re-index identity ids.

    Train ids are mapped to 0..M-1 in ascending order of the original ids;
    ids that only appear in query/gallery continue the dense numbering.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict) or "records" not in data or "image_size" not in data:
        raise ValueError("manifest must be an object with 'image_size' and 'records'")
    size = data["image_size"]
    if (not isinstance(size, (list, tuple)) or len(size) != 2
            or any(not isinstance(v, int) or v <= 0 for v in size)):
        raise ValueError("manifest image_size must be [H, W] with positive ints")

    raw = []
    for i, rec in enumerate(data["records"]):
        try:
            p, pid = rec["path"], int(rec["id"])
            cam, clothes = int(rec["cam"]), int(rec["clothes"])
            split = rec["split"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed record #{i}: {rec!r}") from exc
        if split not in SPLITS:
            raise ValueError(f"record #{i} has unknown split {split!r}")
        if min(pid, cam, clothes) < 0:
            raise ValueError(f"record #{i} has a negative id/cam/clothes value")
        raw.append((p, pid, cam, clothes, split))

    train_counts: dict[int, int] = {}
    for _, pid, _, _, split in raw:
        if split == "train":
            train_counts[pid] = train_counts.get(pid, 0) + 1
    for pid in sorted(train_counts):
        if train_counts[pid] < 2:
            raise ValueError(f"identity {pid} has <2 train images")

    id_map = {pid: i for i, pid in enumerate(sorted(train_counts))}
    for _, pid, _, _, split in raw:
        if pid not in id_map:
            id_map[pid] = len(id_map)

    records = [SampleRecord(p, id_map[pid], cam, clothes, split)
               for p, pid, cam, clothes, split in raw]
    return DatasetManifest(records=records,
                           num_identities=len(train_counts),
                           image_size=(size[0], size[1]),
                           root=str(path.parent))


def sample_pk_batch(manifest: DatasetManifest, p: int, k: int,
                    rng_seed: int) -> PKBatch:
    """Draw P train identities and K images each, deterministic in the seed.

    Identities with fewer than K images are sampled with replacement.
    """
    by_id: dict[int, list[SampleRecord]] = {}
    for rec in manifest.train_records:
        by_id.setdefault(rec.identity_id, []).append(rec)
    ids = sorted(by_id)
    if p > len(ids):
        raise ValueError(f"P={p} exceeds the {len(ids)} train identities")
    rng = np.random.default_rng(rng_seed)
    chosen = rng.choice(len(ids), size=p, replace=False)
    samples = []
    for idx in chosen:
        pool = by_id[ids[idx]]
        replace = len(pool) < k
        picks = rng.choice(len(pool), size=k, replace=replace)
        samples.extend(pool[j] for j in picks)
    return PKBatch(p=p, k=k, samples=samples)


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------

SKIN_COLOR = (210, 178, 150)
SHOE_COLOR = (72, 58, 48)
CLOTHES_SAT = 0.85
CLOTHES_VAL = 0.85


def outfit_base_hue(clothes_id: int, clothes_per_id: int,
                    palette_size: int) -> float:
    """Hue (in turns) of an outfit's base color.

    Outfits are spread as far apart on the hue circle as the palette allows;
    every identity shares the same slot for a given clothes index, so color
    never identifies a person.
    """
    stride = max(1, palette_size // max(1, clothes_per_id))
    return ((clothes_id * stride) % palette_size) / palette_size


def outfit_base_color(clothes_id: int, clothes_per_id: int,
                      palette_size: int) -> np.ndarray:
    hue = outfit_base_hue(clothes_id, clothes_per_id, palette_size)
    r, g, b = colorsys.hsv_to_rgb(hue, CLOTHES_SAT, CLOTHES_VAL)
    return np.array([r * 255, g * 255, b * 255], dtype=np.float64)


def sample_outfit_color(base_hue: float, hue_jitter: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Per-image outfit color: base hue plus a wide uniform hue jitter.

    The jitter makes same-outfit images span many colors, so color is an
    unreliable cue within an outfit, while outfit means stay far apart.
    """
    hue = (base_hue + rng.uniform(-hue_jitter, hue_jitter)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, CLOTHES_SAT, CLOTHES_VAL)
    return np.array([r * 255, g * 255, b * 255], dtype=np.float64)


def identity_shape_params(identity_id: int) -> dict:
    """Deterministic body-shape parameters, spread on a lattice.

    Identity is encoded purely in geometry; clothes never touch these.
    """
    i = identity_id
    torso_w = 0.16 + 0.05 * (i % 4)             # fraction of image width
    head_r = 0.05 + 0.03 * ((i // 4) % 3)       # fraction of image height
    arm_slope = (-1 + ((i // 2) % 3)) * 0.22    # arm lean, px per px of height
    leg_gap = 0.025 + 0.04 * ((i // 12) % 2)    # fraction of image width
    return {"torso_w": torso_w, "head_r": head_r,
            "arm_slope": arm_slope, "leg_gap": leg_gap}


def render_part_map(identity_id: int, image_size: tuple[int, int]) -> np.ndarray:
    """Ground-truth part label map for one identity, (H, W) uint8.

    Pure function of (identity, size): equal identities give pixel-identical
    silhouettes no matter the clothes or the image seed.
    """
    h, w = image_size
    p = identity_shape_params(identity_id)
    yy, xx = np.mgrid[0:h, 0:w]
    y = yy / h
    x = xx / w
    labels = np.zeros((h, w), dtype=np.uint8)

    cx = 0.5
    torso_top, torso_bot = 0.24, 0.56
    leg_bot = 0.92
    half_t = p["torso_w"] / 2

    # torso
    torso = (y >= torso_top) & (y < torso_bot) & (np.abs(x - cx) <= half_t)
    labels[torso] = TORSO

    # head
    head = ((x - cx) ** 2 + ((y - 0.14) * h / w) ** 2) <= (p["head_r"] * h / w) ** 2
    labels[head] = HEAD

    # arms lean outward by arm_slope as they descend
    arm_w = 0.035
    arm_top, arm_bot = 0.26, 0.50
    for side, label in ((-1, ARM_L), (1, ARM_R)):
        center = cx + side * (half_t + 0.012 + arm_w / 2) \
            + side * p["arm_slope"] * np.clip(y - arm_top, 0, None)
        arm = (y >= arm_top) & (y < arm_bot) & (np.abs(x - center) <= arm_w / 2)
        labels[arm] = label

    # legs and feet
    leg_w = max(half_t - p["leg_gap"] / 2 - 0.01, 0.03)
    foot_top = leg_bot - 0.05
    for side, leg_label in ((-1, LEG_L), (1, LEG_R)):
        center = cx + side * (p["leg_gap"] / 2 + leg_w / 2)
        leg = (y >= torso_bot) & (y < leg_bot) & (np.abs(x - center) <= leg_w / 2)
        labels[leg] = leg_label
        foot = (y >= foot_top) & (y < leg_bot) \
            & (np.abs(x - center) <= leg_w / 2 + 0.015)
        labels[foot] = FEET
    return labels


def render_image(labels: np.ndarray, torso_color: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Colorize a part map; background and pixel noise vary per call."""
    h, w = labels.shape
    bg_level = rng.uniform(90, 160)
    img = np.full((h, w, 3), bg_level, dtype=np.float64)
    img += rng.normal(0, 9, size=(h, w, 3))

    leg_color = torso_color * 0.55
    region_colors = {
        HEAD: np.array(SKIN_COLOR, dtype=np.float64),
        ARM_L: np.array(SKIN_COLOR, dtype=np.float64),
        ARM_R: np.array(SKIN_COLOR, dtype=np.float64),
        TORSO: torso_color,
        LEG_L: leg_color,
        LEG_R: leg_color,
        FEET: np.array(SHOE_COLOR, dtype=np.float64),
    }
    for label, color in region_colors.items():
        mask = labels == label
        img[mask] = color + rng.normal(0, 5, size=(int(mask.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def generate_synthetic_dataset(out_dir, num_ids: int, clothes_per_id: int,
                               images_per_combo: int,
                               image_size: tuple[int, int], rng_seed: int,
                               num_cameras: int = 3,
                               palette_size: int = 4,
                               hue_jitter: float = 0.35) -> DatasetManifest:
    """Render a synthetic cloth-change dataset and write manifest + files.

    Split policy: the last clothes index of every identity is held out as
    the query split (an outfit unseen in training for that identity); of the
    remaining combos, images_per_combo // 4 images go to the gallery and the
    rest to train. Outfit base colors come from shared palette slots and
    each image jitters the hue widely, so color identifies neither a person
    nor an outfit reliably; body shape is the only stable identity cue.
    """
    if min(num_ids, clothes_per_id, images_per_combo) < 1:
        raise ValueError("all synthetic dataset counts must be >= 1")
    h, w = image_size
    if h < 32 or w < 32:
        raise ValueError(f"image_size {image_size} too small; minimum is 32x32")
    palette_size = max(palette_size, clothes_per_id)

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "parts").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(rng_seed)
    records = []
    for identity in range(num_ids):
        labels = render_part_map(identity, image_size)
        part_img = Image.fromarray(labels, mode="L")
        for clothes in range(clothes_per_id):
            base_hue = outfit_base_hue(clothes, clothes_per_id, palette_size)
            if clothes_per_id >= 2 and clothes == clothes_per_id - 1:
                split_of = lambda n: "query"  # noqa: E731
            else:
                n_gallery = images_per_combo // 4
                split_of = lambda n, g=n_gallery: "gallery" if n < g else "train"  # noqa: E731
            for n in range(images_per_combo):
                name = f"id{identity:03d}_c{clothes:02d}_n{n:03d}.png"
                torso_color = sample_outfit_color(base_hue, hue_jitter, rng)
                img = render_image(labels, torso_color, rng)
                Image.fromarray(img, mode="RGB").save(out_dir / "images" / name)
                part_img.save(out_dir / "parts" / name)
                records.append({"path": f"images/{name}", "id": identity,
                                "cam": n % num_cameras, "clothes": clothes,
                                "split": split_of(n)})

    manifest = {"image_size": [h, w], "records": records}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
    return load_manifest(out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# Image / part-map IO
# ---------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode != "RGB":
            img = img.convert("RGB")
        return np.asarray(img, dtype=np.uint8)


def nearest_resample(labels: np.ndarray, target_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resample of an integer label map (no new labels)."""
    h, w = labels.shape
    th, tw = target_size
    rows = np.minimum((np.floor((np.arange(th) + 0.5) * h / th)).astype(int), h - 1)
    cols = np.minimum((np.floor((np.arange(tw) + 0.5) * w / tw)).astype(int), w - 1)
    return labels[np.ix_(rows, cols)]


def load_part_map(path, target_size: tuple[int, int]) -> np.ndarray:
    """Load an indexed part-label PNG and resample it to target_size."""
    with Image.open(path) as img:
        if img.mode != "L":
            img = img.convert("L")
        labels = np.asarray(img, dtype=np.int64)
    if labels.max(initial=0) >= K_PARTS:
        raise ValueError(f"part map {path} contains label {labels.max()} "
                         f">= K_PARTS={K_PARTS}")
    return nearest_resample(labels, target_size)


class SampleCache:
    """Caches decoded images and native-resolution part maps by path."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self._images: dict[str, np.ndarray] = {}
        self._parts: dict[str, np.ndarray] = {}

    def image(self, record: SampleRecord) -> np.ndarray:
        path = self.manifest.resolve(record)
        if path not in self._images:
            self._images[path] = load_image(path)
        return self._images[path]

    def part_map(self, record: SampleRecord) -> np.ndarray:
        path = self.manifest.part_map_path(record)
        if path not in self._parts:
            h, w = self.manifest.image_size
            self._parts[path] = load_part_map(path, (h, w))
        return self._parts[path]
