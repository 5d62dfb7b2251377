# app/synthdata.py

"""
Synthetic scenes with exact masks, and caption-style QA pairs.

Objects sit on patch-aligned cells over a neutral background, so a perfect
attribution on the token grid is always expressible. The answer follows a
fixed template ("I see a X as well as a Y ... <eos>") listing objects in
raster order of their top-left cells; template words are annotated as filler.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import aiofiles
import numpy as np
from PIL import Image, ImageDraw
from pydantic import ValidationError

from app.config import (
    BACKGROUND_RGB,
    BOS_TOKEN_ID,
    EOS_TOKEN_ID,
    EVAL_SEED_OFFSET,
    MAX_REJECTED_SEEDS,
    PAD_TOKEN_ID,
    PLACEMENT_RETRIES,
)
from app.errors import DatasetError, DatasetFormatError, SceneGenerationError
from app.models import DatasetManifest, DatasetSpec, ModelConfig, ObjectEntry, SampleEntry

logger = logging.getLogger(__name__)

SHAPES = ("square", "circle", "triangle")
COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "magenta": (200, 50, 200),
    "cyan": (40, 200, 210),
}
# object side in patch cells, per shape; an inscribed circle or triangle needs 3 cells to cover one cell fully
SHAPE_SIZES = {"square": (1, 2), "circle": (3,), "triangle": (3,)}

PROMPT = ("classify", "the", "image")
FILLER_WORDS = ("I", "see", "a", "as", "well")
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")


class Vocabulary:
    """Fixed word-level vocabulary; special tokens occupy the reserved ids"""

    def __init__(self, words: Optional[Sequence[str]] = None):
        words = list(words) if words is not None else list(PROMPT) + list(FILLER_WORDS) + list(SHAPES)
        self.tokens: List[str] = list(SPECIAL_TOKENS) + [w for w in dict.fromkeys(words) if w not in SPECIAL_TOKENS]
        self.ids = {token: i for i, token in enumerate(self.tokens)}

    @property
    def specials(self) -> Tuple[int, int, int]:
        return PAD_TOKEN_ID, BOS_TOKEN_ID, EOS_TOKEN_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> List[int]:
        try:
            return [self.ids[w] for w in words]
        except KeyError as e:
            raise DatasetError(f"word {e.args[0]!r} is not in the vocabulary") from e

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.tokens[i] if 0 <= i < len(self.tokens) else f"<unk:{i}>" for i in ids]


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    shape: str
    color: str
    row: int   # top-left cell
    col: int
    size: int  # side in cells

    def cells(self) -> List[Tuple[int, int]]:
        return [(self.row + r, self.col + c) for r in range(self.size) for c in range(self.size)]

    def overlaps(self, other: "SceneObject") -> bool:
        return not (self.row + self.size <= other.row or other.row + other.size <= self.row
                    or self.col + self.size <= other.col or other.col + other.size <= self.col)


@dataclass
class Scene:
    seed: int
    pixels: np.ndarray           # uint8 [side, side, 3]
    objects: List[SceneObject]
    masks: List[np.ndarray]      # bool [side, side], one per object
    patch_size: int
    image: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.image = self.pixels.astype(np.float64) / 255.0

    @property
    def side(self) -> int:
        return self.pixels.shape[0]


@dataclass
class QASample:
    index: int
    scene: Scene
    prompt: List[str]
    answer: List[str]
    filler_mask: List[int]       # 1 content, 0 filler
    content_objects: List[int]   # object index per answer position, -1 for filler
    prompt_ids: List[int]
    answer_ids: List[int]

    @property
    def image(self) -> np.ndarray:
        return self.scene.image

    def object_grid(self, obj: int) -> np.ndarray:
        return cell_mask(self.scene.masks[obj], self.scene.patch_size)

    def token_grid(self, position: int) -> Optional[np.ndarray]:
        """Ground-truth cell mask of the object named at answer ``position``, None for filler"""
        obj = self.content_objects[position]
        return None if obj < 0 else self.object_grid(obj)

    def union_grid(self) -> np.ndarray:
        grids = [self.object_grid(i) for i in range(len(self.scene.objects))]
        return np.logical_or.reduce(grids).astype(np.float64)


def cell_mask(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Pixel mask -> token-grid mask; a cell counts when the object covers at least half of it"""
    side = mask.shape[0]
    if side % patch_size:
        raise DatasetError(f"mask side {side} is not divisible by patch size {patch_size}")
    g = side // patch_size
    coverage = mask.astype(np.float64).reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))
    return (coverage >= 0.5).astype(np.float64)


def covered_cells(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Cells whose every pixel lies inside the mask"""
    side = mask.shape[0]
    if side % patch_size:
        raise DatasetError(f"mask side {side} is not divisible by patch size {patch_size}")
    g = side // patch_size
    return np.asarray(mask, dtype=bool).reshape(g, patch_size, g, patch_size).all(axis=(1, 3))


def _draw(obj: SceneObject, patch_size: int, side: int) -> np.ndarray:
    layer = Image.new("L", (side, side), 0)
    draw = ImageDraw.Draw(layer)
    x0, y0 = obj.col * patch_size, obj.row * patch_size
    extent = obj.size * patch_size
    x1, y1 = x0 + extent - 1, y0 + extent - 1
    if obj.shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif obj.shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=255)
    else:
        draw.polygon([(x0 + extent / 2.0, y0), (x0, y1), (x1, y1)], fill=255)
    return np.asarray(layer) > 0


def gen_scene(seed: int, n_objects: int, config: ModelConfig) -> Scene:
    """Render ``n_objects`` distinct shapes on patch-aligned cells; pure function of the seed"""
    if not 1 <= n_objects <= len(SHAPES):
        raise DatasetError(f"n_objects must be in [1, {len(SHAPES)}], got {n_objects}")
    rng = np.random.default_rng(seed)
    side, patch = config.image_side, config.patch_size
    grid = side // patch

    shapes = [SHAPES[i] for i in rng.permutation(len(SHAPES))[:n_objects]]
    colors = list(COLORS)
    drawn = [(shape, int(rng.choice(SHAPE_SIZES[shape])), colors[int(rng.integers(len(colors)))]) for shape in shapes]
    placed: List[SceneObject] = []
    # largest first, so small squares fill the leftover strips
    for shape, size, color in sorted(drawn, key=lambda d: -d[1]):
        if size > grid:
            raise SceneGenerationError(f"seed {seed}: a {size}-cell {shape} does not fit a {grid}x{grid} grid")
        for _ in range(PLACEMENT_RETRIES):
            row, col = (int(v) for v in rng.integers(0, grid - size + 1, size=2))
            candidate = SceneObject(shape, shape, color, row, col, size)
            if not any(candidate.overlaps(other) for other in placed):
                placed.append(candidate)
                break
        else:
            raise SceneGenerationError(f"seed {seed}: could not place {shape} after {PLACEMENT_RETRIES} attempts")

    placed.sort(key=lambda o: (o.row, o.col))
    pixels = np.empty((side, side, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND_RGB
    masks = []
    for obj in placed:
        mask = _draw(obj, patch, side)
        if not covered_cells(mask, patch).any():
            raise SceneGenerationError(f"seed {seed}: {obj.shape} fully covers no patch cell")
        pixels[mask] = COLORS[obj.color]
        masks.append(mask)
    return Scene(seed=seed, pixels=pixels, objects=placed, masks=masks, patch_size=patch)


def build_qa(scene: Scene, vocab: Vocabulary, index: int = 0) -> QASample:
    if not scene.objects:
        raise DatasetError(f"scene {scene.seed} has no objects")
    answer, filler, content = ["I", "see", "a"], [0, 0, 0], [-1, -1, -1]
    for i, obj in enumerate(scene.objects):
        if i:
            answer += ["as", "well", "as", "a"]
            filler += [0, 0, 0, 0]
            content += [-1, -1, -1, -1]
        answer.append(obj.class_name)
        filler.append(1)
        content.append(i)
    answer.append("<eos>")
    filler.append(0)
    content.append(-1)
    return QASample(index=index, scene=scene, prompt=list(PROMPT), answer=answer, filler_mask=filler,
                    content_objects=content, prompt_ids=vocab.encode(PROMPT), answer_ids=vocab.encode(answer))


def make_dataset(spec: DatasetSpec, config: ModelConfig, vocab: Vocabulary, split: str = "train") -> List[QASample]:
    """Deterministic split; seeds that fail placement are skipped and reported"""
    if split not in ("train", "eval"):
        raise DatasetError(f"unknown split {split!r}")
    count = spec.n_train if split == "train" else spec.n_eval
    seed = spec.seed + (EVAL_SEED_OFFSET if split == "eval" else 0)
    samples: List[QASample] = []
    rejected = streak = 0
    while len(samples) < count:
        if streak >= MAX_REJECTED_SEEDS:
            raise DatasetError(f"{streak} consecutive seeds rejected up to {seed}; objects {spec.min_objects}-"
                               f"{spec.max_objects} do not fit a {config.grid_w}x{config.grid_h} grid")
        n_objects = int(np.random.default_rng((seed, 0)).integers(spec.min_objects, spec.max_objects + 1))
        try:
            scene = gen_scene(seed, n_objects, config)
        except SceneGenerationError as e:
            logger.warning(f"Rejected seed: {e}")
            rejected += 1
            streak += 1
        else:
            streak = 0
            samples.append(build_qa(scene, vocab, index=len(samples)))
        seed += 1
    logger.info(f"Generated {len(samples)} {split} samples ({rejected} seeds rejected)")
    return samples


def dataset_mean_pixel(samples: Sequence[QASample]) -> np.ndarray:
    """Per-channel mean pixel value over the whole dataset"""
    if not samples:
        raise DatasetError("mean pixel of an empty dataset")
    total = np.zeros(samples[0].image.shape[-1])
    count = 0
    for sample in samples:
        total += sample.image.sum(axis=(0, 1))
        count += sample.image.shape[0] * sample.image.shape[1]
    return total / count


def mean_image(samples: Sequence[QASample]) -> np.ndarray:
    """Image filled with the dataset mean pixel"""
    mean = dataset_mean_pixel(samples)
    return np.broadcast_to(mean, samples[0].image.shape).copy()


# --- on-disk format -------------------------------------------------------------

MANIFEST = "manifest.json"
IMAGES = "images.bin"
MASKS = "masks.bin"


def _entry(sample: QASample, image_offset: int, mask_offset: int) -> SampleEntry:
    scene = sample.scene
    return SampleEntry(
        index=sample.index,
        seed=scene.seed,
        objects=[ObjectEntry(class_name=o.class_name, shape=o.shape, color=o.color,
                             row=o.row, col=o.col, size=o.size) for o in scene.objects],
        prompt=sample.prompt,
        answer=sample.answer,
        filler_mask=sample.filler_mask,
        content_objects=sample.content_objects,
        image_offset=image_offset,
        image_length=int(scene.pixels.size),
        mask_offset=mask_offset,
        mask_length=int(scene.side * scene.side * len(scene.masks)),
    )


async def serialize_dataset(samples: Sequence[QASample], directory: str, config: ModelConfig,
                            spec: Optional[DatasetSpec] = None) -> None:
    """Write manifest.json plus row-major 8-bit image and mask blobs; ``spec`` is recorded without its path"""
    os.makedirs(directory, exist_ok=True)
    entries, images, masks = [], [], []
    image_offset = mask_offset = 0
    for sample in samples:
        entry = _entry(sample, image_offset, mask_offset)
        entries.append(entry)
        images.append(np.ascontiguousarray(sample.scene.pixels, dtype=np.uint8).tobytes())
        masks.append(np.stack(sample.scene.masks).astype(np.uint8).tobytes())
        image_offset += entry.image_length
        mask_offset += entry.mask_length
    manifest = DatasetManifest(image_side=config.image_side, channels=3, count=len(entries), entries=entries,
                               spec=spec.without_path() if spec is not None else None)

    async with aiofiles.open(os.path.join(directory, MANIFEST), "w") as f:
        await f.write(json.dumps(manifest.model_dump(), indent=2, sort_keys=True))
    async with aiofiles.open(os.path.join(directory, IMAGES), "wb") as f:
        await f.write(b"".join(images))
    async with aiofiles.open(os.path.join(directory, MASKS), "wb") as f:
        await f.write(b"".join(masks))
    logger.info(f"Wrote {len(entries)} samples to {directory}")


def _slice(blob: bytes, offset: int, length: int, what: str) -> bytes:
    if offset < 0 or length < 0 or offset + length > len(blob):
        raise DatasetFormatError(f"{what} range [{offset}, {offset + length}) exceeds blob of {len(blob)} bytes")
    return blob[offset:offset + length]


async def read_manifest(directory: str) -> DatasetManifest:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise DatasetFormatError(f"manifest not found: {path}")
    async with aiofiles.open(path, "r") as f:
        text = await f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"corrupted manifest {path} at byte {e.pos}: {e.msg}") from e
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise DatasetFormatError(f"invalid manifest {path}: {e}") from e
    if manifest.count != len(manifest.entries):
        raise DatasetFormatError(f"manifest count {manifest.count} disagrees with {len(manifest.entries)} entries")
    return manifest


async def deserialize_dataset(directory: str, vocab: Vocabulary, patch_size: int) -> List[QASample]:
    manifest = await read_manifest(directory)

    async with aiofiles.open(os.path.join(directory, IMAGES), "rb") as f:
        images = await f.read()
    async with aiofiles.open(os.path.join(directory, MASKS), "rb") as f:
        masks = await f.read()

    side, channels = manifest.image_side, manifest.channels
    samples = []
    for entry in manifest.entries:
        if entry.image_length != side * side * channels:
            raise DatasetFormatError(f"sample {entry.index}: image length {entry.image_length} does not match header")
        pixels = np.frombuffer(_slice(images, entry.image_offset, entry.image_length, "image"), dtype=np.uint8)
        n_obj = len(entry.objects)
        if entry.mask_length != side * side * n_obj:
            raise DatasetFormatError(f"sample {entry.index}: mask length {entry.mask_length} does not match objects")
        mask_bytes = np.frombuffer(_slice(masks, entry.mask_offset, entry.mask_length, "mask"), dtype=np.uint8)
        object_masks = mask_bytes.reshape(n_obj, side, side).astype(bool)
        scene = Scene(
            seed=entry.seed,
            pixels=pixels.reshape(side, side, channels).copy(),
            objects=[SceneObject(o.class_name, o.shape, o.color, o.row, o.col, o.size) for o in entry.objects],
            masks=[m.copy() for m in object_masks],
            patch_size=patch_size,
        )
        try:
            samples.append(QASample(index=entry.index, scene=scene, prompt=entry.prompt, answer=entry.answer,
                                    filler_mask=entry.filler_mask, content_objects=entry.content_objects,
                                    prompt_ids=vocab.encode(entry.prompt), answer_ids=vocab.encode(entry.answer)))
        except DatasetError as e:
            raise DatasetFormatError(f"sample {entry.index}: {e}") from e
    logger.info(f"Loaded {len(samples)} samples from {directory}")
    return samples
