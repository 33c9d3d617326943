#!/usr/bin/env python3
"""
Toy portrait data for the portrait shadow removal toolkit
Procedural portraits with normal maps, analytic Lambertian relighting,
random facial masks, synthetic shadows, and the paired SE-Net dataset
"""

import os
import json
import glob
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from constants import (
    IMAGE_SIZES, REGIONS, LIGHT_RANGES, FACIAL_MASK_COVERAGE, DATASET_FILES, REAL_FACE_BOX
)
from imaging import (
    ImageTensor, ShadowMask, composite, check_same_size, luminance,
    load_image, save_image, load_mask, save_mask
)
from structure_teacher import extract_structure_teacher

logger = logging.getLogger(__name__)

SYNTHESIS_STRATEGIES = ("relight", "brightness")


class DatasetError(Exception):
    """Exception raised when a dataset directory is missing or inconsistent."""
    pass


class ToyPortrait:
    """Portrait image with its region labels and per-pixel surface normals"""

    def __init__(self, image: ImageTensor, region_map: np.ndarray, normal_map: np.ndarray, seed: Optional[int] = None):
        check_same_size(image, region_map, normal_map)
        if image.channels != 3 or image.value_range != "unit":
            raise ValueError("A portrait image must be unit-range RGB")
        if not np.isin(region_map, list(REGIONS.values())).all():
            raise ValueError("Region map holds unknown labels")
        norms = np.linalg.norm(normal_map, axis=2)
        if np.abs(norms - 1.0).max() > 1e-4:
            raise ValueError("Normal vectors must have unit length")
        self.image = image
        self.region_map = region_map
        self.normal_map = normal_map
        self.seed = seed

    @property
    def size(self) -> int:
        return self.image.height

    def face_mask(self) -> ShadowMask:
        return ShadowMask(self.region_map != REGIONS["BACKGROUND"])

    def region_mask(self, name: str) -> ShadowMask:
        return ShadowMask(self.region_map == REGIONS[name])


class LightSpec:
    """Directional light with ambient term"""

    def __init__(self, direction: Sequence[float], ambient: float, intensity: float):
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != (3,) or abs(np.linalg.norm(direction) - 1.0) > 1e-6:
            raise ValueError(f"Light direction must be a unit 3-vector, got {direction}")
        if ambient < 0 or intensity < 0:
            raise ValueError("Ambient and intensity must be non-negative")
        self.direction = direction
        self.ambient = float(ambient)
        self.intensity = float(intensity)

    def to_dict(self) -> Dict:
        return {"direction": [float(v) for v in self.direction], "ambient": self.ambient,
                "intensity": self.intensity}

    @classmethod
    def from_dict(cls, data: Dict) -> "LightSpec":
        return cls(data["direction"], data["ambient"], data["intensity"])

    def __repr__(self):
        return f"LightSpec(direction={np.round(self.direction, 3).tolist()}, ambient={self.ambient:.3f}, intensity={self.intensity:.3f})"


class PairedSample:
    """One SE-Net training pair plus the components it was composed from"""

    def __init__(self, input: ImageTensor, target_structure: ImageTensor, clean: ImageTensor, mask: ShadowMask,
                 relit: Optional[ImageTensor] = None, light: Optional[LightSpec] = None, record: Optional[Dict] = None):
        check_same_size(input, target_structure, clean, mask)
        self.input = input
        self.target_structure = target_structure
        self.clean = clean
        self.mask = mask
        self.relit = relit
        self.light = light
        self.record = record or {}


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing="ij")


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0) -> np.ndarray:
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * cos_a + dy * sin_a) / rx
    v = (-dx * sin_a + dy * cos_a) / ry
    return u ** 2 + v ** 2 <= 1.0


def _draw_segments(size: int, segments: List[Tuple[float, float, float, float]], width: int = 1) -> np.ndarray:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    for x0, y0, x1, y1 in segments:
        draw.line([(x0, y0), (x1, y1)], fill=255, width=width)
    return np.asarray(canvas) > 0


def generate_toy_portrait(seed: int, size: int = 64) -> ToyPortrait:
    """Draw a deterministic toy portrait

    Args:
        seed: Random seed; the same seed always gives the same portrait
        size: Raster side, one of IMAGE_SIZES

    Returns:
        ToyPortrait: Face ellipse with eyes, hairy brows, mouth, 0-3 moles and an ellipsoid normal map

    Raises:
        ValueError: If the size is not supported
    """
    if size not in IMAGE_SIZES:
        raise ValueError(f"Unsupported portrait size {size}; expected one of {IMAGE_SIZES}")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    scale = size / 64.0

    background = rng.uniform(0.15, 0.55, size=3)
    skin = np.array([rng.uniform(0.62, 0.95), 0.0, 0.0])
    skin[1] = skin[0] * rng.uniform(0.72, 0.86)
    skin[2] = skin[1] * rng.uniform(0.70, 0.88)
    brow_color = rng.uniform(0.05, 0.25) * np.ones(3)
    eye_color = np.array([0.08, 0.08, 0.1]) + rng.uniform(0.0, 0.15, size=3)
    mouth_color = np.array([rng.uniform(0.55, 0.8), rng.uniform(0.2, 0.35), rng.uniform(0.25, 0.4)])
    mole_color = skin * rng.uniform(0.25, 0.45)

    cy = size * (0.52 + rng.uniform(-0.03, 0.03))
    cx = size * (0.5 + rng.uniform(-0.03, 0.03))
    ry = size * rng.uniform(0.38, 0.44)
    rx = size * rng.uniform(0.30, 0.35)

    region = np.full((size, size), REGIONS["BACKGROUND"], dtype=np.int32)
    face = _ellipse(yy, xx, cy, cx, ry, rx)
    region[face] = REGIONS["SKIN"]

    eye_dy = ry * rng.uniform(0.12, 0.2)
    eye_dx = rx * rng.uniform(0.34, 0.44)
    eye_ry = max(1.2, ry * rng.uniform(0.05, 0.08))
    eye_rx = max(2.0, rx * rng.uniform(0.12, 0.17))
    brow_gap = eye_ry + max(2.0, ry * rng.uniform(0.07, 0.11))
    brow_len = eye_rx * rng.uniform(1.1, 1.5)
    brow_tilt = rng.uniform(-0.25, 0.25)

    brows = np.zeros((size, size), dtype=bool)
    eyes = np.zeros((size, size), dtype=bool)
    for side in (-1.0, 1.0):
        ex, ey = cx + side * eye_dx, cy - eye_dy
        eyes |= _ellipse(yy, xx, ey, ex, eye_ry, eye_rx)
        by = ey - brow_gap
        hairs = []
        n_hairs = int(rng.integers(6, 10) * scale)
        for i in range(n_hairs):
            t = (i + rng.uniform(0.0, 0.6)) / n_hairs - 0.5
            hx = ex + t * 2.0 * brow_len
            hy = by + side * brow_tilt * t * brow_len - 0.6 * (1.0 - (2.0 * t) ** 2) * scale
            length = rng.uniform(1.5, 3.0) * scale
            lean = side * rng.uniform(0.4, 1.0)
            hairs.append((hx - 0.5, hy + 0.5, hx + lean * length - 0.5, hy - length * 0.6 + 0.5))
        brows |= _draw_segments(size, hairs, width=max(1, int(round(scale))))
    mouth_cy = cy + ry * rng.uniform(0.42, 0.55)
    mouth = _ellipse(yy, xx, mouth_cy, cx, max(1.2, ry * rng.uniform(0.05, 0.09)), rx * rng.uniform(0.3, 0.45))

    region[brows & face] = REGIONS["BROWS"]
    region[eyes & face] = REGIONS["EYES"]
    region[mouth & face] = REGIONS["MOUTH"]

    n_moles = int(rng.integers(0, 4))
    for _ in range(n_moles):
        radius = rng.uniform(0.5, 1.5) * scale
        for _attempt in range(20):
            my = cy + rng.uniform(-0.6, 0.7) * ry
            mx = cx + rng.uniform(-0.7, 0.7) * rx
            mole = _ellipse(yy, xx, my, mx, radius, radius)
            if mole.any() and (region[mole] == REGIONS["SKIN"]).all():
                region[mole] = REGIONS["MOLE"]
                break

    image = np.empty((size, size, 3), dtype=np.float64)
    colors = {
        REGIONS["BACKGROUND"]: background,
        REGIONS["SKIN"]: skin,
        REGIONS["EYES"]: eye_color,
        REGIONS["BROWS"]: brow_color,
        REGIONS["MOUTH"]: mouth_color,
        REGIONS["MOLE"]: mole_color
    }
    for label, color in colors.items():
        image[region == label] = color
    # faint skin texture so flat regions are not perfectly constant
    texture = ndimage.gaussian_filter(rng.normal(0.0, 0.015, size=(size, size)), 1.0 * scale)
    image[face] += texture[face][:, None]
    image = np.clip(image, 0.0, 1.0)

    normal_map = ellipsoid_normals(size, cy, cx, ry, rx, face)
    logger.debug("Generated toy portrait seed=%d size=%d moles=%d", seed, size, n_moles)
    return ToyPortrait(ImageTensor(image.astype(np.float32), "unit"), region, normal_map, seed=seed)


def ellipsoid_normals(size: int, cy: float, cx: float, ry: float, rx: float,
                      face: Optional[np.ndarray] = None, depth: Optional[float] = None) -> np.ndarray:
    """Unit normals of a half-ellipsoid over the face ellipse, camera-facing elsewhere"""
    yy, xx = _grid(size)
    depth = depth if depth is not None else 0.8 * min(rx, ry)
    u = (xx - cx) / rx
    v = (yy - cy) / ry
    inside = u ** 2 + v ** 2 < 1.0 if face is None else face
    w = np.sqrt(np.clip(1.0 - u ** 2 - v ** 2, 0.0, 1.0))
    normals = np.zeros((size, size, 3), dtype=np.float64)
    normals[:, :, 2] = 1.0
    face_normals = np.stack([u / rx, v / ry, np.maximum(w, 1e-3) / depth], axis=2)
    normals[inside] = face_normals[inside]
    normals /= np.linalg.norm(normals, axis=2, keepdims=True)
    return normals.astype(np.float32)


def portrait_from_image(img: ImageTensor, face_box: Tuple[int, int, int, int]) -> ToyPortrait:
    """Wrap a real portrait using an ellipse inscribed in a face bounding box

    Args:
        img: Unit-range RGB portrait
        face_box: (top, left, bottom, right) pixel bounds of the face

    Returns:
        ToyPortrait: Skin/background labels and a fitted ellipsoid normal map
    """
    if img.height != img.width:
        raise ValueError("Portraits must be square")
    top, left, bottom, right = face_box
    if not (0 <= top < bottom <= img.height and 0 <= left < right <= img.width):
        raise ValueError(f"Face box {face_box} does not fit a {img.height}x{img.width} image")
    size = img.height
    cy, cx = (top + bottom) / 2.0, (left + right) / 2.0
    ry, rx = (bottom - top) / 2.0, (right - left) / 2.0
    yy, xx = _grid(size)
    face = _ellipse(yy, xx, cy, cx, ry, rx)
    region = np.where(face, REGIONS["SKIN"], REGIONS["BACKGROUND"]).astype(np.int32)
    normals = ellipsoid_normals(size, cy, cx, ry, rx, face)
    return ToyPortrait(img, region, normals)


def default_face_box(size: int) -> Tuple[int, int, int, int]:
    """Centered portrait-shaped face box for a size x size image"""
    top, left, bottom, right = REAL_FACE_BOX
    return (int(round(top * size)), int(round(left * size)), int(round(bottom * size)), int(round(right * size)))


def load_portrait_directory(directory: str, face_box: Optional[Tuple[int, int, int, int]] = None) -> List[ToyPortrait]:
    """Load every *clean.png portrait under a directory as a ToyPortrait

    Args:
        directory: Directory of square RGB portraits named like <index>_clean.png
        face_box: Shared (top, left, bottom, right) face bounds; default_face_box when omitted

    Raises:
        DatasetError: If the directory holds no clean portraits
    """
    paths = sorted(glob.glob(os.path.join(directory, "*clean.png")))
    if not paths:
        raise DatasetError(f"No clean portraits found in {directory}")
    logger.info("Loading %d real portraits from %s", len(paths), directory)
    portraits = []
    for path in paths:
        img = load_image(path)
        portraits.append(portrait_from_image(img, face_box or default_face_box(img.height)))
    return portraits


def random_light(rng: np.random.Generator) -> LightSpec:
    """Draw a light from the front hemisphere with ambient/intensity in LIGHT_RANGES"""
    azimuth = rng.uniform(0.0, 2.0 * np.pi)
    elevation = rng.uniform(0.05, 1.0)
    direction = np.array([np.cos(azimuth) * np.sqrt(1.0 - elevation ** 2),
                          np.sin(azimuth) * np.sqrt(1.0 - elevation ** 2),
                          elevation])
    direction /= np.linalg.norm(direction)
    return LightSpec(direction, rng.uniform(*LIGHT_RANGES["AMBIENT"]), rng.uniform(*LIGHT_RANGES["INTENSITY"]))


def synth_relight(p: ToyPortrait, light: LightSpec) -> ImageTensor:
    """Lambertian relighting: clip(I * (ambient + intensity * max(0, n . d)), 0, 1)"""
    shading = np.maximum(0.0, p.normal_map.astype(np.float64) @ light.direction)
    factor = light.ambient + light.intensity * shading
    relit = np.clip(p.image.data.astype(np.float64) * factor[:, :, None], 0.0, 1.0)
    return ImageTensor(relit.astype(np.float32), "unit")


def synth_brightness_shift(p: ToyPortrait, rng: np.random.Generator) -> ImageTensor:
    """Geometry-free relight: global brightness and saturation change"""
    brightness = rng.uniform(0.3, 0.8)
    saturation = rng.uniform(0.6, 1.2)
    image = p.image.data.astype(np.float64)
    gray = luminance(ImageTensor(image, "unit"))[:, :, None]
    adjusted = (gray + saturation * (image - gray)) * brightness
    return ImageTensor(np.clip(adjusted, 0.0, 1.0).astype(np.float32), "unit")


def _face_coverage(mask: np.ndarray, face: np.ndarray) -> float:
    return float(mask[face].mean()) if face.any() else 0.0


def _random_cut(rng: np.random.Generator, size: int, face: np.ndarray) -> np.ndarray:
    """One random ellipse or polygon cut over the face bounding box"""
    rows, cols = np.nonzero(face)
    top, bottom, left, right = rows.min(), rows.max(), cols.min(), cols.max()
    kind = rng.integers(0, 2)
    if kind == 0:
        yy, xx = _grid(size)
        cy, cx = rng.uniform(top, bottom), rng.uniform(left, right)
        ry = rng.uniform(0.1, 0.35) * (bottom - top + 1)
        rx = rng.uniform(0.1, 0.35) * (right - left + 1)
        return _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0.0, np.pi))
    canvas = Image.new("L", (size, size), 0)
    n_vertices = int(rng.integers(3, 7))
    center = (rng.uniform(left, right), rng.uniform(top, bottom))
    radius = rng.uniform(0.12, 0.35) * max(bottom - top, right - left)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n_vertices))
    vertices = [(center[0] + radius * rng.uniform(0.5, 1.0) * np.cos(a),
                 center[1] + radius * rng.uniform(0.5, 1.0) * np.sin(a)) for a in angles]
    ImageDraw.Draw(canvas).polygon(vertices, fill=255)
    return np.asarray(canvas) > 0


def random_facial_mask(p: ToyPortrait, seed: int) -> ShadowMask:
    """Union of 1-3 random cuts intersected with the face, covering 10-60% of it

    The first cut is a half-plane placed at a drawn coverage quantile;
    ellipse/polygon cuts are added only while coverage stays within bounds.
    """
    rng = np.random.default_rng(seed)
    face = p.region_map != REGIONS["BACKGROUND"]
    size = p.size
    yy, xx = _grid(size)
    low, high = FACIAL_MASK_COVERAGE

    target = rng.uniform(low + 0.05, high - 0.15)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    projection = np.cos(angle) * xx + np.sin(angle) * yy
    threshold = np.quantile(projection[face], 1.0 - target)
    mask = (projection > threshold) & face

    for _ in range(int(rng.integers(0, 3))):
        candidate = mask | (_random_cut(rng, size, face) & face)
        if _face_coverage(candidate, face) <= high:
            mask = candidate
    return ShadowMask(mask)


def synth_shadow(p: ToyPortrait, mask: ShadowMask, darkness: float, softness: float = 0.0) -> ImageTensor:
    """Darken a portrait under a (optionally blurred) mask: I * (1 - darkness * blur(M))

    Raises:
        ValueError: Unless 0 < darkness < 1 and softness >= 0
    """
    if not 0.0 < darkness < 1.0:
        raise ValueError(f"Darkness must lie in (0, 1), got {darkness}")
    if softness < 0:
        raise ValueError(f"Softness must be non-negative, got {softness}")
    check_same_size(p.image, mask)
    weight = mask.as_float(np.float64)
    if softness > 0:
        weight = ndimage.gaussian_filter(weight, softness, mode="constant")
    shaded = p.image.data.astype(np.float64) * (1.0 - darkness * weight)[:, :, None]
    return ImageTensor(np.clip(shaded, 0.0, 1.0).astype(np.float32), "unit")


def make_paired_sample(p: ToyPortrait, light: Optional[LightSpec], mask: ShadowMask,
                       relit: Optional[ImageTensor] = None, record: Optional[Dict] = None) -> PairedSample:
    """Compose I_syn = M * I_relit + (1 - M) * I and the analytic structure map of the clean portrait"""
    if relit is None:
        relit = synth_relight(p, light)
    synthetic = composite(p.image, relit, mask)
    structure = extract_structure_teacher(p.image)
    return PairedSample(synthetic, structure, p.image, mask, relit=relit, light=light, record=record)


def sample_seeds(seed: int, index: int) -> Tuple[int, int, int]:
    """Independent (portrait, light, mask) seeds for one dataset index"""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def _build_one(seed: int, index: int, size: int, strategy: str,
               portraits: Optional[Sequence[ToyPortrait]] = None) -> PairedSample:
    portrait_seed, light_seed, mask_seed = sample_seeds(seed, index)
    if portraits:
        portrait = portraits[index % len(portraits)]
    else:
        portrait = generate_toy_portrait(portrait_seed, size)
    light_rng = np.random.default_rng(light_seed)
    mask = random_facial_mask(portrait, mask_seed)
    record = {
        "index": index,
        "seed": seed,
        "portrait_seed": portrait_seed,
        "light_seed": light_seed,
        "mask_seed": mask_seed,
        "strategy": strategy,
        "mask_coverage": _face_coverage(mask.data, portrait.region_map != REGIONS["BACKGROUND"])
    }
    if portraits:
        record["portrait_index"] = index % len(portraits)
    if strategy == "relight":
        light = random_light(light_rng)
        record["light"] = light.to_dict()
        return make_paired_sample(portrait, light, mask, record=record)
    relit = synth_brightness_shift(portrait, light_rng)
    return make_paired_sample(portrait, None, mask, relit=relit, record=record)


def build_senet_dataset(n: int, seed: int, size: int = 64, strategy: str = "relight",
                        workers: int = 1, portraits: Optional[Sequence[ToyPortrait]] = None) -> List[PairedSample]:
    """Build the synthetic paired dataset used to train SE-Net

    Args:
        n: Number of samples
        seed: Dataset seed; per-index seeds are derived from it
        size: Raster side
        strategy: "relight" (Lambertian) or "brightness" (geometry-free adjustment)
        workers: Thread count; results do not depend on it
        portraits: Real portraits to relight instead of procedural ones, cycled by index

    Returns:
        list: PairedSample objects in index order

    Raises:
        DatasetError: If a supplied portrait is not size x size
    """
    if n < 1:
        raise ValueError(f"Dataset size must be at least 1, got {n}")
    if strategy not in SYNTHESIS_STRATEGIES:
        raise ValueError(f"Unknown synthesis strategy {strategy}; expected one of {SYNTHESIS_STRATEGIES}")
    if portraits is not None:
        if not portraits:
            raise ValueError("The portrait list is empty")
        wrong = [p.size for p in portraits if p.size != size]
        if wrong:
            raise DatasetError(f"Portraits must be {size}x{size}, found side {wrong[0]}")
    logger.info("Building SE-Net dataset: n=%d seed=%d size=%d strategy=%s source=%s", n, seed, size, strategy,
                "procedural" if portraits is None else f"{len(portraits)} portraits")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(lambda i: _build_one(seed, i, size, strategy, portraits), range(n)))
    else:
        samples = [_build_one(seed, i, size, strategy, portraits) for i in range(n)]
    logger.info("Built %d paired samples", len(samples))
    return samples


def write_dataset(samples: List[PairedSample], root: str, split: str = "train") -> str:
    """Write samples as <root>/<split>/<index>_{input,clean,structure,mask}.png plus manifest.jsonl"""
    directory = os.path.join(root, split)
    os.makedirs(directory, exist_ok=True)
    manifest_path = os.path.join(directory, DATASET_FILES["MANIFEST"])
    with open(manifest_path, "w", encoding="utf-8") as manifest:
        for position, sample in enumerate(samples):
            index = sample.record.get("index", position)
            save_image(sample.input, os.path.join(directory, DATASET_FILES["INPUT"].format(index=index)))
            save_image(sample.clean, os.path.join(directory, DATASET_FILES["CLEAN"].format(index=index)))
            save_image(sample.target_structure, os.path.join(directory, DATASET_FILES["STRUCTURE"].format(index=index)))
            save_mask(sample.mask, os.path.join(directory, DATASET_FILES["MASK"].format(index=index)))
            record = dict(sample.record)
            record["index"] = index
            manifest.write(json.dumps(record, sort_keys=True) + "\n")
    logger.info("Wrote %d samples to %s", len(samples), directory)
    return directory


def read_manifest(root: str, split: str = "train") -> List[Dict]:
    manifest_path = os.path.join(root, split, DATASET_FILES["MANIFEST"])
    if not os.path.exists(manifest_path):
        raise DatasetError(f"Dataset manifest not found: {manifest_path}")
    records = []
    with open(manifest_path, "r", encoding="utf-8") as manifest:
        for line_number, line in enumerate(manifest, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DatasetError(f"Bad manifest line {line_number} in {manifest_path}: {e}") from e
    return records


def read_dataset(root: str, split: str = "train") -> List[PairedSample]:
    """Read a dataset written by write_dataset"""
    directory = os.path.join(root, split)
    samples = []
    for record in read_manifest(root, split):
        index = record["index"]
        try:
            clean = load_image(os.path.join(directory, DATASET_FILES["CLEAN"].format(index=index)))
            synthetic = load_image(os.path.join(directory, DATASET_FILES["INPUT"].format(index=index)))
            structure = load_image(os.path.join(directory, DATASET_FILES["STRUCTURE"].format(index=index)))
            mask = load_mask(os.path.join(directory, DATASET_FILES["MASK"].format(index=index)))
        except OSError as e:
            raise DatasetError(f"Incomplete sample {index} in {directory}: {e}") from e
        light = LightSpec.from_dict(record["light"]) if "light" in record else None
        samples.append(PairedSample(synthetic, structure, clean, mask, light=light, record=record))
    logger.info("Read %d samples from %s", len(samples), directory)
    return samples
