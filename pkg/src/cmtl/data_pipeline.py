"""Dataset ingestion, patch augmentation, count quantization, and synthesis.

The training distribution follows the 300-patches-per-image recipe: 100
random half-size crops, plus 100 horizontal flips and 100 noisy copies of
those crops. Crowd counts are quantized into ``N_GROUPS`` ordinal classes at
equal-frequency boundaries fitted on the training counts, and class weights
compensate for the remaining imbalance.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError, InputError
from .ground_truth import GroundTruthConfig, generate_density_map

N_GROUPS = 10
CROPS_PER_IMAGE = 100
NOISE_STD = 0.01  # additive Gaussian, in [0,1] pixel units

AUGMENTATIONS = ("none", "hflip", "noise")


@dataclass
class DotAnnotatedImage:
    """A grayscale [0,1] image with (x, y) head-center annotations."""

    image: np.ndarray
    heads: np.ndarray  # (N, 2) float, x rightward / y downward, origin top-left
    id: str


@dataclass
class CountGroupLabel:
    """Ordinal crowd-count class, consistent with the shared boundary list."""

    class_index: int
    boundaries: tuple

    @property
    def n_groups(self) -> int:
        return len(self.boundaries) + 1


@dataclass
class TrainingPatch:
    image: np.ndarray
    density: np.ndarray
    count: float
    source_id: str
    augmentation: str = "none"
    group_label: CountGroupLabel | None = field(default=None)


def _to_grayscale_float(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr


def load_dataset(manifest_path) -> list[DotAnnotatedImage]:
    """Load a JSON manifest: [{"id": str, "image": relative PNG path, "heads": [[x,y],...]}].

    Images are converted to single-channel grayscale in [0,1] at ingestion.
    """
    manifest_path = Path(manifest_path)
    try:
        entries = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError(f"manifest {manifest_path} must be a JSON list")

    images = []
    for i, entry in enumerate(entries):
        image_id = entry.get("id", f"entry {i}") if isinstance(entry, dict) else f"entry {i}"
        if not isinstance(entry, dict) or not {"id", "image", "heads"} <= entry.keys():
            raise DataError(f"{image_id}: manifest entries need id/image/heads fields")
        img_path = manifest_path.parent / entry["image"]
        try:
            with Image.open(img_path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"{image_id}: cannot open image {img_path}: {exc}") from exc
        try:
            heads = np.asarray(entry["heads"], dtype=np.float64).reshape(-1, 2)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{image_id}: malformed head coordinates: {exc}") from exc
        h, w = arr.shape
        for x, y in heads:
            if not (math.isfinite(x) and math.isfinite(y)):
                raise DataError(f"{image_id}: non-finite head coordinate ({x}, {y})")
            if not (0 <= x < w and 0 <= y < h):
                raise DataError(f"{image_id}: head ({x}, {y}) outside image bounds {w}x{h}")
        images.append(DotAnnotatedImage(image=arr, heads=heads, id=str(entry["id"])))
    return images


def save_dataset(images: list[DotAnnotatedImage], out_dir) -> Path:
    """Write <id>.png per image plus manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for img in images:
        png_name = f"{img.id}.png"
        data = np.clip(np.rint(img.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(out_dir / png_name)
        entries.append({
            "id": img.id,
            "image": png_name,
            "heads": [[float(x), float(y)] for x, y in img.heads],
        })
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2, sort_keys=True))
    return manifest


def fit_group_boundaries(counts, n_groups: int = N_GROUPS) -> list[float]:
    """Equal-frequency cut points: boundary j is the sorted count at index ceil(j*n/M).

    Duplicate cut points are nudged up to the next distinct count value (or by
    +1 past the maximum) so the boundaries stay strictly ascending.
    """
    counts = [float(c) for c in counts]
    if not counts:
        raise InputError("cannot fit group boundaries on an empty count list")
    if n_groups < 2:
        raise InputError(f"need at least 2 groups, got {n_groups}")
    svals = sorted(counts)
    if svals[0] == svals[-1]:
        raise InputError(
            f"all {len(counts)} counts equal {svals[0]}; equal-frequency boundaries are "
            "degenerate — fall back to uniform-width boundaries over the expected count range"
        )
    n = len(svals)
    boundaries: list[float] = []
    for j in range(1, n_groups):
        cut = svals[min(n - 1, math.ceil(j * n / n_groups))]
        if boundaries and cut <= boundaries[-1]:
            higher = [v for v in svals if v > boundaries[-1]]
            cut = higher[0] if higher else boundaries[-1] + 1.0
        boundaries.append(cut)
    return boundaries


def quantize_count(count: float, boundaries) -> CountGroupLabel:
    """Class index = number of boundaries <= count (ties map upward)."""
    boundaries = tuple(float(b) for b in boundaries)
    idx = int(np.searchsorted(boundaries, count, side="right"))
    return CountGroupLabel(class_index=idx, boundaries=boundaries)


def _heads_in_window(heads: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    if len(heads) == 0:
        return heads.reshape(0, 2)
    x, y = heads[:, 0], heads[:, 1]
    keep = (x >= x0) & (x < x0 + w) & (y >= y0) & (y < y0 + h)
    return heads[keep] - np.array([x0, y0], dtype=np.float64)


def make_patches(img: DotAnnotatedImage, cfg: GroundTruthConfig, rng_seed: int,
                 boundaries=None) -> list[TrainingPatch]:
    """The 300-patch augmentation: 100 random half-size crops + 100 flips + 100 noisy.

    Patch densities come from the heads inside each crop (rebased to crop
    coordinates); mass outside the crop does not bleed in. Group labels are
    assigned only when ``boundaries`` is given — fit them on pooled patch
    counts first, then call :func:`assign_group_labels`.
    """
    arr = np.asarray(img.image)
    if arr.ndim != 2:
        raise InputError(f"{img.id}: patch generation expects a 2-D grayscale image")
    h, w = arr.shape
    ph, pw = h // 2, w // 2
    if ph < 2 or pw < 2:
        raise InputError(f"{img.id}: image {h}x{w} too small for half-size crops")

    rng = np.random.default_rng(rng_seed)
    heads = np.asarray(img.heads, dtype=np.float64).reshape(-1, 2)

    crops: list[TrainingPatch] = []
    for _ in range(CROPS_PER_IMAGE):
        y0 = int(rng.integers(0, h - ph + 1))
        x0 = int(rng.integers(0, w - pw + 1))
        sub = _heads_in_window(heads, x0, y0, pw, ph)
        density = generate_density_map((ph, pw), sub, cfg)
        crops.append(TrainingPatch(
            image=arr[y0:y0 + ph, x0:x0 + pw].copy(),
            density=density,
            count=float(len(sub)),
            source_id=img.id,
        ))

    flips = [TrainingPatch(
        image=p.image[:, ::-1].copy(),
        density=p.density[:, ::-1].copy(),
        count=p.count,
        source_id=p.source_id,
        augmentation="hflip",
    ) for p in crops]

    noisy = []
    for p in crops:
        jittered = p.image + rng.normal(0.0, NOISE_STD, size=p.image.shape).astype(np.float32)
        noisy.append(TrainingPatch(
            image=np.clip(jittered, 0.0, 1.0),
            density=p.density.copy(),
            count=p.count,
            source_id=p.source_id,
            augmentation="noise",
        ))

    patches = crops + flips + noisy
    if boundaries is not None:
        assign_group_labels(patches, boundaries)
    return patches


def images_to_patches(images, cfg: GroundTruthConfig, boundaries=None) -> list[TrainingPatch]:
    """Whole images as unaugmented fixed-size training samples."""
    patches = []
    for img in images:
        arr = np.asarray(img.image, dtype=np.float32)
        density = generate_density_map(arr.shape, img.heads, cfg)
        patches.append(TrainingPatch(
            image=arr, density=density, count=float(len(img.heads)), source_id=img.id,
        ))
    if boundaries is not None:
        assign_group_labels(patches, boundaries)
    return patches


def assign_group_labels(patches, boundaries):
    for p in patches:
        p.group_label = quantize_count(p.count, boundaries)
    return patches


def compute_class_weights(labels, n_groups: int = N_GROUPS) -> np.ndarray:
    """Inverse-frequency weights total/(M*n_j), rescaled to mean 1.

    Classes absent from ``labels`` get the largest raw weight present.
    """
    if len(labels) == 0:
        raise InputError("cannot compute class weights from an empty label list")
    idx = np.array([l.class_index if isinstance(l, CountGroupLabel) else int(l) for l in labels])
    if idx.min() < 0 or idx.max() >= n_groups:
        raise InputError(f"label index outside [0, {n_groups})")
    n_per_class = np.bincount(idx, minlength=n_groups).astype(np.float64)
    total = float(len(labels))
    present = n_per_class > 0
    raw = np.zeros(n_groups)
    raw[present] = total / (n_groups * n_per_class[present])
    raw[~present] = raw[present].max()
    return raw / raw.mean()


def build_training_set(images, cfg: GroundTruthConfig, seed: int, augment: bool = False,
                       n_groups: int = N_GROUPS):
    """Patches + fitted boundaries + class weights in one pre-pass.

    ``augment`` switches between whole-image samples (desk-scale default) and
    the full 300-patch recipe. Per-image patch seeds derive from ``seed``.
    """
    if augment:
        patches = []
        for i, img in enumerate(images):
            patches.extend(make_patches(img, cfg, rng_seed=seed + i))
    else:
        patches = images_to_patches(images, cfg)
    boundaries = fit_group_boundaries([p.count for p in patches], n_groups)
    assign_group_labels(patches, boundaries)
    weights = compute_class_weights([p.group_label for p in patches], n_groups)
    return patches, boundaries, weights


def _bilinear_resize(coarse: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    gh, gw = coarse.shape
    yi = np.linspace(0.0, gh - 1.0, h)
    xi = np.linspace(0.0, gw - 1.0, w)
    y0 = np.floor(yi).astype(int)
    x0 = np.floor(xi).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    top = coarse[np.ix_(y0, x0)] * (1 - fx) + coarse[np.ix_(y0, x1)] * fx
    bot = coarse[np.ix_(y1, x0)] * (1 - fx) + coarse[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def synthesize_dataset(n_images: int, size, count_range, blob_radius: float = 3.0,
                       rng_seed: int = 0) -> list[DotAnnotatedImage]:
    """Desk-scale synthetic crowd images: Gaussian-intensity head blobs on texture.

    Each image holds k ~ Uniform[lo, hi] blobs at random centers separated by
    at least one blob radius; the exact centers are the head annotations.
    """
    h, w = int(size[0]), int(size[1])
    lo, hi = int(count_range[0]), int(count_range[1])
    if h < 16 or w < 16:
        raise InputError(f"synthetic images must be at least 16x16, got {h}x{w}")
    if not (0 <= lo <= hi):
        raise InputError(f"count range must satisfy 0 <= lo <= hi, got {count_range}")
    if blob_radius <= 0:
        raise InputError(f"blob radius must be positive, got {blob_radius}")

    min_sep = float(blob_radius)
    rng = np.random.default_rng(rng_seed)
    sigma_b = blob_radius / 2.0
    reach = math.ceil(3 * sigma_b)

    images = []
    for n in range(n_images):
        k = int(rng.integers(lo, hi + 1))
        centers: list[tuple[float, float]] = []
        attempts = 0
        while len(centers) < k:
            attempts += 1
            if attempts > 200 * max(k, 1) + 200:
                raise InputError(
                    f"cannot place {k} blobs of radius {blob_radius} in a {h}x{w} image "
                    f"with separation {min_sep}"
                )
            x = rng.uniform(0.0, w - 1.0)
            y = rng.uniform(0.0, h - 1.0)
            if all((x - cx) ** 2 + (y - cy) ** 2 >= min_sep ** 2 for cx, cy in centers):
                centers.append((x, y))

        coarse = rng.uniform(0.05, 0.25, size=(max(2, h // 8), max(2, w // 8)))
        canvas = _bilinear_resize(coarse, (h, w))
        for cx, cy in centers:
            amp = rng.uniform(0.5, 0.9)
            x0, x1 = max(0, int(round(cx)) - reach), min(w, int(round(cx)) + reach + 1)
            y0, y1 = max(0, int(round(cy)) - reach), min(h, int(round(cy)) + reach + 1)
            dx = np.arange(x0, x1, dtype=np.float64) - cx
            dy = np.arange(y0, y1, dtype=np.float64) - cy
            canvas[y0:y1, x0:x1] += amp * np.exp(
                -(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma_b ** 2))

        images.append(DotAnnotatedImage(
            image=np.clip(canvas, 0.0, 1.0).astype(np.float32),
            heads=np.array(centers, dtype=np.float64).reshape(-1, 2),
            id=f"synth_{n:04d}",
        ))
    return images
