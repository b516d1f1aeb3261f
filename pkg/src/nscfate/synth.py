"""Procedural renderer for phase-contrast-like cell images.

Four archetypes with class-conditional geometry:

  nsc_like             bare soma, no processes, no filopodia
  neuron_like          several long outgrowths with low length variance
  astrocyte_like       outgrowths with high length variance plus dense
                       short filopodia spikes around the soma
  oligodendrocyte_like large round soma with at most one short process

Every image is drawn from its own RNG stream derived as
hash(dataset_seed, image_id), so generation is order-independent and each
sample can be re-rendered in isolation (used to recover ground-truth
foreground masks).
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, ImageSample, LabelTaxonomy
from .errors import ArchetypeError, GeometryError, IoError
from .seeding import LABEL_GENERATION, hash64

ARCHETYPES = ("nsc_like", "neuron_like", "astrocyte_like", "oligodendrocyte_like")

# Default archetype order for a 4-class taxonomy; cycled for other sizes.
DEFAULT_ARCHETYPE_CYCLE = ("nsc_like", "neuron_like", "astrocyte_like", "oligodendrocyte_like")


@dataclass(frozen=True)
class MorphologyParams:
    class_label: int
    archetype: str
    soma_radius: float
    process_count: int
    process_length_mean: float
    process_length_std: float
    process_width: float
    branching_prob: float
    filopodia_density: float
    texture_noise_sigma: float
    background_level: float = 0.2
    soma_intensity: float = 0.8
    process_intensity: float = 0.35


@dataclass(frozen=True)
class SyntheticSpec:
    taxonomy: LabelTaxonomy
    per_class_count: int
    image_size: int = 64
    seed: int = 0
    difficulty: str = "easy"  # or "hard"
    archetypes: tuple = ()  # one per class; defaults to the standard cycle

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.difficulty not in ("easy", "hard"):
            raise ValueError(f"difficulty must be easy or hard, got {self.difficulty!r}")
        arche = tuple(self.archetypes) or tuple(
            DEFAULT_ARCHETYPE_CYCLE[i % len(DEFAULT_ARCHETYPE_CYCLE)]
            for i in range(self.taxonomy.class_count)
        )
        if len(arche) != self.taxonomy.class_count:
            raise ValueError("archetypes must list one archetype per class")
        for a in arche:
            if a not in ARCHETYPES:
                raise ArchetypeError(a)
        object.__setattr__(self, "archetypes", arche)


def sample_morphology(
    class_label: int, archetype: str, difficulty: str, rng: np.random.Generator
) -> MorphologyParams:
    """Draw class-conditional geometry parameters for one cell."""
    if archetype not in ARCHETYPES:
        raise ArchetypeError(archetype)
    hard = difficulty == "hard"
    noise = 0.07 if hard else 0.04

    if archetype == "nsc_like":
        # Degenerate archetype: soma only, at any difficulty.
        return MorphologyParams(
            class_label=class_label,
            archetype=archetype,
            soma_radius=rng.uniform(4.2, 6.0) if hard else rng.uniform(4.0, 4.8),
            process_count=0,
            process_length_mean=0.0,
            process_length_std=0.0,
            process_width=0.0,
            branching_prob=0.0,
            filopodia_density=0.0,
            texture_noise_sigma=noise,
        )
    if archetype == "neuron_like":
        # Long, thin, straight outgrowths with low length variance.
        return MorphologyParams(
            class_label=class_label,
            archetype=archetype,
            soma_radius=rng.uniform(5.2, 6.8) if hard else rng.uniform(5.8, 6.6),
            process_count=int(rng.integers(3, 6)) if hard else int(rng.integers(4, 8)),
            process_length_mean=rng.uniform(20.0, 30.0) if hard else rng.uniform(26.0, 32.0),
            process_length_std=2.0,
            process_width=1.5 if hard else 1.4,
            branching_prob=0.1,
            filopodia_density=rng.uniform(0.0, 0.15) if hard else rng.uniform(0.0, 0.05),
            texture_noise_sigma=noise,
            process_intensity=0.5 if hard else 0.35,
        )
    if archetype == "astrocyte_like":
        # Thick, shorter, irregular outgrowths plus a dense filopodia halo.
        return MorphologyParams(
            class_label=class_label,
            archetype=archetype,
            soma_radius=rng.uniform(6.2, 8.0) if hard else rng.uniform(7.3, 8.1),
            process_count=int(rng.integers(3, 7)) if hard else int(rng.integers(4, 8)),
            process_length_mean=rng.uniform(10.0, 16.0) if hard else rng.uniform(10.0, 16.0),
            process_length_std=6.0,
            process_width=2.5 if hard else 2.6,
            branching_prob=0.35,
            filopodia_density=rng.uniform(0.45, 0.8) if hard else rng.uniform(0.6, 0.95),
            texture_noise_sigma=noise,
            process_intensity=0.5 if hard else 0.35,
        )
    # oligodendrocyte_like: large round body, at most one short process.
    return MorphologyParams(
        class_label=class_label,
        archetype=archetype,
        soma_radius=rng.uniform(7.5, 9.5) if hard else rng.uniform(9.0, 10.5),
        process_count=int(rng.integers(0, 2)),
        process_length_mean=rng.uniform(5.0, 9.0),
        process_length_std=1.5,
        process_width=1.4,
        branching_prob=0.0,
        filopodia_density=rng.uniform(0.0, 0.15) if hard else rng.uniform(0.0, 0.05),
        texture_noise_sigma=noise,
        process_intensity=0.5 if hard else 0.35,
    )


def _draw_segment(coverage, p0, p1, width):
    """Accumulate anti-aliased coverage for one line segment."""
    size = coverage.shape[0]
    x0, y0 = p0
    x1, y1 = p1
    pad = width / 2 + 1.5
    r0 = max(int(min(y0, y1) - pad), 0)
    r1 = min(int(max(y0, y1) + pad) + 1, size)
    c0 = max(int(min(x0, x1) - pad), 0)
    c1 = min(int(max(x0, x1) + pad) + 1, size)
    if r0 >= r1 or c0 >= c1:
        return
    ys, xs = np.mgrid[r0:r1, c0:c1]
    dx, dy = x1 - x0, y1 - y0
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0:
        dist = np.hypot(xs - x0, ys - y0)
    else:
        t = np.clip(((xs - x0) * dx + (ys - y0) * dy) / seg_len2, 0.0, 1.0)
        dist = np.hypot(xs - (x0 + t * dx), ys - (y0 + t * dy))
    local = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    region = coverage[r0:r1, c0:c1]
    np.maximum(region, local, out=region)


def _draw_process(coverage, rng, origin, angle, length, width, branching_prob, depth=0):
    """Wiggly polyline outward from the soma; may branch once per level."""
    n_seg = 4
    seg_len = length / n_seg
    x, y = origin
    theta = angle
    for i in range(n_seg):
        theta += rng.normal(0.0, 0.25)
        nx = x + seg_len * np.cos(theta)
        ny = y + seg_len * np.sin(theta)
        _draw_segment(coverage, (x, y), (nx, ny), width)
        if depth < 1 and i == n_seg // 2 and rng.random() < branching_prob:
            branch_angle = theta + rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.0)
            _draw_process(coverage, rng, (nx, ny), branch_angle, length / 2, width, 0.0, depth + 1)
        x, y = nx, ny


def _render(params: MorphologyParams, image_size: int, rng: np.random.Generator):
    """Render one cell; returns (image in [0,1], boolean foreground mask)."""
    if params.soma_radius >= image_size / 2:
        raise GeometryError(
            f"soma_radius {params.soma_radius} does not fit image of size {image_size}"
        )
    cx = image_size / 2 + rng.uniform(-1.0, 1.0)
    cy = image_size / 2 + rng.uniform(-1.0, 1.0)

    coverage = np.zeros((image_size, image_size), dtype=np.float64)
    ys, xs = np.mgrid[0:image_size, 0:image_size]
    soma = np.hypot(xs - cx, ys - cy) <= params.soma_radius
    coverage[soma] = 1.0

    for _ in range(params.process_count):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = max(3.0, rng.normal(params.process_length_mean, params.process_length_std))
        origin = (cx + params.soma_radius * np.cos(angle), cy + params.soma_radius * np.sin(angle))
        _draw_process(coverage, rng, origin, angle, length, params.process_width, params.branching_prob)

    n_filopodia = int(round(params.filopodia_density * np.pi * params.soma_radius))
    for _ in range(n_filopodia):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        length = rng.uniform(2.0, 5.0)
        x0 = cx + params.soma_radius * np.cos(angle)
        y0 = cy + params.soma_radius * np.sin(angle)
        x1 = x0 + length * np.cos(angle)
        y1 = y0 + length * np.sin(angle)
        _draw_segment(coverage, (x0, y0), (x1, y1), 1.0)

    image = params.background_level + coverage * (params.process_intensity - params.background_level)
    image[soma] = params.soma_intensity
    if params.texture_noise_sigma > 0:
        image = image + rng.normal(0.0, params.texture_noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), coverage > 0.5


def render_cell(params: MorphologyParams, image_size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one cell image in [0,1]; deterministic given (params, size, rng state)."""
    image, _ = _render(params, image_size, rng)
    return image


def sample_stream_seed(dataset_seed: int, sample_id: str) -> int:
    return hash64(dataset_seed, LABEL_GENERATION, sample_id)


def regenerate_sample(spec: SyntheticSpec, class_index: int, sample_id: str):
    """Re-render one dataset image from its id; returns (image, mask, params).

    Bit-identical to the originally emitted image (pre-quantization), which
    makes the foreground mask usable as ground truth for downstream checks.
    """
    rng = np.random.default_rng(sample_stream_seed(spec.seed, sample_id))
    params = sample_morphology(class_index, spec.archetypes[class_index], spec.difficulty, rng)
    image, mask = _render(params, spec.image_size, rng)
    return image, mask, params


def quantize(image: np.ndarray) -> np.ndarray:
    """[0,1] float image to 8-bit; round-trips within 1/255."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def generate_dataset(spec: SyntheticSpec, output_directory, workers: int = 1) -> DatasetManifest:
    """Write per_class_count PNGs per class plus a generation log CSV.

    Layout matches load_manifest's expectations: <out>/<class_name>/<file>.png.
    The log records (id, class, per-image seed, key parameters) for every
    emitted image, ordered by id.
    """
    out = Path(output_directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc

    jobs = []
    for class_index, class_name in enumerate(spec.taxonomy.class_names):
        (out / class_name).mkdir(exist_ok=True)
        for i in range(spec.per_class_count):
            sample_id = f"{class_name}/{class_name}_{i:04d}.png"
            jobs.append((class_index, class_name, sample_id))

    def emit(job):
        class_index, class_name, sample_id = job
        image, _, params = regenerate_sample(spec, class_index, sample_id)
        path = out / sample_id
        try:
            Image.fromarray(quantize(image), mode="L").save(path, format="PNG")
        except OSError as exc:
            raise IoError(f"failed writing {path}: {exc}") from exc
        return ImageSample(id=sample_id, source_path=str(path), label_index=class_index), {
            "id": sample_id,
            "class": class_name,
            "seed": sample_stream_seed(spec.seed, sample_id),
            "soma_radius": f"{params.soma_radius:.6f}",
            "process_count": params.process_count,
            "process_length_mean": f"{params.process_length_mean:.6f}",
            "filopodia_density": f"{params.filopodia_density:.6f}",
        }

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(emit, jobs))
    else:
        results = [emit(job) for job in jobs]

    results.sort(key=lambda r: (r[0].label_index, r[0].id))
    samples = [r[0] for r in results]
    log_rows = [r[1] for r in results]

    log_path = out / "generation_log.csv"
    with log_path.open("w", encoding="utf-8", newline="\n") as fh:
        writer = csv.DictWriter(
            fh,
            fieldnames=[
                "id",
                "class",
                "seed",
                "soma_radius",
                "process_count",
                "process_length_mean",
                "filopodia_density",
            ],
            lineterminator="\n",
        )
        writer.writeheader()
        writer.writerows(log_rows)

    return DatasetManifest(taxonomy=spec.taxonomy, samples=samples, seed=spec.seed)
