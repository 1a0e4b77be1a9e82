"""Synthetic landmark dataset generation and ground-truth directory parsing.

The ground-truth layout follows the Oxford buildings convention: per query a
`<name>_query.txt` line ("<prefix>_<stem> x1 y1 x2 y2") plus `_good.txt`,
`_ok.txt` and `_junk.txt` id lists. The synthetic generator renders seeded
"landmark" compositions (textured buildings over a sky gradient) with
per-view jitter, writes the same layout, and verifies that neural features
separate the classes before accepting a seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import neuralnet
from ..errors import ConfigError, DataError
from ..evalmetrics import RelevanceJudgments
from ..imagecore import load_image, save_image
from ..util import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class Query:
    query_id: str
    image_id: str
    bbox: tuple | None  # (x1, y1, x2, y2) or None


@dataclass
class DatasetManifest:
    name: str
    collection_dir: Path
    queries: list
    judgments: dict  # query_id -> RelevanceJudgments
    image_size: int = 0

    def image_ids(self) -> list:
        return sorted(p.stem for p in Path(self.collection_dir).iterdir()
                      if p.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg"))

    def load(self, image_id: str) -> np.ndarray:
        path = Path(self.collection_dir) / f"{image_id}.png"
        if not path.exists():
            for ext in (".ppm", ".jpg", ".jpeg"):
                alt = path.with_suffix(ext)
                if alt.exists():
                    path = alt
                    break
        return load_image(path)


def load_oxford_groundtruth(gt_dir, collection_dir, name: str = "dataset") -> DatasetManifest:
    """Parse an Oxford-style ground truth directory against a collection.

    Query image stems may carry a collection prefix token before the first
    underscore (e.g. "oxc1_allsouls_000013"); the token is stripped when the
    remainder matches a collection image.
    """
    gt_dir, collection_dir = Path(gt_dir), Path(collection_dir)
    if not gt_dir.is_dir():
        raise DataError(f"ground truth directory not found: {gt_dir}")
    if not collection_dir.is_dir():
        raise DataError(f"collection directory not found: {collection_dir}")
    stems = {p.stem for p in collection_dir.iterdir()
             if p.suffix.lower() in (".png", ".ppm", ".jpg", ".jpeg")}
    if not stems:
        raise DataError(f"no images in collection: {collection_dir}")

    def resolve_stem(raw: str, where: str) -> str:
        if raw in stems:
            return raw
        if "_" in raw:
            stripped = raw.split("_", 1)[1]
            if stripped in stems:
                return stripped
        raise DataError(f"{where}: image {raw!r} not in the collection")

    def read_id_list(path: Path) -> set:
        if not path.exists():
            raise DataError(f"missing ground truth file: {path}")
        out = set()
        for ln, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if line:
                out.add(resolve_stem(line, f"{path.name}:{ln}"))
        return out

    queries, judgments = [], {}
    query_files = sorted(gt_dir.glob("*_query.txt"))
    if not query_files:
        raise DataError(f"no *_query.txt files in {gt_dir}")
    for qf in query_files:
        qid = qf.name[: -len("_query.txt")]
        line = qf.read_text().strip()
        parts = line.split()
        if len(parts) != 5:
            raise DataError(f"{qf.name}:1: expected 'stem x1 y1 x2 y2', got {line!r}")
        stem = resolve_stem(parts[0], f"{qf.name}:1")
        try:
            x1, y1, x2, y2 = (float(v) for v in parts[1:])
        except ValueError:
            raise DataError(f"{qf.name}:1: unparseable coordinates in {line!r}")
        img = load_image(collection_dir / f"{stem}.png") if (collection_dir / f"{stem}.png").exists() else None
        if img is not None:
            h, w = img.shape[:2]
            if not (0 <= x1 < x2 <= w and 0 <= y1 < y2 <= h):
                raise DataError(f"query {qid!r}: bbox ({x1},{y1},{x2},{y2}) outside {w}x{h} image")
        judgments[qid] = RelevanceJudgments(
            good=read_id_list(gt_dir / f"{qid}_good.txt"),
            ok=read_id_list(gt_dir / f"{qid}_ok.txt"),
            junk=read_id_list(gt_dir / f"{qid}_junk.txt"),
        )
        queries.append(Query(query_id=qid, image_id=stem, bbox=(x1, y1, x2, y2)))
    return DatasetManifest(name=name, collection_dir=collection_dir,
                           queries=queries, judgments=judgments)


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    views_per_class: int = 5
    distractors: int = 150
    image_size: int = 64
    jitter: float = 1.0          # scales all view-to-view variation
    junk_per_query: int = 2
    sky_spread: float = 0.09     # class palette variation around the shared family
    base_spread: float = 0.16

    def validate(self) -> None:
        if self.classes < 1 or self.views_per_class < 2:
            raise ConfigError("need at least 1 class and 2 views per class")
        if self.image_size < 48:
            raise ConfigError("image_size must be >= 48 (SIFT needs 32 plus margins)")
        if self.distractors < 0 or self.junk_per_query < 0:
            raise ConfigError("counts must be non-negative")


def _render_scene(size: int, scene_seed: int, jitter_seed, jitter: float,
                  sky_spread: float, base_spread: float) -> np.ndarray:
    """One landmark composition; jitter_seed None renders the canonical view."""
    rng = np.random.default_rng(scene_seed)
    jr = np.random.default_rng(jitter_seed) if jitter_seed is not None else None
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))

    sky = np.array([0.56, 0.63, 0.72]) + rng.uniform(-sky_spread, sky_spread, 3)
    img += np.clip(sky, 0.05, 0.95) * (1.0 - 0.25 * yy[..., None])
    ground = np.array([0.38, 0.36, 0.30]) + rng.uniform(-0.06, 0.06, 3)
    img[yy > 0.85] = ground

    # global viewpoint shift
    gdx = jr.normal(0, 0.012 * jitter) if jr is not None else 0.0
    gdy = jr.normal(0, 0.012 * jitter) if jr is not None else 0.0

    extents = []
    n_buildings = int(rng.integers(3, 5))
    for _ in range(n_buildings):
        cx, cy = rng.uniform(0.22, 0.78, 2)
        bw, bh = rng.uniform(0.16, 0.42, 2)
        base = np.array([0.55, 0.47, 0.38]) + rng.uniform(-base_spread, base_spread, 3)
        freq = rng.uniform(3.0, 12.0)
        ang = rng.uniform(0, np.pi)
        n_dots = int(rng.integers(18, 30))
        dots = rng.uniform(-0.5, 0.5, size=(n_dots, 2))        # in building units
        dot_amp = rng.uniform(0.26, 0.44, size=n_dots) * rng.choice([-1.0, 1.0], size=n_dots)
        dot_rad = rng.uniform(1.0, 2.0, size=n_dots)
        if jr is not None:
            cx += gdx + jr.normal(0, 0.006 * jitter)
            cy += gdy + jr.normal(0, 0.006 * jitter)
            bw *= jr.uniform(1 - 0.03 * jitter, 1 + 0.03 * jitter)

        mask = (np.abs(xx - cx) < bw / 2) & (np.abs(yy - cy) < bh / 2)
        tex = 0.62 + 0.22 * np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)))
        for ch in range(3):
            img[..., ch][mask] = np.clip(base[ch] * tex[mask], 0, 1)
        # speckle dots anchored to the building (stable local features across views)
        for (du, dv), amp, rad in zip(dots, dot_amp, dot_rad):
            px = (cx + du * bw * 0.8) * size
            py = (cy + dv * bh * 0.8) * size
            blob = amp * np.exp(-(((yy * size - py) ** 2) + ((xx * size - px) ** 2)) / (2 * rad ** 2))
            img += (blob * mask)[..., None]
        extents.append((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2))

    if jr is not None:
        img = img * jr.uniform(1 - 0.04 * jitter, 1 + 0.04 * jitter)
    x1 = max(min(e[0] for e in extents) - 0.03, 0.0) * size
    y1 = max(min(e[1] for e in extents) - 0.03, 0.0) * size
    x2 = min(max(e[2] for e in extents) + 0.03, 1.0) * size
    y2 = min(max(e[3] for e in extents) + 0.03, 1.0) * size
    return np.clip(img, 0.0, 1.0), (x1, y1, x2, y2)


def _generate_images(spec: SynthSpec, seed: int):
    images, bboxes = {}, {}
    for cls in range(spec.classes):
        scene_seed = derive_seed(seed, "class", cls)
        for view in range(spec.views_per_class):
            name = f"lm{cls:02d}_{view:02d}"
            if view == 0:
                jseed = None
            else:
                jseed = derive_seed(seed, "view", cls, view)
            # the last view is jittered harder and lands in the `ok` set
            jit = spec.jitter * (1.8 if view == spec.views_per_class - 1 else 1.0)
            img, bbox = _render_scene(spec.image_size, scene_seed, jseed, jit,
                                      spec.sky_spread, spec.base_spread)
            images[name] = img
            if view == 0:
                bboxes[f"lm{cls:02d}"] = bbox
    for d in range(spec.distractors):
        name = f"bg{d:03d}"
        img, _ = _render_scene(spec.image_size, derive_seed(seed, "distractor", d),
                               None, 0.0, spec.sky_spread, spec.base_spread)
        images[name] = img
    return images, bboxes


def _separation_ok(images: dict, spec: SynthSpec, seed: int) -> bool:
    """Mean inter-class neural feature distance must exceed mean intra-class."""
    weights = neuralnet.init_network(neuralnet.default_spec(), derive_seed(seed, "sepcheck"))
    ext = neuralnet.Extractor(weights, input_size=None)
    feats = {}
    for cls in range(spec.classes):
        for view in range(spec.views_per_class):
            name = f"lm{cls:02d}_{view:02d}"
            feats[name] = ext.features(images[name])
    intra, inter = [], []
    for cls in range(spec.classes):
        base = feats[f"lm{cls:02d}_00"]
        for view in range(1, spec.views_per_class):
            intra.append(neuralnet.feature_distance_sq(base, feats[f"lm{cls:02d}_{view:02d}"]))
        for other in range(cls + 1, spec.classes):
            inter.append(neuralnet.feature_distance_sq(base, feats[f"lm{other:02d}_00"]))
    if not inter:
        return True
    return float(np.mean(inter)) > float(np.mean(intra))


def build_synthetic_dataset(spec: SynthSpec, seed: int, out_dir) -> DatasetManifest:
    """Render the dataset to disk (collection/ + groundtruth/ + manifest.json).

    Deterministic: identical (spec, seed) produce byte-identical trees. Seeds
    whose class features fail the separation check are deterministically
    re-derived (up to 5 attempts).
    """
    spec.validate()
    out_dir = Path(out_dir)
    coll_dir = out_dir / "collection"
    gt_dir = out_dir / "groundtruth"
    coll_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)

    effective_seed = seed
    for attempt in range(5):
        images, bboxes = _generate_images(spec, effective_seed)
        if spec.classes < 2 or _separation_ok(images, spec, effective_seed):
            break
        logger.warning("seed %d failed class separation, re-deriving", effective_seed)
        effective_seed = derive_seed(seed, "retry", attempt)
    else:
        raise DataError("could not generate a class-separable dataset in 5 attempts")

    for name, img in images.items():
        save_image(img, coll_dir / f"{name}.png")

    rng = np.random.default_rng(derive_seed(effective_seed, "junk"))
    distractor_ids = sorted(n for n in images if n.startswith("bg"))
    for cls in range(spec.classes):
        qid = f"lm{cls:02d}"
        views = [f"lm{cls:02d}_{v:02d}" for v in range(spec.views_per_class)]
        x1, y1, x2, y2 = bboxes[qid]
        (gt_dir / f"{qid}_query.txt").write_text(
            f"synth0_{views[0]} {x1:.1f} {y1:.1f} {x2:.1f} {y2:.1f}\n")
        good = views[1:-1]
        ok = [views[-1]]
        junk = []
        if distractor_ids and spec.junk_per_query:
            picks = rng.choice(len(distractor_ids), size=min(spec.junk_per_query, len(distractor_ids)),
                               replace=False)
            junk = [distractor_ids[i] for i in sorted(picks)]
        (gt_dir / f"{qid}_good.txt").write_text("".join(f"{g}\n" for g in good))
        (gt_dir / f"{qid}_ok.txt").write_text("".join(f"{o}\n" for o in ok))
        (gt_dir / f"{qid}_junk.txt").write_text("".join(f"{j}\n" for j in junk))

    manifest_doc = {
        "name": f"synthetic-{spec.classes}x{spec.views_per_class}+{spec.distractors}",
        "seed": seed,
        "effective_seed": effective_seed,
        "image_size": spec.image_size,
        "collection": "collection",
        "groundtruth": "groundtruth",
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest_doc, indent=2) + "\n")
    manifest = load_oxford_groundtruth(gt_dir, coll_dir, name=manifest_doc["name"])
    manifest.image_size = spec.image_size
    return manifest


def load_dataset(root) -> DatasetManifest:
    """Load a dataset directory produced by build_synthetic_dataset (or matching it)."""
    root = Path(root)
    doc_path = root / "manifest.json"
    if doc_path.exists():
        doc = json.loads(doc_path.read_text())
        manifest = load_oxford_groundtruth(root / doc["groundtruth"], root / doc["collection"],
                                           name=doc.get("name", root.name))
        manifest.image_size = doc.get("image_size", 0)
        return manifest
    return load_oxford_groundtruth(root / "groundtruth", root / "collection", name=root.name)
