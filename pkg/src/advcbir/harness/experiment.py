"""Experiment orchestration: backends, attack application, and the pipelines.

One experiment = index the collection with a backend, modify the queries per
the configured attack, apply the optional geometric transform, push every
modified query through an 8-bit save/reload round trip, then rank and score.
Everything is a pure function of (config, dataset bytes, seeds).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .. import bovw, globalfeat, neuralnet, pire
from ..errors import ConfigError, DataError
from ..evalmetrics import average_precision, ssim
from ..imagecore import (
    add_gaussian_noise,
    calibrate_noise_to_ssim,
    crop,
    crop_box,
    dequantize,
    quantize,
    resize,
    to_grayscale,
)
from ..localfeat import SiftParams, detect_and_describe, detect_sift, inject_keypoints, \
    recover_color, remove_keypoints_smoothing
from ..util import derive_seed
from .dataset import DatasetManifest

BACKENDS = ("neural", "bovw", "cedd", "gist")
ATTACKS = ("none", "pire", "pire_refined", "ls", "inject", "ls_inject", "gaussian")
QUERY_MODES = ("BB", "WI")
TRANSFORMS = ("none", "resize", "crop")


@dataclass
class PireSettings:
    iterations: int = 500
    epsilon: float = 4.0 / 255.0
    learning_rate: float | None = None  # None -> epsilon / 300
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def resolved_lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else self.epsilon / 300.0


@dataclass
class LeakSettings:
    replacement_iterations: int = 200
    query_iterations: int = 200
    cross_query_iterations: int = 500


@dataclass
class ExperimentConfig:
    backend: str = "neural"
    query_mode: str = "WI"
    attack: str = "none"
    transform: str = "none"
    transform_amount: float = 100.0
    pire: PireSettings = field(default_factory=PireSettings)
    leak: LeakSettings = field(default_factory=LeakSettings)
    gaussian_sigma: float | None = None
    gaussian_target_ssim: float | None = None
    gaussian_tol: float = 0.02
    ls_sigma: float = 1.2
    inject_count: int = 12
    canonical_input: int = 128
    vocab_size: int = 256
    he_threshold: int = 24
    kmeans_iters: int = 50
    seeds: dict = field(default_factory=lambda: {
        "extractor": 7, "attack": 12345, "codebook": 11, "he": 13, "noise": 5,
    })

    def validate(self) -> None:
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"unknown query mode {self.query_mode!r}")
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {self.transform!r}")
        if self.transform != "none" and not (0 < self.transform_amount <= 400):
            raise ConfigError(f"bad transform amount {self.transform_amount}")
        if self.attack == "gaussian" and self.gaussian_sigma is None and self.gaussian_target_ssim is None:
            raise ConfigError("gaussian attack needs gaussian_sigma or gaussian_target_ssim")
        for key in ("extractor", "attack", "codebook", "he", "noise"):
            if key not in self.seeds:
                raise ConfigError(f"missing seed {key!r}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
        return ExperimentConfig.from_dict(doc)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        for key, value in doc.items():
            if key == "pire":
                cfg.pire = PireSettings(**value)
            elif key == "leak":
                cfg.leak = LeakSettings(**value)
            elif key == "seeds":
                cfg.seeds = dict(cfg.seeds, **value)
            elif hasattr(cfg, key):
                setattr(cfg, key, value)
            else:
                raise ConfigError(f"unknown config field {key!r}")
        cfg.validate()
        return cfg


class NeuralBackend:
    name = "neural"

    def __init__(self, config: ExperimentConfig):
        weights = neuralnet.init_network(neuralnet.default_spec(), config.seeds["extractor"])
        self.extractor = neuralnet.Extractor(weights, input_size=config.canonical_input)
        self.features = {}

    def index(self, images: dict) -> None:
        self.features = {name: self.extractor.features(img) for name, img in images.items()}

    def rank(self, query_img: np.ndarray, exclude: str | None = None):
        fq = self.extractor.features(query_img)
        rows = sorted(
            ((neuralnet.feature_distance_sq(fq, f), name) for name, f in self.features.items()
             if name != exclude),
            key=lambda t: (t[0], t[1]),
        )
        return [(name, -dist) for dist, name in rows]


class BovwBackend:
    name = "bovw"

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.params = SiftParams()
        self.index_ = None

    def index(self, images: dict) -> None:
        feats = {}
        for name, img in images.items():
            _, descs = detect_and_describe(to_grayscale(img), self.params)
            feats[name] = descs
        stacks = [d for d in feats.values() if len(d)]
        if not stacks:
            raise DataError("no SIFT descriptors anywhere in the collection")
        all_desc = np.vstack(stacks)
        k = min(self.config.vocab_size, len(all_desc))
        codebook = bovw.train_codebook(all_desc, k, self.config.seeds["codebook"],
                                       self.config.kmeans_iters)
        he = bovw.train_he(all_desc, codebook, self.config.seeds["he"])
        self.index_ = bovw.build_index(feats, codebook, he)

    def rank(self, query_img: np.ndarray, exclude: str | None = None):
        _, descs = detect_and_describe(to_grayscale(query_img), self.params)
        ranked = bovw.query_index(descs, self.index_, self.config.he_threshold)
        return [(n, s) for n, s in ranked if n != exclude]


class GlobalBackend:
    def __init__(self, kind: str):
        self.name = kind
        self.extract = globalfeat.cedd if kind == "cedd" else globalfeat.gist
        self.metric = "l1" if kind == "cedd" else "l2"
        self.vectors = {}

    def index(self, images: dict) -> None:
        self.vectors = {name: self.extract(img) for name, img in images.items()}

    def rank(self, query_img: np.ndarray, exclude: str | None = None):
        qv = self.extract(query_img)
        ranked = globalfeat.rank_by_global(qv, self.vectors, self.metric)
        return [(n, -d) for n, d in ranked if n != exclude]


def make_backend(config: ExperimentConfig):
    if config.backend == "neural":
        return NeuralBackend(config)
    if config.backend == "bovw":
        return BovwBackend(config)
    if config.backend in ("cedd", "gist"):
        return GlobalBackend(config.backend)
    raise ConfigError(f"unknown backend {config.backend!r}")


def make_attack_extractor(config: ExperimentConfig) -> neuralnet.Extractor:
    """Perturbation attacks always target the neural model, whatever the backend."""
    weights = neuralnet.init_network(neuralnet.default_spec(), config.seeds["extractor"])
    return neuralnet.Extractor(weights, input_size=config.canonical_input)


def roundtrip_8bit(img: np.ndarray) -> np.ndarray:
    """The mandatory save/reload step (bit-identical to a PNG round trip)."""
    return dequantize(quantize(img))


class AttackCache:
    """Memo for attacked query images, keyed by config-relevant parameters."""

    def __init__(self):
        self.store = {}

    def key(self, kind, image, extra):
        return (kind, extra, image.shape, hash(image.tobytes()))

    def get_or_compute(self, kind, image, extra, fn):
        k = self.key(kind, image, extra)
        if k not in self.store:
            self.store[k] = fn()
        return self.store[k]


def _pire_attack(img, config: ExperimentConfig, extractor, refined: bool,
                 iterations: int | None = None, seed: int | None = None):
    settings = config.pire
    cfg = pire.PireConfig(
        iterations=iterations if iterations is not None else settings.iterations,
        epsilon=settings.epsilon,
        learning_rate=settings.resolved_lr(),
        beta1=settings.beta1, beta2=settings.beta2, adam_eps=settings.adam_eps,
        seed=seed if seed is not None else config.seeds["attack"],
        finalize_mode="refined" if refined else "original_x10",
    )
    adversarial, _, trace = pire.pire(img, extractor, cfg)
    return adversarial, trace


def apply_attack(img: np.ndarray, config: ExperimentConfig, extractor,
                 cache: AttackCache | None = None,
                 pire_iterations: int | None = None,
                 pire_seed: int | None = None):
    """Modified query image for the configured attack (pre round-trip)."""
    kind = config.attack
    if kind == "none":
        return img

    if kind in ("pire", "pire_refined"):
        refined = kind == "pire_refined"
        iters = pire_iterations if pire_iterations is not None else config.pire.iterations
        seed = pire_seed if pire_seed is not None else config.seeds["attack"]
        extra = (refined, iters, seed, round(config.pire.epsilon, 9),
                 round(config.pire.resolved_lr(), 12), config.seeds["extractor"],
                 config.canonical_input)
        fn = lambda: _pire_attack(img, config, extractor, refined, iters, seed)[0]
        if cache is not None:
            return cache.get_or_compute("pire", img, extra, fn)
        return fn()

    if kind in ("ls", "inject", "ls_inject"):
        gray = to_grayscale(img)
        if kind in ("ls", "ls_inject"):
            kps = detect_sift(gray)
            gray = remove_keypoints_smoothing(gray, kps, config.ls_sigma)
        if kind in ("inject", "ls_inject"):
            gray = inject_keypoints(gray, config.inject_count, config.seeds["attack"])
        return recover_color(img, gray)

    if kind == "gaussian":
        sigma = config.gaussian_sigma
        if sigma is None:
            sigma = calibrate_noise_to_ssim(img, config.gaussian_target_ssim,
                                            config.gaussian_tol, config.seeds["noise"])
        return add_gaussian_noise(img, sigma, config.seeds["noise"])

    raise ConfigError(f"unknown attack {kind!r}")


def apply_transform(img: np.ndarray, config: ExperimentConfig) -> np.ndarray:
    if config.transform == "none":
        return img
    if config.transform == "resize":
        return resize(img, config.transform_amount)
    if config.transform == "crop":
        return crop(img, config.transform_amount)
    raise ConfigError(f"unknown transform {config.transform!r}")


@dataclass
class QueryResult:
    query_id: str
    ap: float
    ssim: float


@dataclass
class ExperimentReport:
    dataset: str
    config: dict
    results: list = field(default_factory=list)
    map_fraction: float = 0.0
    mean_ssim: float = 1.0
    runtime_s: float = 0.0
    skipped_queries: list = field(default_factory=list)

    @property
    def map_percent(self) -> float:
        return 100.0 * self.map_fraction


def _query_image(manifest: DatasetManifest, query, mode: str) -> np.ndarray:
    img = manifest.load(query.image_id)
    if mode == "BB" and query.bbox is not None:
        return crop_box(img, *query.bbox)
    return img


def run_experiment(config: ExperimentConfig, manifest: DatasetManifest,
                   cache: AttackCache | None = None,
                   backend=None) -> ExperimentReport:
    """Full pipeline over every query in the manifest.

    Per-query SSIM compares the original query against its attacked, 8-bit
    rounded version before any geometric transform (transforms change the
    image dimensions). A prebuilt `backend` for the same config may be passed
    to amortize indexing across experiments.
    """
    config.validate()
    t0 = time.time()
    images = {name: manifest.load(name) for name in manifest.image_ids()}
    if backend is None:
        backend = make_backend(config)
        backend.index(images)
    extractor = make_attack_extractor(config) if config.attack in ("pire", "pire_refined") else None

    results, skipped = [], []
    for query in manifest.queries:
        original = _query_image(manifest, query, config.query_mode)
        attacked = apply_attack(original, config, extractor, cache)
        attacked_rt = roundtrip_8bit(attacked)
        q_ssim = ssim(original, attacked_rt) if config.attack != "none" else 1.0
        final = roundtrip_8bit(apply_transform(attacked, config))
        ranked = backend.rank(final, exclude=query.image_id)
        try:
            ap = average_precision([n for n, _ in ranked], manifest.judgments[query.query_id])
        except DataError:
            skipped.append(query.query_id)
            continue
        results.append(QueryResult(query_id=query.query_id, ap=ap, ssim=q_ssim))

    if not results:
        raise DataError("no scorable queries in the dataset")
    report = ExperimentReport(
        dataset=manifest.name,
        config=json.loads(config.to_json()),
        results=results,
        map_fraction=float(np.mean([r.ap for r in results])),
        mean_ssim=float(np.mean([r.ssim for r in results])),
        runtime_s=time.time() - t0,
        skipped_queries=skipped,
    )
    return report


@dataclass
class LeakRow:
    background: str
    query: str
    ap: float


@dataclass
class LeakReport:
    dataset: str
    query_id: str
    config: dict
    rows: list = field(default_factory=list)
    runtime_s: float = 0.0


def run_leak_experiment(config: ExperimentConfig, manifest: DatasetManifest,
                        query_id: str, cache: AttackCache | None = None) -> LeakReport:
    """Replace a query's relevant images with attacked versions and re-evaluate.

    Four rows mirror the replacement protocol: original/original,
    original/attacked, replaced/attacked (same iteration count), and
    replaced/attacked-at-the-cross count. Attack seeds are derived per
    iteration count, so same-count rows share perturbation trajectories
    while the cross-count query is decorrelated.
    """
    config.validate()
    if config.attack not in ("pire", "pire_refined"):
        raise ConfigError("leak experiment requires a pire attack")
    t0 = time.time()
    query = next((q for q in manifest.queries if q.query_id == query_id), None)
    if query is None:
        raise DataError(f"unknown query id {query_id!r}")
    judg = manifest.judgments[query_id]
    if not judg.relevant:
        raise DataError(f"query {query_id!r} has no relevant images")

    images = {name: manifest.load(name) for name in manifest.image_ids()}
    extractor = make_attack_extractor(config)
    leak = config.leak
    seed_for = lambda t: derive_seed(config.seeds["attack"], "leak", t)

    def attack_at(img, iterations):
        out = apply_attack(img, config, extractor, cache,
                           pire_iterations=iterations, pire_seed=seed_for(iterations))
        return roundtrip_8bit(out)

    original_q = _query_image(manifest, query, config.query_mode)
    q_same = attack_at(original_q, leak.query_iterations)
    q_cross = attack_at(original_q, leak.cross_query_iterations)

    backend = make_backend(config)
    backend.index(images)

    replaced_images = dict(images)
    for name in sorted(judg.relevant):
        replaced_images[name] = attack_at(images[name], leak.replacement_iterations)
    backend_replaced = make_backend(config)
    backend_replaced.index(replaced_images)

    def ap_of(bk, qimg):
        ranked = bk.rank(roundtrip_8bit(qimg), exclude=query.image_id)
        return average_precision([n for n, _ in ranked], judg)

    rows = [
        LeakRow("original", "original", ap_of(backend, original_q)),
        LeakRow("original", f"attacked_t{leak.query_iterations}", ap_of(backend, q_same)),
        LeakRow(f"replaced_t{leak.replacement_iterations}",
                f"attacked_t{leak.query_iterations}", ap_of(backend_replaced, q_same)),
        LeakRow(f"replaced_t{leak.replacement_iterations}",
                f"attacked_t{leak.cross_query_iterations}", ap_of(backend_replaced, q_cross)),
    ]
    return LeakReport(dataset=manifest.name, query_id=query_id,
                      config=json.loads(config.to_json()), rows=rows,
                      runtime_s=time.time() - t0)
