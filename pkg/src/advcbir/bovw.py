"""Bag-of-visual-words retrieval with Hamming-Embedding signature filtering.

A seeded k-means codebook quantizes SIFT descriptors to visual words; a
64-row orthonormal projection plus per-word median thresholds turns each
descriptor into a 64-bit signature. Query descriptors vote idf^2 for every
posting in their word whose signature is within the Hamming threshold, and
votes are normalized by image descriptor counts.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .localfeat import SiftParams, detect_and_describe

HE_BITS = 64
DEFAULT_HE_THRESHOLD = 24


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, 128)
    seed: int

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


@dataclass
class HEParams:
    projection: np.ndarray  # (64, 128), orthonormal rows
    thresholds: np.ndarray  # (k, 64) per-word medians
    seed: int
    defaulted_words: list = field(default_factory=list)  # words with no training data


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    p2 = np.sum(points * points, axis=1)[:, None]
    c2 = np.sum(centers * centers, axis=1)[None, :]
    return np.maximum(p2 + c2 - 2.0 * points @ centers.T, 0.0)


def assign_words(descriptors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid (L2) visual word for each descriptor row."""
    if len(descriptors) == 0:
        return np.zeros(0, dtype=np.intp)
    return np.argmin(_pairwise_sq_dists(np.asarray(descriptors), codebook.centroids), axis=1)


def _kmeans_pp_init(descriptors, k, rng):
    n = len(descriptors)
    centers = np.empty((k, descriptors.shape[1]))
    first = rng.integers(n)
    centers[0] = descriptors[first]
    d2 = np.sum((descriptors - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = descriptors[rng.integers(n)]
            continue
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centers[c] = descriptors[idx]
        d2 = np.minimum(d2, np.sum((descriptors - centers[c]) ** 2, axis=1))
    return centers


def train_codebook(descriptors: np.ndarray, k: int, seed: int, max_iters: int = 50) -> Codebook:
    """Seeded k-means++ followed by Lloyd iterations to an assignment fixpoint.

    Empty clusters are re-seeded from the points farthest from their centers.
    """
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if k < 2:
        raise ValueError("codebook size k must be >= 2")
    if len(descriptors) < k:
        raise DataError(f"need at least k={k} descriptors, got {len(descriptors)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(descriptors, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = _pairwise_sq_dists(descriptors, centers)
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        point_d2 = d2[np.arange(len(descriptors)), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = descriptors[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                centers[c] = descriptors[far]
                point_d2[far] = 0.0
    return Codebook(centroids=centers, seed=seed)


def kmeans_objective(descriptors: np.ndarray, codebook: Codebook) -> float:
    d2 = _pairwise_sq_dists(np.asarray(descriptors), codebook.centroids)
    return float(d2.min(axis=1).sum())


def train_he(descriptors: np.ndarray, codebook: Codebook, seed: int) -> HEParams:
    """Seeded Gaussian projection (Gram-Schmidt orthonormalized) and per-word medians."""
    descriptors = np.asarray(descriptors, dtype=np.float64)
    if len(descriptors) == 0:
        raise DataError("cannot train Hamming embedding on an empty descriptor set")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((HE_BITS, descriptors.shape[1]))
    # Gram-Schmidt on the rows
    proj = np.empty_like(raw)
    for i in range(HE_BITS):
        v = raw[i].copy()
        for j in range(i):
            v -= np.dot(v, proj[j]) * proj[j]
        proj[i] = v / np.linalg.norm(v)

    words = assign_words(descriptors, codebook)
    projected = descriptors @ proj.T  # (n, 64)
    thresholds = np.zeros((codebook.k, HE_BITS))
    defaulted = []
    for w in range(codebook.k):
        members = words == w
        if members.any():
            thresholds[w] = np.median(projected[members], axis=0)
        else:
            defaulted.append(w)
    return HEParams(projection=proj, thresholds=thresholds, seed=seed, defaulted_words=defaulted)


def he_signature(descriptor: np.ndarray, word_id: int, he: HEParams) -> int:
    """64-bit signature: bit d set iff the projected value strictly exceeds the threshold."""
    if not (0 <= word_id < he.thresholds.shape[0]):
        raise ValueError(f"word_id {word_id} out of range")
    bits = (he.projection @ np.asarray(descriptor)) > he.thresholds[word_id]
    sig = 0
    for d in np.nonzero(bits)[0]:
        sig |= 1 << int(d)
    return sig


def _signatures_for(descriptors: np.ndarray, words: np.ndarray, he: HEParams) -> np.ndarray:
    projected = np.asarray(descriptors) @ he.projection.T
    bits = projected > he.thresholds[words]
    weights = (1 << np.arange(HE_BITS, dtype=np.uint64))
    return (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64)


@dataclass
class InvertedIndex:
    codebook: Codebook
    he: HEParams
    image_names: list
    descriptor_counts: np.ndarray             # per image
    postings: dict                            # word -> (image_idx array, signature array)
    idf: np.ndarray                           # per word, ln(N / max(n_w, 1))

    @property
    def size(self) -> int:
        return len(self.image_names)


def build_index(image_features: dict, codebook: Codebook, he: HEParams) -> InvertedIndex:
    """Index precomputed descriptors: {image_name: (N_i, 128) array}."""
    if not image_features:
        raise DataError("cannot index an empty collection")
    names = list(image_features.keys())
    counts = np.zeros(len(names), dtype=np.int64)
    per_word: dict = {}
    df = np.zeros(codebook.k, dtype=np.int64)
    for idx, name in enumerate(names):
        descs = np.asarray(image_features[name])
        counts[idx] = len(descs)
        if len(descs) == 0:
            continue
        words = assign_words(descs, codebook)
        sigs = _signatures_for(descs, words, he)
        for w in np.unique(words):
            df[w] += 1
        for w, s in zip(words, sigs):
            per_word.setdefault(int(w), []).append((idx, s))
    postings = {
        w: (np.array([e[0] for e in entries], dtype=np.int64),
            np.array([e[1] for e in entries], dtype=np.uint64))
        for w, entries in per_word.items()
    }
    idf = np.log(len(names) / np.maximum(df, 1))
    return InvertedIndex(codebook=codebook, he=he, image_names=names,
                         descriptor_counts=counts, postings=postings, idf=idf)


def index_images(images: dict, codebook: Codebook, he: HEParams,
                 params: SiftParams = SiftParams()) -> InvertedIndex:
    """Detect + describe SIFT for each grayscale image, then build the index."""
    feats = {}
    for name, gray in images.items():
        _, descs = detect_and_describe(gray, params)
        feats[name] = descs
    return build_index(feats, codebook, he)


_POPCOUNT_TABLE = np.array([bin(i).count("1") for i in range(65536)], dtype=np.uint8)


def _hamming(a: np.ndarray, b: np.uint64) -> np.ndarray:
    x = a ^ b
    out = np.zeros(len(x), dtype=np.int64)
    for shift in (0, 16, 32, 48):
        out += _POPCOUNT_TABLE[((x >> np.uint64(shift)) & np.uint64(0xFFFF)).astype(np.int64)]
    return out


def query_index(query_descriptors: np.ndarray, index: InvertedIndex,
                he_threshold: int = DEFAULT_HE_THRESHOLD):
    """Rank indexed images for the query's descriptors.

    Each query descriptor votes idf(word)^2 for postings within the Hamming
    threshold; votes are divided by sqrt(descriptor count) of both sides.
    Returns a list of (image_name, score) sorted by descending score, ties
    broken by index order.
    """
    if not (0 <= he_threshold <= HE_BITS):
        raise ValueError(f"he_threshold must be in [0, {HE_BITS}]")
    query_descriptors = np.asarray(query_descriptors)
    scores = np.zeros(index.size)
    if len(query_descriptors):
        words = assign_words(query_descriptors, index.codebook)
        sigs = _signatures_for(query_descriptors, words, index.he)
        for w, sig in zip(words, sigs):
            entry = index.postings.get(int(w))
            if entry is None:
                continue
            img_idx, post_sigs = entry
            close = _hamming(post_sigs, sig) <= he_threshold
            if close.any():
                np.add.at(scores, img_idx[close], index.idf[w] ** 2)
        norm = np.sqrt(np.maximum(index.descriptor_counts, 1))
        scores = scores / norm / np.sqrt(max(len(query_descriptors), 1))
    order = sorted(range(index.size), key=lambda i: (-scores[i], index.image_names[i]))
    return [(index.image_names[i], float(scores[i])) for i in order]


def save_index(index: InvertedIndex, header_path, postings_path) -> None:
    """JSON header (k, seeds, idf, names, HE parameters) + binary posting file.

    Postings are word-sorted records of little-endian u32 image id and u64
    signature.
    """
    header = {
        "k": index.codebook.k,
        "codebook_seed": index.codebook.seed,
        "he_seed": index.he.seed,
        "idf": index.idf.tolist(),
        "image_names": index.image_names,
        "descriptor_counts": index.descriptor_counts.tolist(),
        "centroids": index.codebook.centroids.tolist(),
        "projection": index.he.projection.tolist(),
        "thresholds": index.he.thresholds.tolist(),
        "defaulted_words": index.he.defaulted_words,
        "posting_words": {str(w): len(index.postings[w][0]) for w in sorted(index.postings)},
    }
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh)
    with open(postings_path, "wb") as fh:
        for w in sorted(index.postings):
            img_idx, sigs = index.postings[w]
            for i, s in zip(img_idx, sigs):
                fh.write(struct.pack("<IQ", int(i), int(s)))


def load_index(header_path, postings_path) -> InvertedIndex:
    with open(header_path, encoding="utf-8") as fh:
        header = json.load(fh)
    codebook = Codebook(centroids=np.array(header["centroids"]), seed=header["codebook_seed"])
    he = HEParams(projection=np.array(header["projection"]),
                  thresholds=np.array(header["thresholds"]),
                  seed=header["he_seed"], defaulted_words=header["defaulted_words"])
    postings = {}
    with open(postings_path, "rb") as fh:
        blob = fh.read()
    offset = 0
    for w_str, count in header["posting_words"].items():
        w = int(w_str)
        img_idx = np.empty(count, dtype=np.int64)
        sigs = np.empty(count, dtype=np.uint64)
        for i in range(count):
            a, b = struct.unpack_from("<IQ", blob, offset)
            offset += 12
            img_idx[i], sigs[i] = a, b
        postings[w] = (img_idx, sigs)
    return InvertedIndex(codebook=codebook, he=he,
                         image_names=header["image_names"],
                         descriptor_counts=np.array(header["descriptor_counts"], dtype=np.int64),
                         postings=postings,
                         idf=np.array(header["idf"]))
