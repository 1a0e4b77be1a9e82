import hashlib
from pathlib import Path

import numpy as np
import pytest

from advcbir.errors import ConfigError, DataError
from advcbir.harness.dataset import (
    SynthSpec,
    build_synthetic_dataset,
    load_dataset,
    load_oxford_groundtruth,
)
from advcbir.imagecore import save_image


def write_fake_dataset(root: Path, bbox="2.0 3.0 20.5 18.0"):
    coll = root / "collection"
    gt = root / "groundtruth"
    coll.mkdir(parents=True)
    gt.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for stem in ("tower_001", "tower_002", "tower_003", "bridge_001"):
        save_image(rng.uniform(0, 1, (24, 24, 3)), coll / f"{stem}.png")
    (gt / "tower_query.txt").write_text(f"oxc1_tower_001 {bbox}\n")
    (gt / "tower_good.txt").write_text("tower_002\n")
    (gt / "tower_ok.txt").write_text("tower_003\n")
    (gt / "tower_junk.txt").write_text("")
    return gt, coll


class TestOxfordParsing:
    def test_prefix_stripping(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path)
        manifest = load_oxford_groundtruth(gt, coll)
        q = manifest.queries[0]
        assert q.query_id == "tower"
        assert q.image_id == "tower_001"
        assert q.bbox == (2.0, 3.0, 20.5, 18.0)

    def test_empty_junk_file(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path)
        manifest = load_oxford_groundtruth(gt, coll)
        assert manifest.judgments["tower"].junk == set()
        assert manifest.judgments["tower"].good == {"tower_002"}
        assert manifest.judgments["tower"].ok == {"tower_003"}

    def test_bbox_outside_image_rejected(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path, bbox="2.0 3.0 500.0 18.0")
        with pytest.raises(DataError, match="tower"):
            load_oxford_groundtruth(gt, coll)

    def test_malformed_coordinates_name_the_line(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path)
        (gt / "tower_query.txt").write_text("oxc1_tower_001 2.0 3.0 xx 18.0\n")
        with pytest.raises(DataError, match="tower_query.txt:1"):
            load_oxford_groundtruth(gt, coll)

    def test_unknown_image_rejected(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path)
        (gt / "tower_good.txt").write_text("nonexistent_999\n")
        with pytest.raises(DataError, match="nonexistent"):
            load_oxford_groundtruth(gt, coll)

    def test_missing_files_rejected(self, tmp_path):
        gt, coll = write_fake_dataset(tmp_path)
        (gt / "tower_ok.txt").unlink()
        with pytest.raises(DataError):
            load_oxford_groundtruth(gt, coll)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_oxford_groundtruth(tmp_path / "nope", tmp_path)


class TestSyntheticDataset:
    def test_counts(self, tiny_dataset):
        # 3 classes x 3 views + 6 distractors
        assert len(tiny_dataset.image_ids()) == 3 * 3 + 6
        assert len(tiny_dataset.queries) == 3

    def test_judgment_structure(self, tiny_dataset):
        judg = tiny_dataset.judgments["lm00"]
        assert judg.good == {"lm00_01"}
        assert judg.ok == {"lm00_02"}
        assert len(judg.junk) == 1

    def test_same_seed_byte_identical(self, tmp_path):
        spec = SynthSpec(classes=2, views_per_class=2, distractors=2, image_size=64,
                         junk_per_query=0)
        build_synthetic_dataset(spec, seed=9, out_dir=tmp_path / "a")
        build_synthetic_dataset(spec, seed=9, out_dir=tmp_path / "b")

        def tree_hash(root):
            h = hashlib.sha256()
            for p in sorted(Path(root).rglob("*")):
                if p.is_file():
                    h.update(p.name.encode())
                    h.update(p.read_bytes())
            return h.hexdigest()

        assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")

    def test_images_in_range(self, tiny_dataset):
        img = tiny_dataset.load("lm00_00")
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert img.shape == (64, 64, 3)

    def test_bbox_inside_image(self, tiny_dataset):
        for q in tiny_dataset.queries:
            x1, y1, x2, y2 = q.bbox
            assert 0 <= x1 < x2 <= 64
            assert 0 <= y1 < y2 <= 64

    def test_load_dataset_round_trip(self, tiny_dataset, tmp_path):
        spec = SynthSpec(classes=2, views_per_class=2, distractors=0, image_size=64,
                         junk_per_query=0)
        build_synthetic_dataset(spec, seed=3, out_dir=tmp_path)
        m = load_dataset(tmp_path)
        assert len(m.queries) == 2
        assert m.image_size == 64

    def test_invalid_spec(self):
        with pytest.raises(ConfigError):
            SynthSpec(classes=0).validate()
        with pytest.raises(ConfigError):
            SynthSpec(image_size=16).validate()

    def test_class_separation(self, tiny_dataset):
        # re-measure what the generator verified: inter-class feature distance
        # above intra-class, with the generation-time extractor
        from advcbir import neuralnet
        from advcbir.util import derive_seed
        import json
        doc = json.loads((Path(tiny_dataset.collection_dir).parent / "manifest.json").read_text())
        w = neuralnet.init_network(neuralnet.default_spec(),
                                   derive_seed(doc["effective_seed"], "sepcheck"))
        ext = neuralnet.Extractor(w)
        feats = {n: ext.features(tiny_dataset.load(n))
                 for n in tiny_dataset.image_ids() if n.startswith("lm")}
        intra, inter = [], []
        for cls in range(3):
            base = feats[f"lm{cls:02d}_00"]
            for v in (1, 2):
                intra.append(np.sum((base - feats[f"lm{cls:02d}_{v:02d}"]) ** 2))
            for other in range(cls + 1, 3):
                inter.append(np.sum((base - feats[f"lm{other:02d}_00"]) ** 2))
        assert np.mean(inter) > np.mean(intra)
