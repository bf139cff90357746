import hashlib
import logging

import numpy as np
import pytest
from PIL import Image

from defectgen.conditioning import GOOD
from defectgen.data import (DEFECTS, PRODUCTS, CorpusSpec, apply_defect, build_corpus, draw_defect_mask,
                            generate_background, generate_samples, load_dataset, make_sample, product_template,
                            read_manifest, sample_rng)


def corr(img, product):
    lum = img.mean(axis=0).ravel()
    return float(np.corrcoef(lum, product_template(product, img.shape[-1]).ravel())[0, 1])


def test_background_deterministic():
    a = generate_background("disc", np.random.default_rng(5))
    b = generate_background("disc", np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert a.shape == (3, 32, 32) and a.dtype == np.float32
    assert 0 <= a.min() and a.max() <= 1


@pytest.mark.parametrize("product", PRODUCTS)
def test_background_matches_own_template(product):
    for seed in range(20):
        a = generate_background(product, np.random.default_rng(seed))
        b = generate_background(product, np.random.default_rng(seed + 100))
        assert not np.array_equal(a, b)
        assert corr(a, product) > 0.5
        for other in PRODUCTS:
            if other != product:
                assert abs(corr(a, other)) < 0.3


def test_unknown_labels():
    with pytest.raises(KeyError):
        generate_background("bottle", np.random.default_rng(0))
    with pytest.raises(KeyError):
        apply_defect(np.zeros((3, 32, 32), np.float32), "hole", np.random.default_rng(0))
    with pytest.raises(ValueError):
        apply_defect(np.zeros((3, 32, 32), np.float32), GOOD, np.random.default_rng(0))


@pytest.mark.parametrize("defect", DEFECTS)
def test_mask_fraction_range(defect):
    rng = np.random.default_rng(0)
    fracs = np.array([draw_defect_mask(defect, rng).mean() for _ in range(1000)])
    assert fracs.min() > 0.001 and fracs.max() < 0.2


def test_defect_changes_exactly_mask_support():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        bg = generate_background(PRODUCTS[seed % 3], rng)
        out, mask = apply_defect(bg, DEFECTS[seed % 3], rng)
        changed = np.any(out != bg, axis=0)
        assert np.array_equal(changed, mask.astype(bool))


def test_mask_area_consistent_across_products():
    for d in DEFECTS:
        areas = [np.mean([make_sample(p, d, sample_rng(1, p, d, i)).mask.mean() for i in range(200)])
                 for p in PRODUCTS]
        assert max(areas) / min(areas) < 2.0


def test_sample_invariants():
    for s in generate_samples(CorpusSpec(per_defect=3, per_good=3)):
        if s.defect == GOOD:
            assert not s.mask.any()
        else:
            assert 0 < s.mask.mean() < 0.5


def test_spec_validation():
    with pytest.raises(ValueError):
        CorpusSpec(products=["disc"]).validate()
    with pytest.raises(ValueError):
        CorpusSpec(per_defect=0, per_good=0).validate()
    with pytest.raises(ValueError):
        CorpusSpec(defects=["scratch", "hole"]).validate()


def digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_counts_and_rebuild(tmp_path):
    manifest = build_corpus(CorpusSpec(), tmp_path / "a")
    assert len(list((tmp_path / "a").rglob("img_*.png"))) == 120
    assert len(list((tmp_path / "a").rglob("mask_*.png"))) == 120
    assert len(manifest) == 120
    assert read_manifest(tmp_path / "a" / "manifest.tsv") == manifest
    build_corpus(CorpusSpec(), tmp_path / "b")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    mask = np.asarray(Image.open(tmp_path / "a" / "disc" / "spot" / "mask_0000.png"))
    assert set(np.unique(mask)) == {0, 255}


def test_exclusion(tmp_path):
    build_corpus(CorpusSpec(per_defect=2, per_good=2, exclude=[("disc", "crack")]), tmp_path)
    assert not (tmp_path / "disc" / "crack").exists()
    assert (tmp_path / "disc" / GOOD).exists() and (tmp_path / "striped" / "crack").exists()


def test_round_trip(tmp_path):
    spec = CorpusSpec(per_defect=2, per_good=2)
    build_corpus(spec, tmp_path)
    loaded = load_dataset(tmp_path)
    made = generate_samples(spec)
    assert sorted((s.path, s.product, s.defect) for s in loaded) == sorted((s.path, s.product, s.defect) for s in made)
    by_path = {s.path: s for s in made}
    for s in loaded:
        ref = by_path[s.path]
        assert np.array_equal(s.mask, ref.mask)
        assert np.abs(s.image - ref.image).max() <= 0.5 / 255 + 1e-6


def test_gray_mask_binarized_with_warning(tmp_path, caplog):
    build_corpus(CorpusSpec(products=["disc", "striped"], defects=["spot", "crack"], per_defect=1, per_good=1), tmp_path)
    p = tmp_path / "disc" / "spot" / "mask_0000.png"
    arr = np.asarray(Image.open(p)).copy()
    arr[arr == 255] = 200
    arr[0, 0] = 100
    Image.fromarray(arr).save(p)
    with caplog.at_level(logging.WARNING):
        loaded = {s.path: s for s in load_dataset(tmp_path)}
    assert "gray values" in caplog.text
    m = loaded["disc/spot/img_0000.png"].mask
    assert m[0, 0] == 0 and m.sum() == (arr >= 128).sum()


def test_missing_mask_and_missing_good(tmp_path, caplog):
    build_corpus(CorpusSpec(products=["disc", "striped"], defects=["spot", "crack"], per_defect=1, per_good=1), tmp_path)
    for f in (tmp_path / "disc" / GOOD).iterdir():
        f.unlink()
    (tmp_path / "disc" / GOOD).rmdir()
    with caplog.at_level(logging.WARNING):
        samples = load_dataset(tmp_path)
    assert len(samples) == 5
    assert "no 'good' samples for product disc" in caplog.text
    (tmp_path / "disc" / "spot" / "mask_0000.png").unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_invariant_violation_names_file(tmp_path):
    build_corpus(CorpusSpec(products=["disc", "striped"], defects=["spot", "crack"], per_defect=1, per_good=1), tmp_path)
    Image.fromarray(np.full((32, 32), 255, np.uint8)).save(tmp_path / "disc" / GOOD / "mask_0000.png")
    with pytest.raises(ValueError, match="disc/good/img_0000.png"):
        load_dataset(tmp_path)


def test_mvtec_layout(tmp_path):
    s_good = make_sample("disc", GOOD, np.random.default_rng(0))
    s_bad = make_sample("disc", "spot", np.random.default_rng(1))
    root = tmp_path / "disc"
    for split, defect, s in [("train", GOOD, s_good), ("test", "spot", s_bad)]:
        (root / split / defect).mkdir(parents=True)
        Image.fromarray((s.image.transpose(1, 2, 0) * 255).astype(np.uint8)).resize((64, 64)).save(
            root / split / defect / "000.png")
    (root / "ground_truth" / "spot").mkdir(parents=True)
    Image.fromarray(s_bad.mask * 255).resize((64, 64)).save(root / "ground_truth" / "spot" / "000_mask.png")
    loaded = load_dataset(tmp_path, image_size=32)
    assert sorted((s.product, s.defect) for s in loaded) == [("disc", GOOD), ("disc", "spot")]
    spot = [s for s in loaded if s.defect == "spot"][0]
    assert spot.image.shape == (3, 32, 32) and np.array_equal(spot.mask, s_bad.mask)
