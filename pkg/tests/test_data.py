import json

import numpy as np
import numpy.testing as npt
import pytest
import yaml

from rccformer.core.errors import AnnotationError, ConfigError, DatasetError, SceneError
from rccformer.core.interfaces import DotAnnotation
from rccformer.core.rng import make_rng
from rccformer.data.augment import augment, crop, hflip
from rccformer.data.loader import (CrowdDataset, build_dataset, format_annotation,
                                   load_sample, parse_annotation, read_manifest,
                                   split_seed_ranges, write_image)
from rccformer.data.synth import SceneSpec, _background, synth_scene
from rccformer.enums import DensityLevel, Split


# =============================================================================
# Scene synthesis
# =============================================================================


def test_same_seed_same_scene():
    spec = SceneSpec(image_size=64, count_max=20, seed=42)
    a, b = synth_scene(spec), synth_scene(spec)
    npt.assert_array_equal(a.image, b.image)
    npt.assert_array_equal(a.annotation.dots, b.annotation.dots)
    assert a.image.shape == (64, 64, 3) and a.image.dtype == np.uint8


def test_requested_count_is_exact():
    scene = synth_scene(SceneSpec(image_size=128, count=25, seed=3))
    assert scene.count == 25
    assert scene.level == DensityLevel.S2


def test_drawn_count_within_range():
    for seed in range(5):
        spec = SceneSpec(image_size=64, count_min=3, count_max=9, seed=seed)
        scene = synth_scene(spec)
        assert 3 <= scene.count <= 9
        dots = scene.annotation.dots
        assert ((dots >= 0) & (dots < 64)).all()


def test_no_clutter_and_no_heads_is_background_only():
    scene = synth_scene(SceneSpec(image_size=32, count=0, clutter=0.0, seed=8))
    background = np.clip(_background(32, make_rng(8)), 0.0, 1.0)
    expected = np.round(background * 255).astype(np.uint8)
    npt.assert_array_equal(scene.image, expected)
    assert scene.level == DensityLevel.S0


def test_clutter_changes_image():
    plain = synth_scene(SceneSpec(image_size=32, count=0, clutter=0.0, seed=8))
    busy = synth_scene(SceneSpec(image_size=32, count=0, clutter=2.0, seed=8))
    assert not np.array_equal(plain.image, busy.image)
    assert busy.count == 0


def test_heads_shrink_with_depth():
    spec = SceneSpec(image_size=64, head_radius=6.0, perspective=3.0)
    assert spec.radius_at(0) == pytest.approx(6.0)
    assert spec.radius_at(63) == pytest.approx(2.0)


def test_infeasible_packing_rejected():
    with pytest.raises(SceneError):
        synth_scene(SceneSpec(image_size=32, count=200, head_radius=4.0, seed=1))


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(image_size=48)
    with pytest.raises(ValueError):
        SceneSpec(count_min=5, count_max=2)


# =============================================================================
# Annotation files
# =============================================================================


def test_parse_single_dot():
    ann = parse_annotation("3.5 7.25\n")
    npt.assert_array_equal(ann.dots, [[3.5, 7.25]])


def test_empty_file_is_a_negative_sample():
    assert len(parse_annotation("")) == 0
    assert len(parse_annotation("\n  \n")) == 0


def test_malformed_line_reports_line_number():
    with pytest.raises(AnnotationError, match="line 3"):
        parse_annotation("1 2\n\n4 five\n")
    with pytest.raises(AnnotationError, match="line 1"):
        parse_annotation("1 2 3\n")
    with pytest.raises(AnnotationError, match="line 2"):
        parse_annotation("1 2\nnan 4\n")


def test_dot_on_right_edge_rejected():
    with pytest.raises(AnnotationError):
        parse_annotation("32 5\n", image_hw=(32, 32))
    assert len(parse_annotation("31.99 5\n", image_hw=(32, 32))) == 1


def test_format_annotation_parses_back():
    ann = DotAnnotation(np.array([[0.1, 2.0], [17.333333333333332, 5.5]]))
    npt.assert_array_equal(parse_annotation(format_annotation(ann)).dots, ann.dots)


def test_load_sample(tmp_path):
    pixels = np.zeros((32, 64, 3), dtype=np.uint8)
    pixels[..., 0] = 255
    write_image(tmp_path / "a.png", pixels)
    (tmp_path / "a.txt").write_text("63 31\n0 0\n")
    image, ann = load_sample(tmp_path / "a.png", tmp_path / "a.txt")
    assert image.shape == (3, 32, 64)
    npt.assert_array_equal(image[0], 1.0)
    npt.assert_array_equal(image[1:], 0.0)
    assert len(ann) == 2


def test_load_sample_missing_files(tmp_path):
    write_image(tmp_path / "a.png", np.zeros((8, 8, 3), dtype=np.uint8))
    with pytest.raises(DatasetError):
        load_sample(tmp_path / "a.png", tmp_path / "missing.txt")
    with pytest.raises(DatasetError):
        load_sample(tmp_path / "missing.png", tmp_path / "a.txt")


# =============================================================================
# Augmentation
# =============================================================================


def _image_and_dots(rng, h=64, w=96):
    image = rng.random((3, h, w))
    dots = np.stack([rng.uniform(0, w, 30), rng.uniform(0, h, 30)], axis=1)
    return image, DotAnnotation(dots)


def test_full_crop_without_flip_is_identity(rng):
    image, ann = _image_and_dots(rng, 64, 64)
    out, out_ann = augment(image, ann, 64, 0.0, rng)
    npt.assert_array_equal(out, image)
    npt.assert_array_equal(out_ann.dots, ann.dots)


def test_flip_is_an_involution(rng):
    image, ann = _image_and_dots(rng)
    twice, twice_ann = hflip(*hflip(image, ann))
    npt.assert_array_equal(twice, image)
    npt.assert_allclose(twice_ann.dots, ann.dots)


def test_flip_mirrors_x():
    image = np.zeros((3, 4, 10))
    _, ann = hflip(image, DotAnnotation(np.array([[0.0, 1.0], [2.5, 3.0]])))
    npt.assert_array_equal(ann.dots, [[9.0, 1.0], [6.5, 3.0]])


def test_crop_keeps_only_dots_inside(rng):
    image, ann = _image_and_dots(rng)
    for _ in range(10):
        out, out_ann = augment(image, ann, 32, 0.5, rng)
        assert out.shape == (3, 32, 32)
        dots = out_ann.dots
        assert ((dots >= 0) & (dots < 32)).all()


def test_crop_shifts_dots():
    image = np.zeros((3, 64, 64))
    _, ann = crop(image, DotAnnotation(np.array([[40.0, 10.0], [5.0, 5.0]])), 0, 32, 32)
    npt.assert_array_equal(ann.dots, [[8.0, 10.0]])


def test_bad_crops_rejected(rng):
    image, ann = _image_and_dots(rng, 64, 64)
    with pytest.raises(ConfigError):
        augment(image, ann, 48, 0.5, rng)
    with pytest.raises(ConfigError):
        augment(image, ann, 96, 0.5, rng)


# =============================================================================
# Dataset directories
# =============================================================================


def test_split_ranges_are_disjoint():
    ranges = split_seed_ranges(100, 5, 3)
    assert ranges[Split.TRAIN] == (100, 105)
    assert ranges[Split.VAL] == (105, 108)
    with pytest.raises(ConfigError):
        split_seed_ranges(2**64 - 3, 2, 2)


def test_manifest_matches_files(mini_dataset, mini_synth):
    rows = read_manifest(mini_dataset)
    assert [r["id"] for r in rows] == ["train_00000", "train_00001", "train_00002",
                                       "train_00003", "val_00000", "val_00001"]
    assert [r["seed"] for r in rows] == list(range(7, 13))
    for row in rows:
        text = (mini_dataset / "annotations" / f"{row['id']}.txt").read_text()
        assert len(parse_annotation(text)) == row["count"]
        assert mini_synth.count_min <= row["count"] <= mini_synth.count_max
    info = yaml.safe_load((mini_dataset / "dataset.yaml").read_text())
    assert info["seed"] == 7
    assert info["splits"] == {"train": [7, 11], "val": [11, 13]}


def test_dataset_rebuild_is_byte_identical(tmp_path, mini_synth):
    a = build_dataset(tmp_path / "a", mini_synth, seed=5).parent
    b = build_dataset(tmp_path / "b", mini_synth, seed=5).parent
    names = ("manifest.jsonl", "images/train_00001.png", "annotations/val_00000.txt")
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_existing_dataset_needs_force(mini_dataset, mini_synth):
    with pytest.raises(DatasetError):
        build_dataset(mini_dataset, mini_synth, seed=7)
    build_dataset(mini_dataset, mini_synth, seed=9, force=True)
    assert read_manifest(mini_dataset)[0]["seed"] == 9


def test_crowd_dataset_split(mini_dataset):
    train = CrowdDataset(mini_dataset, Split.TRAIN)
    val = CrowdDataset(mini_dataset, "val")
    assert (len(train), len(val)) == (4, 2)
    sample = val[1]
    assert sample.image_id == "val_00001"
    assert sample.image.shape == (3, 32, 32)
    assert isinstance(sample.level, DensityLevel)
    assert val[1] is sample
    assert [s.image_id for s in val] == val.ids


def test_manifest_count_mismatch_detected(mini_dataset):
    path = mini_dataset / "manifest.jsonl"
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    rows[0]["count"] += 1
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    with pytest.raises(DatasetError):
        CrowdDataset(mini_dataset, Split.TRAIN)[0]


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        CrowdDataset(tmp_path)


def test_training_batches(mini_dataset):
    dataset = CrowdDataset(mini_dataset, Split.TRAIN)
    batches = list(dataset.batches(3, make_rng(0), crop=32, flip_prob=0.5))
    assert [len(b.ids) for b in batches] == [3, 1]
    assert batches[0].images.shape == (3, 3, 32, 32)
    assert batches[0].targets.shape == (3, 4, 4)
    assert sorted(sum((b.ids for b in batches), [])) == dataset.ids
    # full-size crops keep every dot
    total = sum(b.counts.sum() for b in batches)
    assert total == sum(s.count for s in dataset)


def test_eval_batches_in_manifest_order(mini_dataset):
    dataset = CrowdDataset(mini_dataset, Split.TRAIN)
    batches = list(dataset.eval_batches(3))
    assert sum((b.ids for b in batches), []) == dataset.ids
    npt.assert_array_equal(batches[0].counts, [s.count for s in list(dataset)[:3]])


def test_sample_cache_is_bounded(mini_dataset):
    dataset = CrowdDataset(mini_dataset, Split.TRAIN, cache_size=2)
    first = dataset[0]
    dataset[1]
    assert dataset[0] is first
    dataset[2]
    assert list(dataset.cache) == [0, 2]
    dataset[1]
    assert list(dataset.cache) == [2, 1]
    assert len(dataset.cache) == 2


def test_disabled_cache_reloads(mini_dataset):
    dataset = CrowdDataset(mini_dataset, Split.TRAIN, cache_size=0)
    assert dataset[0] is not dataset[0]
    npt.assert_array_equal(dataset[0].image, dataset[0].image)
    with pytest.raises(ConfigError):
        CrowdDataset(mini_dataset, Split.TRAIN, cache_size=-1)
