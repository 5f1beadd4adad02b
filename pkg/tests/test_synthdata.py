import json
from itertools import combinations

import numpy as np
import pytest
import torch

from sbrcnn.exceptions import ManifestError
from sbrcnn.geometry import iou
from sbrcnn.schemas import GeneratorConfig, RLEMask
from sbrcnn.synthdata import (
    ShapesDataset,
    annotation_box,
    collate,
    generate_dataset,
    mask_to_box,
    read_manifest,
    render_shape,
    rle_decode,
    rle_encode,
    write_dataset,
    write_manifest,
)


def test_rle_counts_start_with_zeros():
    assert rle_encode(np.array([[0, 1], [1, 1]], dtype=bool)).counts == [1, 3]
    assert rle_encode(np.array([[1, 0], [0, 0]], dtype=bool)).counts == [0, 1, 3]
    assert rle_encode(np.zeros((2, 3), dtype=bool)).counts == [6]


def test_rle_decode_restores_mask():
    mask = render_shape(3, 20, 24, 2, 3, 14)
    rle = rle_encode(mask)
    assert rle.size == (20, 24)
    assert np.array_equal(rle_decode(rle), mask)


def test_rle_rejects_counts_that_do_not_cover_the_image():
    with pytest.raises(ValueError):
        RLEMask(size=(2, 2), counts=[1, 2])


def test_square_area_and_box():
    mask = render_shape(2, 32, 32, 5, 5, 10)
    assert mask.sum() == 100
    assert tuple(mask_to_box(mask)) == (5.0, 5.0, 15.0, 15.0)


def test_circle_and_triangle_fit_their_square():
    for category in (1, 3):
        mask = render_shape(category, 40, 40, 8, 4, 20)
        box = mask_to_box(mask)
        assert box.x1 >= 8 and box.y1 >= 4 and box.x2 <= 28 and box.y2 <= 24
        assert 0 < mask.sum() < 400


def test_unknown_category_is_rejected():
    with pytest.raises(ValueError):
        render_shape(9, 8, 8, 0, 0, 4)


def test_generation_is_deterministic(tiny_generator_config):
    m1, images1 = generate_dataset(tiny_generator_config)
    m2, images2 = generate_dataset(tiny_generator_config)
    assert m1.model_dump_json() == m2.model_dump_json()
    assert all(np.array_equal(a, b) for a, b in zip(images1, images2))


def test_different_seed_gives_different_images(tiny_generator_config):
    other = tiny_generator_config.model_copy(update={"seed": 5})
    _, a = generate_dataset(tiny_generator_config)
    _, b = generate_dataset(other)
    assert not all(np.array_equal(x, y) for x, y in zip(a, b))


def test_annotations_agree_with_their_masks(tiny_generator_config):
    manifest, _ = generate_dataset(tiny_generator_config)
    assert manifest.annotations
    for ann in manifest.annotations:
        mask = rle_decode(ann.segmentation)
        assert mask.sum() == ann.area
        assert mask_to_box(mask) == annotation_box(ann)


def test_sparse_policy_caps_pairwise_overlap():
    config = GeneratorConfig(n_images=10, image_size=64, instances_per_image=(3, 5), size_range=(16, 40), seed=2)
    manifest, _ = generate_dataset(config)
    for anns in manifest.annotations_by_image().values():
        for a, b in combinations(anns, 2):
            assert iou(annotation_box(a), annotation_box(b)) <= 0.3 + 1e-9


def test_infeasible_placements_are_counted():
    config = GeneratorConfig(
        n_images=3, image_size=64, instances_per_image=(12, 12), size_range=(60, 64), overlap_policy="sparse", seed=0
    )
    manifest, _ = generate_dataset(config)
    for record in manifest.images:
        kept = len(manifest.annotations_by_image()[record.id])
        assert kept + record.dropped_instances == 12
        assert record.dropped_instances > 0


def test_write_dataset_is_byte_identical(tmp_path, tiny_generator_config):
    first = write_dataset(tiny_generator_config, tmp_path / "a")
    second = write_dataset(tiny_generator_config, tmp_path / "b")
    assert first.read_bytes() == second.read_bytes()
    for record in read_manifest(first).images:
        assert (first.parent / record.file_name).read_bytes() == (second.parent / record.file_name).read_bytes()


def test_read_manifest_round_trip(tmp_path, tiny_generator_config):
    manifest, _ = generate_dataset(tiny_generator_config)
    path = tmp_path / "annotations.json"
    write_manifest(manifest, path)
    assert read_manifest(path) == manifest


def test_read_manifest_missing_file(tmp_path):
    with pytest.raises(ManifestError, match="not found"):
        read_manifest(tmp_path / "nope.json")


def test_read_manifest_names_the_bad_record(tmp_path, tiny_generator_config):
    manifest, _ = generate_dataset(tiny_generator_config)
    raw = json.loads(manifest.model_dump_json())
    raw["annotations"][0]["segmentation"]["counts"] = [1, 2, 3]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match=f"id={raw['annotations'][0]['id']}"):
        read_manifest(path)


def test_read_manifest_rejects_dangling_reference(tmp_path, tiny_generator_config):
    manifest, _ = generate_dataset(tiny_generator_config)
    raw = json.loads(manifest.model_dump_json())
    raw["annotations"][0]["image_id"] = 999
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ManifestError, match="unknown image 999"):
        read_manifest(path)


def test_read_manifest_requires_arrays(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"images": []}))
    with pytest.raises(ManifestError, match="annotations"):
        read_manifest(path)


def test_dataset_items(tiny_dataset):
    image, target = tiny_dataset[0]
    assert image.shape == (1, 64, 64)
    assert image.dtype == torch.float32
    assert 0.0 <= image.min() and image.max() <= 1.0
    g = target["boxes"].shape[0]
    assert target["labels"].shape == (g,)
    assert target["masks"].shape == (g, 64, 64)
    assert set(target["labels"].tolist()) <= {1, 2, 3}


def test_dataset_from_disk_matches_memory(tmp_path, tiny_generator_config, tiny_dataset):
    on_disk = ShapesDataset.from_path(write_dataset(tiny_generator_config, tmp_path))
    a, ta = on_disk[1]
    b, tb = tiny_dataset[1]
    torch.testing.assert_close(a, b)
    torch.testing.assert_close(ta["boxes"], tb["boxes"])
    assert torch.equal(ta["masks"], tb["masks"])


def test_dataset_reports_missing_image(tmp_path, tiny_generator_config):
    path = write_dataset(tiny_generator_config, tmp_path)
    dataset = ShapesDataset.from_path(path)
    (path.parent / dataset.manifest.images[0].file_name).unlink()
    with pytest.raises(ManifestError, match="missing on disk"):
        dataset[0]


def test_collate_keeps_targets_as_lists(tiny_dataset):
    images, targets = collate([tiny_dataset[0], tiny_dataset[1]])
    assert len(images) == 2 and len(targets) == 2
    assert targets[0]["image_id"] == tiny_dataset.manifest.images[0].id


def test_circle_area_matches_pi_r_squared():
    mask = render_shape(1, 64, 64, 10, 10, 20)
    assert mask.sum() == pytest.approx(np.pi * 100, rel=0.02)


def test_classes_are_balanced():
    config = GeneratorConfig(n_images=1000, image_size=64, instances_per_image=(1, 4), size_range=(8, 24), seed=0)
    manifest, _ = generate_dataset(config)
    labels = [ann.category_id for ann in manifest.annotations]
    assert len(labels) >= 1000
    counts = np.bincount(labels, minlength=4)[1:]
    frequencies = counts / len(labels)
    assert np.all(np.abs(frequencies - 1 / 3) <= 0.1 / 3)
