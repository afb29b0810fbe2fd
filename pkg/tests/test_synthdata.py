import json

import numpy as np
import pytest

from ovsam import synthdata as sd
from ovsam.rng import CounterRng


# -- geometry ----------------------------------------------------------------


def test_mask_to_box_single_pixel():
    m = np.zeros((8, 8), np.uint8)
    m[3, 5] = 1
    assert sd.mask_to_box(m) == (5, 3, 6, 4)


def test_mask_to_box_full():
    m = np.ones((6, 9), np.uint8)
    assert sd.mask_to_box(m) == (0, 0, 9, 6)


def test_mask_to_box_empty_raises():
    with pytest.raises(sd.EmptyMaskError):
        sd.mask_to_box(np.zeros((4, 4), np.uint8))


def test_mask_to_box_contains_all_pixels_edges_touched():
    rng = CounterRng(5)
    for trial in range(30):
        m = (rng.array_uniform((20, 20)) > 0.8).astype(np.uint8)
        if m.sum() == 0:
            continue
        x1, y1, x2, y2 = sd.mask_to_box(m)
        ys, xs = np.nonzero(m)
        assert xs.min() == x1 and xs.max() == x2 - 1
        assert ys.min() == y1 and ys.max() == y2 - 1


def test_mask_iou_identical_and_disjoint():
    a = np.zeros((6, 6), np.uint8)
    a[1:3, 1:3] = 1
    assert sd.mask_iou(a, a) == 1.0
    b = np.zeros((6, 6), np.uint8)
    b[4:6, 4:6] = 1
    assert sd.mask_iou(a, b) == 0.0
    assert sd.mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_mask_iou_hand_counted_overlap():
    # two 2x2 squares overlapping in a 2x1 strip: inter 2, union 6
    a = np.zeros((4, 4), np.uint8)
    a[0:2, 0:2] = 1
    b = np.zeros((4, 4), np.uint8)
    b[0:2, 1:3] = 1
    assert sd.mask_iou(a, b) == pytest.approx(1 / 3, abs=1e-9)


def test_mask_iou_dim_mismatch():
    with pytest.raises(ValueError):
        sd.mask_iou(np.zeros((3, 3)), np.zeros((4, 4)))


def test_mask_iou_symmetry_and_erosion_monotonicity():
    rng = CounterRng(9)
    for _ in range(10):
        a = (rng.array_uniform((16, 16)) > 0.5).astype(np.uint8)
        b = (rng.array_uniform((16, 16)) > 0.5).astype(np.uint8)
        assert sd.mask_iou(a, b) == sd.mask_iou(b, a)
        # removing pixels from the intersection cannot increase IoU
        eroded = a.copy()
        inter = np.logical_and(a, b)
        ys, xs = np.nonzero(inter)
        if len(xs) == 0:
            continue
        eroded[ys[0], xs[0]] = 0
        assert sd.mask_iou(eroded, b) <= sd.mask_iou(a, b)


def test_center_point_full_square_and_single_pixel():
    assert sd.mask_center_point(np.ones((5, 5), np.uint8)) == (2, 2)
    m = np.zeros((7, 7), np.uint8)
    m[4, 2] = 1
    assert sd.mask_center_point(m) == (2, 4)


def test_center_point_ring_stays_inside():
    yy, xx = np.mgrid[0:25, 0:25]
    r2 = (xx - 12) ** 2 + (yy - 12) ** 2
    ring = ((r2 <= 120) & (r2 >= 49)).astype(np.uint8)
    x, y = sd.mask_center_point(ring)
    assert ring[y, x] == 1


def test_center_point_matches_bruteforce_transform():
    rng = CounterRng(21)
    for _ in range(10):
        m = (rng.array_uniform((14, 14)) > 0.4).astype(np.uint8)
        if m.sum() == 0:
            continue
        slow = sd.l1_distance_transform(m)
        fast = sd._l1_distance_transform_fast(m)
        assert np.array_equal(slow, fast)
        x, y = sd.mask_center_point(m)
        assert slow[y, x] == slow.max()
        # tie break: first maximum in (y, x) order
        ys, xs = np.nonzero(slow == slow.max())
        assert (y, x) == (ys[0], xs[0])


def test_center_point_empty_raises():
    with pytest.raises(sd.EmptyMaskError):
        sd.mask_center_point(np.zeros((4, 4), np.uint8))


# -- RLE ---------------------------------------------------------------------


def test_rle_all_zero_and_all_one():
    zeros = np.zeros((4, 4), np.uint8)
    ones = np.ones((4, 4), np.uint8)
    assert sd.rle_encode(zeros)["counts"] == [16]
    assert sd.rle_encode(ones)["counts"] == [0, 16]
    assert np.array_equal(sd.rle_decode({"counts": [16]}, 4, 4), zeros)
    assert np.array_equal(sd.rle_decode({"counts": [0, 16]}, 4, 4), ones)


def test_rle_column_major_order():
    m = np.zeros((3, 3), np.uint8)
    m[0, 1] = 1  # fourth element in column-major order
    assert sd.rle_encode(m)["counts"] == [3, 1, 5]


def test_rle_roundtrip_random():
    rng = CounterRng(33)
    for _ in range(100):
        m = (rng.array_uniform((16, 16)) > 0.5).astype(np.uint8)
        assert np.array_equal(sd.rle_decode(sd.rle_encode(m), 16, 16), m)


def test_rle_roundtrip_mixed_sizes():
    rng = CounterRng(34)
    for trial in range(50):
        h = rng.randint(1, 40)
        w = rng.randint(1, 40)
        m = (rng.array_uniform((h, w)) > rng.uniform(0.2, 0.8)).astype(np.uint8)
        assert np.array_equal(sd.rle_decode(sd.rle_encode(m), h, w), m)


def test_rle_count_sum_mismatch():
    with pytest.raises(sd.RleFormatError):
        sd.rle_decode({"counts": [5]}, 4, 4)


# -- scene generation --------------------------------------------------------


def test_generate_scene_deterministic():
    a = sd.generate_scene(7, range(24))
    b = sd.generate_scene(7, range(24))
    assert np.array_equal(a.image, b.image)
    assert len(a.instances) == len(b.instances)
    for x, y in zip(a.instances, b.instances):
        assert np.array_equal(x.mask, y.mask) and x.box == y.box and x.class_id == y.class_id


def test_generate_scene_single_class_forced():
    params = sd.GenParams(min_objects=1, max_objects=1)
    scene = sd.generate_scene(3, [5], params)
    assert len(scene.instances) == 1
    assert scene.instances[0].class_id == 5


def test_generate_scene_empty_pool_raises():
    with pytest.raises(ValueError):
        sd.generate_scene(1, [])


def test_generated_scenes_pass_validator_sweep():
    params = sd.GenParams()
    for seed in range(500):
        scene = sd.generate_scene(10_000 + seed, range(24), params)
        scene.validate(params)  # box tightness, IoU cap, min area


def test_scene_boxes_are_tight():
    scene = sd.generate_scene(99, range(24))
    for inst in scene.instances:
        assert sd.mask_to_box(inst.mask) == inst.box


def test_class_split_invariants():
    split = sd.default_class_split()
    split.validate()
    assert len(split.novel_ids) == 6
    assert len(split.base_ids) == 18


# -- dataset builds ----------------------------------------------------------


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    manifests = sd.build_datasets(root, seed=5, scale=0.01)
    return root, manifests


def test_build_dataset_counts_downscaled(small_root):
    _, manifests = small_root
    assert set(manifests) == {"clip_pretrain", "sa_like", "seg_labeled", "cls_only", "eval"}
    assert len(manifests["clip_pretrain"]) == 40
    assert len(manifests["eval"]) == 5


def test_default_split_sizes_constants():
    assert sd.SPLIT_SIZES == {
        "clip_pretrain": 4000,
        "sa_like": 2000,
        "seg_labeled": 1500,
        "cls_only": 2000,
        "eval": 500,
    }


def test_seg_labeled_has_no_novel_ids(small_root):
    root, manifests = small_root
    novel = set(manifests["seg_labeled"].class_split.novel_ids)
    for i in range(len(manifests["seg_labeled"])):
        ann = json.load(open(manifests["seg_labeled"].ann_path(i)))
        for inst in ann["instances"]:
            assert inst["class_id"] not in novel


def test_cls_only_single_object_base_only(small_root):
    _, manifests = small_root
    m = manifests["cls_only"]
    novel = set(m.class_split.novel_ids)
    for i in range(len(m)):
        ann = json.load(open(m.ann_path(i)))
        assert len(ann["instances"]) == 1
        assert ann["instances"][0]["class_id"] not in novel
        assert "rle" not in ann["instances"][0]


def test_clip_pretrain_has_captions(small_root):
    _, manifests = small_root
    ann = json.load(open(manifests["clip_pretrain"].ann_path(0)))
    assert ann["caption"].startswith("a photo of a ")


def test_scene_png_roundtrip_exact(small_root):
    _, manifests = small_root
    m = manifests["eval"]
    img = sd.load_scene_image(m.scene_path(0))
    # generation quantizes to 8-bit levels, so the PNG is lossless
    assert img.dtype == np.float32
    assert ((img * 255) % 1 < 1e-4).all()


def test_manifest_load_roundtrip(small_root):
    root, manifests = small_root
    loaded = sd.load_manifest(root, "eval")
    assert loaded.entries == list(manifests["eval"].entries)
    assert loaded.class_split == manifests["eval"].class_split


def test_eval_scene_annotations_decode(small_root):
    _, manifests = small_root
    m = manifests["eval"]
    img, ann = sd.load_scene(m, 0)
    insts = sd.ann_to_instances(ann)
    h, w = ann["size"]
    for inst in insts:
        assert inst.mask.shape == (h, w)
        assert sd.mask_to_box(inst.mask) == inst.box


def test_sharding_equivalence():
    """Per-scene derived seeds make sharded generation equal serial."""
    root_rng = CounterRng(42)
    serial = [root_rng.derive(3, i).seed for i in range(10)]
    shard_a = [CounterRng(42).derive(3, i).seed for i in range(0, 5)]
    shard_b = [CounterRng(42).derive(3, i).seed for i in range(5, 10)]
    assert serial == shard_a + shard_b
