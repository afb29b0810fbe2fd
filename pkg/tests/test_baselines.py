import numpy as np
import pytest
import torch

from ovsam import baselines
from ovsam.baselines import feature_crop_classify, image_crop_classify, masked_crop
from ovsam.clip2sam import frozen_scores
from ovsam.mini_clip import ClipConfig, MiniClip, build_vocabulary
from ovsam.ops import to_tensor_image
from ovsam.synthdata import EmptyMaskError, default_class_split, generate_scene


@pytest.fixture(scope="module")
def clip():
    torch.manual_seed(0)
    model = MiniClip(ClipConfig(seed=0))
    model.eval()
    return model


@pytest.fixture(scope="module")
def vocab(clip):
    return build_vocabulary(clip, default_class_split())


def test_feature_crop_is_frozen_scores_alias():
    assert baselines.feature_crop_from_feats is frozen_scores


def test_feature_crop_equals_frozen_scores_output(clip, vocab):
    scene = generate_scene(11, range(24))
    inst = scene.instances[0]
    got = feature_crop_classify(scene.image, inst.mask, clip, vocab)
    with torch.no_grad():
        feats = clip.encode_image_pyramid(to_tensor_image(scene.image).unsqueeze(0))
    want = frozen_scores(feats, inst.mask, clip, vocab)
    assert np.array_equal(got.probs, want.probs)


def test_image_crop_deterministic(clip, vocab):
    scene = generate_scene(12, range(24))
    inst = scene.instances[0]
    a = image_crop_classify(scene.image, inst.mask, clip, vocab)
    b = image_crop_classify(scene.image, inst.mask, clip, vocab)
    assert np.array_equal(a.probs, b.probs)
    a_dist = np.asarray(a.probs)
    assert a_dist.min() >= 0 and abs(a_dist.sum() - 1) < 1e-5


def test_image_crop_empty_mask_raises(clip, vocab):
    scene = generate_scene(13, range(24))
    with pytest.raises(EmptyMaskError):
        image_crop_classify(scene.image, np.zeros((128, 128), np.uint8), clip, vocab)


def test_masked_crop_geometry():
    img = np.zeros((128, 128, 3), dtype=np.float32)
    img[40:80, 20:100] = 0.7  # 40 x 80 block
    mask = np.zeros((128, 128), np.uint8)
    mask[40:80, 20:100] = 1
    out = masked_crop(img, mask, out_size=64)
    assert out.shape == (1, 3, 64, 64)
    # padding to square leaves zero bands above/below the wide crop
    assert float(out[0, :, :10, :].abs().max()) == 0.0
    assert float(out[0, :, -10:, :].abs().max()) == 0.0
    assert float(out[0, :, 28:36, 28:36].mean()) == pytest.approx(0.7, abs=1e-2)


def test_masked_crop_zeroes_outside_mask():
    img = np.ones((128, 128, 3), dtype=np.float32)
    mask = np.zeros((128, 128), np.uint8)
    mask[0:64, 0:64] = 1
    out = masked_crop(img, mask, out_size=64)
    # crop == mask box, so everything inside is mask pixels (ones)
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0 + 1e-6
    assert float(out.mean()) == pytest.approx(1.0, abs=1e-4)


def test_centered_full_frame_object_top1_agrees_with_global(clip, vocab):
    """An object filling the frame: masked crop ~= original image, so the
    baseline's top-1 matches full-image zero-shot scores."""
    from ovsam.mini_clip import zero_shot_scores

    scene = generate_scene(14, range(24))
    img = scene.image.copy()
    full_mask = np.ones((128, 128), np.uint8)
    crop_dist = image_crop_classify(img, full_mask, clip, vocab)
    with torch.no_grad():
        feats = clip.encode_image_pyramid(to_tensor_image(img).unsqueeze(0))
        emb = clip.global_image_embedding(feats)[0]
        direct = zero_shot_scores(emb, torch.from_numpy(vocab.embeddings), float(clip.tau))
    assert crop_dist.argmax == int(direct.argmax())
