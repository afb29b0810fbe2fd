"""The two combined segment-then-classify baselines: re-encoding a masked
crop through the frozen backbone, and mask-pooling frozen backbone
features. Both use only the frozen model; neither touches the trained
recognition head."""

from __future__ import annotations

import numpy as np
import torch

from .clip2sam import LabelDistribution, frozen_scores
from .mini_clip import MiniClip, Vocabulary, zero_shot_scores
from .ops import bilinear_resize, to_tensor_image
from .synthdata import EmptyMaskError, mask_to_box

# The feature-crop baseline and the frozen score branch are one function.
feature_crop_from_feats = frozen_scores


def masked_crop(image: np.ndarray, mask: np.ndarray, out_size: int = 128) -> torch.Tensor:
    """Zero pixels outside the mask, crop to the tight box, zero-pad to a
    centered square, and resize to out_size (bilinear)."""
    if int(mask.sum()) == 0:
        raise EmptyMaskError("cannot crop an empty mask")
    x1, y1, x2, y2 = mask_to_box(mask)
    img = image * mask.astype(image.dtype)[:, :, None]
    crop = img[y1:y2, x1:x2]
    ch, cw = crop.shape[:2]
    side = max(ch, cw)
    canvas = np.zeros((side, side, 3), dtype=image.dtype)
    oy, ox = (side - ch) // 2, (side - cw) // 2
    canvas[oy : oy + ch, ox : ox + cw] = crop
    return bilinear_resize(to_tensor_image(canvas).unsqueeze(0), out_size, out_size)


def image_crop_classify(
    image: np.ndarray, mask: np.ndarray, clip: MiniClip, vocab: Vocabulary
) -> LabelDistribution:
    """Re-encode the masked crop and classify with zero-shot scores."""
    batch = masked_crop(image, mask)
    with torch.no_grad():
        feats = clip.encode_image_pyramid(batch)
        emb = clip.global_image_embedding(feats)[0]
        probs = zero_shot_scores(emb, torch.from_numpy(vocab.embeddings), float(clip.tau))
    return LabelDistribution(probs=probs.numpy(), source="frozen")


def feature_crop_classify(
    image: np.ndarray, mask: np.ndarray, clip: MiniClip, vocab: Vocabulary
) -> LabelDistribution:
    """Mask-pool frozen features; delegates to the shared frozen-score path."""
    with torch.no_grad():
        feats = clip.encode_image_pyramid(to_tensor_image(image).unsqueeze(0))
    return feature_crop_from_feats(feats, mask, clip, vocab)
