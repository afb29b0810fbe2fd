"""The deployable model: frozen backbone + adapter + promptable decoder +
recognition head, with single-archive checkpointing.

The teacher encoder is deliberately absent: inference runs entirely on
the shared frozen backbone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import clip2sam as c2s
from .archive import count_parameters, load_archive, save_archive
from .clip2sam import Clip2Sam, FusionConfig, LabelDistribution
from .decoder import MaskPrediction, Prompt, PromptableDecoder, binarize
from .mini_clip import ClipConfig, MiniClip, PyramidFeatures, Vocabulary
from .ops import to_tensor_image
from .sam2clip import AdapterConfig, Sam2ClipAdapter

logger = logging.getLogger(__name__)


@dataclass
class PromptResult:
    mask: np.ndarray  # H x W uint8
    mask_logits: torch.Tensor
    iou_pred: float
    region_box: tuple[float, float, float, float]
    learned: LabelDistribution
    frozen: LabelDistribution
    fused: LabelDistribution
    fallback_box: bool
    degenerate_mask: bool


@dataclass
class OpenVocabSam:
    clip: MiniClip
    vocab: Vocabulary
    adapter: Sam2ClipAdapter
    decoder: PromptableDecoder
    clip2sam: Clip2Sam
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def eval_mode(self) -> "OpenVocabSam":
        for m in (self.clip, self.adapter, self.decoder, self.clip2sam):
            m.eval()
        return self

    # -- inference ---------------------------------------------------------

    def encode_scene(self, image: np.ndarray) -> tuple[PyramidFeatures, torch.Tensor]:
        """Frozen pyramid + adapted stride-16 features for one image."""
        with torch.no_grad():
            feats = self.clip.encode_image_pyramid(to_tensor_image(image).unsqueeze(0))
            student = self.adapter(feats)[0]
        return feats, student

    def segment(self, image: np.ndarray, prompts: list[Prompt]) -> list[PromptResult]:
        if not prompts:
            raise ValueError("at least one prompt is required")
        h, w = image.shape[:2]
        feats, student = self.encode_scene(image)
        with torch.no_grad():
            pred: MaskPrediction = self.decoder(student, prompts, (h, w))
            maps = self.clip2sam.build_fpn(feats)
            boxes, fallback_flags = [], []
            masks = []
            for k, p in enumerate(prompts):
                m = binarize(pred.mask_logits[k]).numpy()
                masks.append(m)
                box, fb = c2s.prompt_to_region(p, m, (h, w))
                boxes.append(box)
                fallback_flags.append(fb)
            emb = self.clip2sam.region_embedding(
                maps, boxes, pred.label_token_out, batch_idx=[0] * len(boxes)
            )
        results = []
        for k, p in enumerate(prompts):
            learned = c2s.classify_region(emb[k], self.vocab, self.fusion.tau_region)
            frozen = c2s.frozen_scores(feats, masks[k], self.clip, self.vocab)
            fused = c2s.fuse_scores(learned, frozen, self.vocab, self.fusion)
            results.append(
                PromptResult(
                    mask=masks[k],
                    mask_logits=pred.mask_logits[k],
                    iou_pred=float(pred.iou_pred[k]),
                    region_box=boxes[k],
                    learned=learned,
                    frozen=frozen,
                    fused=fused,
                    fallback_box=fallback_flags[k],
                    degenerate_mask=int(masks[k].sum()) == 0,
                )
            )
        return results

    # -- checkpointing -------------------------------------------------------

    def state_tensors(self) -> dict:
        tensors = {}
        for prefix, module in (
            ("clip", self.clip),
            ("sam2clip", self.adapter),
            ("decoder", self.decoder),
            ("clip2sam", self.clip2sam),
        ):
            tensors.update({f"{prefix}.{k}": v for k, v in module.state_dict().items()})
        return tensors

    def save(self, path) -> None:
        meta = {
            "kind": "ovsam",
            "vocab_names": self.vocab.names,
            "is_base": self.vocab.is_base,
            "fusion": {
                "alpha_base": self.fusion.alpha_base,
                "alpha_novel": self.fusion.alpha_novel,
                "tau_region": self.fusion.tau_region,
            },
            "clip_config": {"channels": list(self.clip.cfg.channels), "d_t": self.clip.cfg.d_t},
            "adapter_config": {
                "dim": self.adapter.cfg.dim,
                "depth": self.adapter.cfg.depth,
                "heads": self.adapter.cfg.heads,
                "mlp_ratio": self.adapter.cfg.mlp_ratio,
            },
        }
        save_archive(path, self.state_tensors(), meta)

    @staticmethod
    def load(path) -> "OpenVocabSam":
        tensors, meta = load_archive(path)
        if meta.get("kind") != "ovsam":
            raise ValueError(f"archive at {path} is not a model checkpoint")
        bundle = _assemble_from_meta(meta)
        for prefix, module in (
            ("clip", bundle.clip),
            ("sam2clip", bundle.adapter),
            ("decoder", bundle.decoder),
            ("clip2sam", bundle.clip2sam),
        ):
            sub = {
                k[len(prefix) + 1 :]: torch.from_numpy(np.array(v))
                for k, v in tensors.items()
                if k.startswith(prefix + ".")
            }
            missing = set(module.state_dict()) - set(sub)
            if missing and prefix == "clip2sam":
                # stage-2 resume from a stage-1 archive: recognition head
                # keeps its seeded fresh initialization
                logger.warning(
                    "checkpoint lacks %d clip2sam tensors; keeping fresh init", len(missing)
                )
                continue
            module.load_state_dict(sub)
        bundle.vocab.embeddings = (
            bundle.clip.encode_text(bundle.vocab.names).detach().numpy().astype(np.float32)
        )
        return bundle.eval_mode()

    def inference_parameter_count(self) -> int:
        return count_parameters(self.state_tensors())


def _assemble_from_meta(meta: dict) -> OpenVocabSam:
    torch.manual_seed(0)  # documented init scheme for missing components
    clip_cfg = ClipConfig(
        channels=tuple(meta["clip_config"]["channels"]), d_t=meta["clip_config"]["d_t"]
    )
    ad = meta["adapter_config"]
    adapter_cfg = AdapterConfig(
        dim=ad["dim"], depth=ad["depth"], heads=ad["heads"], mlp_ratio=ad["mlp_ratio"]
    )
    clip = MiniClip(clip_cfg)
    vocab = Vocabulary(
        names=meta["vocab_names"],
        embeddings=np.eye(len(meta["vocab_names"]), clip_cfg.d_t, dtype=np.float32),
        is_base=meta["is_base"],
    )
    fusion = FusionConfig(**meta["fusion"])
    return OpenVocabSam(
        clip=clip,
        vocab=vocab,
        adapter=Sam2ClipAdapter(adapter_cfg, in_channels=clip_cfg.channels),
        decoder=PromptableDecoder(dim=adapter_cfg.dim),
        clip2sam=Clip2Sam(in_channels=clip_cfg.channels, d_f=adapter_cfg.dim, d_t=clip_cfg.d_t),
        fusion=fusion,
    )


def assemble(
    clip: MiniClip,
    vocab: Vocabulary,
    adapter: Sam2ClipAdapter,
    decoder: PromptableDecoder,
    head: Clip2Sam | None = None,
    fusion: FusionConfig | None = None,
) -> OpenVocabSam:
    if head is None:
        torch.manual_seed(0)
        head = Clip2Sam(
            in_channels=clip.cfg.channels, d_f=adapter.cfg.dim, d_t=clip.cfg.d_t
        )
    return OpenVocabSam(
        clip=clip,
        vocab=vocab,
        adapter=adapter,
        decoder=decoder,
        clip2sam=head,
        fusion=fusion or FusionConfig(),
    )
