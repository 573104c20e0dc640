"""Full segmentation model: LoRA encoder, optional embedding enhancer,
and the one- or two-stage decoder, assembled per ablation toggles.

With every toggle off the model collapses to the single-stage baseline
(encoder + stage-1 decoder). Any enabled toggle brings in the second
stage with the corresponding feature: mask-modulated cross-attention,
skip-connected full-resolution pixel decoder, or the class-balanced
mask-guided embedding enhancement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import ClassNoiseTable, MaskGuidedEnhancer
from .decoder import ClassQueries, Stage1Decoder, Stage2Decoder, Stage1Output, Stage2Output, ensemble
from .encoder import EncoderConfig, VitEncoder, lora_param_count_closed_form
from .errors import UsageError
from .losses import nearest_label_resize
from .nn import bilinear_resize
from .tensor import Tensor


@dataclass
class AblationToggles:
    learnable_mask_attention: bool = True
    hierarchical_pixel_decoder: bool = True
    cmattn: bool = True

    @property
    def two_stage(self) -> bool:
        return self.learnable_mask_attention or self.hierarchical_pixel_decoder or self.cmattn


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = 4
    decoder_heads: int = 4
    decoder_depth: int = 2
    toggles: AblationToggles = field(default_factory=AblationToggles)
    use_original_mask_attention: bool = False  # binary-mask baseline for stage 2
    fresh_stage2_queries: bool = False
    noise_sigma0: float = 0.05
    noise_var_max: float = 1.0

    @property
    def stage2_mask_mode(self) -> str:
        if self.toggles.learnable_mask_attention:
            return "learnable"
        return "original" if self.use_original_mask_attention else "none"


@dataclass
class ModelOutput:
    stage1: Stage1Output
    stage2: Stage2Output | None

    @property
    def two_stage(self) -> bool:
        return self.stage2 is not None


class HierarchicalSegmenter:
    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 noise_table: ClassNoiseTable | None = None):
        self.cfg = cfg
        d = cfg.encoder.dim
        self.encoder = VitEncoder(rng, cfg.encoder)
        self.queries = ClassQueries(rng, cfg.num_classes, d)
        self.stage1 = Stage1Decoder(rng, d, cfg.decoder_heads, cfg.decoder_depth)
        self.enhancer = None
        self.stage2 = None
        self.stage2_queries = None
        if cfg.toggles.two_stage:
            if cfg.toggles.cmattn:
                self.enhancer = MaskGuidedEnhancer(rng, cfg.num_classes, d)
            self.stage2 = Stage2Decoder(
                rng, d, cfg.decoder_heads, cfg.decoder_depth,
                hierarchical=cfg.toggles.hierarchical_pixel_decoder,
                mask_mode=cfg.stage2_mask_mode,
            )
            if cfg.fresh_stage2_queries:
                self.stage2_queries = ClassQueries(rng, cfg.num_classes, d)
        self.noise_table = noise_table or ClassNoiseTable(var=np.zeros(cfg.num_classes))

    # ---- forward ---------------------------------------------------------

    def forward(self, images: Tensor, *, training: bool = False,
                gt: np.ndarray | None = None, noise_seed=None) -> ModelOutput:
        cfg = self.cfg
        embedding = self.encoder(images)
        s1 = self.stage1(embedding, self.queries)
        if self.stage2 is None:
            return ModelOutput(stage1=s1, stage2=None)

        if self.enhancer is not None:
            gt_small = None
            if training:
                if gt is None:
                    raise UsageError("training with the embedding enhancer requires gt labels")
                g = cfg.encoder.grid
                gt_small = nearest_label_resize(np.asarray(gt), g, g)
            enhanced = self.enhancer(embedding, s1.mask_feature, table=self.noise_table,
                                     gt=gt_small, rng_seed=noise_seed, training=training)
        else:
            enhanced = embedding

        tokens = (self.stage2_queries.tokens.reshape((1,) + self.stage2_queries.tokens.shape)
                  + Tensor(np.zeros((images.shape[0],) + self.stage2_queries.tokens.shape))
                  ) if self.stage2_queries is not None else s1.tokens_out
        s2 = self.stage2(enhanced, s1.prior, s1.skip_features, tokens)
        return ModelOutput(stage1=s1, stage2=s2)

    def predict_probs(self, out: ModelOutput, out_h: int, out_w: int) -> Tensor:
        """Class probabilities at the requested resolution (ensembled when
        both stages ran)."""
        if out.stage2 is None:
            return bilinear_resize(out.stage1.prior, out_h, out_w)
        return ensemble(out.stage1.prior, out.stage2.logits, out_h, out_w)

    # ---- introspection ------------------------------------------------------

    def transformer_layer_count(self) -> int:
        n = len(self.stage1.blocks)
        if self.stage2 is not None:
            n += len(self.stage2.blocks)
        return n

    def named_params(self):
        yield from self.encoder.named_params("encoder")
        yield from self.queries.named_params("queries")
        yield from self.stage1.named_params("stage1")
        if self.enhancer is not None:
            yield from self.enhancer.named_params("enhancer")
        if self.stage2 is not None:
            yield from self.stage2.named_params("stage2")
        if self.stage2_queries is not None:
            yield from self.stage2_queries.named_params("stage2_queries")

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_params() if p.requires_grad]

    def parameter_report(self) -> dict:
        total = trainable = 0
        lora = self.encoder.lora_param_count()
        for _, p in self.named_params():
            total += p.size
            if p.requires_grad:
                trainable += p.size
        return {
            "total": total,
            "trainable": trainable,
            "frozen": total - trainable,
            "lora_bypass": lora,
            "lora_bypass_closed_form": lora_param_count_closed_form(self.cfg.encoder),
            "decoder_and_queries": trainable - lora,
        }

    def zero_grads(self) -> None:
        for _, p in self.named_params():
            p.grad = None
