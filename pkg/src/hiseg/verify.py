"""Self-verification suite behind the `verify` CLI command.

Each check returns a machine-readable result with the measured value and
its tolerance; failures are report content, not exceptions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import (
    ClassNoiseTable,
    CrossAttention,
    class_balanced_augment,
    binary_mask_attention,
    learnable_mask_attention,
    multi_head_attention,
)
from .config import RunConfig
from .encoder import EncoderConfig, lora_param_count_closed_form
from .losses import LossConfig, lambda_w, total_loss
from .model import AblationToggles, HierarchicalSegmenter, ModelConfig
from .nn import ConvSpec, conv2d, conv_transpose2d, bilinear_resize, layer_norm
from .tensor import Tensor, backward, directional_grad_check, grad_check, softmax


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    details: str = ""

    def line(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        extra = f" {self.details}" if self.details else ""
        return f"{state} {self.name} measured={self.measured:.3e} tol={self.tolerance:.1e}{extra}"


def _op_gradient_checks(seeds: range) -> list[CheckResult]:
    worst = {}

    def track(name, report):
        cur = worst.get(name)
        if cur is None or report.max_rel_error > cur:
            worst[name] = report.max_rel_error

    for seed in seeds:
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((4, 3))
        w_ew = Tensor(rng.standard_normal((3, 4)))
        track("grad/elementwise", grad_check(
            lambda t: (t.gelu() * w_ew).exp().scale(0.1).mean(),
            Tensor(rng.standard_normal((3, 4))), tol=1e-4))
        track("grad/matmul", grad_check(
            lambda t: (t @ Tensor(w)).mean(), Tensor(rng.standard_normal((5, 4))), tol=1e-4))
        w_sm = Tensor(rng.standard_normal((2, 6)))
        track("grad/softmax", grad_check(
            lambda t: (softmax(t, axis=-1) * w_sm).sum(),
            Tensor(rng.standard_normal((2, 6))), tol=1e-4))
        gain = Tensor(rng.standard_normal(5))
        shift = Tensor(rng.standard_normal(5))
        track("grad/layer_norm", grad_check(
            lambda t: layer_norm(t, gain, shift, 1e-5).gelu().mean(),
            Tensor(rng.standard_normal((2, 5))), tol=1e-4))
        spec = ConvSpec(2, 3, kernel=3, padding=1)
        wv = rng.standard_normal((3, 2, 3, 3)) * 0.3
        track("grad/conv2d", grad_check(
            lambda t: conv2d(spec, t, Tensor(wv)).gelu().mean(),
            Tensor(rng.standard_normal((1, 2, 5, 5))), tol=1e-4))
        tspec = ConvSpec(3, 2, kernel=2, stride=2, transposed=True)
        twv = rng.standard_normal((3, 2, 2, 2)) * 0.3
        track("grad/conv_transpose2d", grad_check(
            lambda t: conv_transpose2d(tspec, t, Tensor(twv)).gelu().mean(),
            Tensor(rng.standard_normal((1, 3, 4, 4))), tol=1e-4))
        track("grad/bilinear_resize", grad_check(
            lambda t: bilinear_resize(t, 7, 5).gelu().mean(),
            Tensor(rng.standard_normal((1, 2, 4, 4))), tol=1e-4))
        attn = CrossAttention(rng, 8, 2)
        xv = rng.standard_normal((3, 8))
        sv = rng.standard_normal((4, 8))
        track("grad/learnable_mask", grad_check(
            lambda m: learnable_mask_attention(attn, Tensor(xv), Tensor(sv), m).gelu().mean(),
            Tensor(rng.uniform(0.1, 0.9, (3, 4))), tol=1e-4))
    return [CheckResult(name, err < 1e-4, err, 1e-4) for name, err in sorted(worst.items())]


def miniature_model() -> tuple[HierarchicalSegmenter, np.ndarray, np.ndarray]:
    cfg = ModelConfig(
        encoder=EncoderConfig(image_size=16, patch=8, depth=1, dim=16, heads=2, lora_rank=2),
        num_classes=3,
        decoder_heads=2,
        toggles=AblationToggles(),
    )
    rng = np.random.default_rng(1234)
    model = HierarchicalSegmenter(rng, cfg)
    for name, p in model.named_params():
        if name.endswith(".up"):
            p.data[:] = rng.standard_normal(p.shape) * 0.05
    model.enhancer.proj.weight.data[:] = rng.standard_normal((16, 3)) * 0.05
    img = rng.standard_normal((1, 1, 16, 16))
    gt = rng.integers(0, 3, (1, 16, 16))
    return model, img, gt


def _end_to_end_check(seeds: range) -> list[CheckResult]:
    model, img, gt = miniature_model()
    lcfg = LossConfig()

    def loss():
        out = model.forward(Tensor(img), training=True, gt=gt, noise_seed=7)
        val, _ = total_loss(out.stage1.logits, out.stage2.logits, gt, 0, lcfg)
        return val

    grouped: dict[str, list] = {}
    for name, p in model.trainable_params():
        grouped.setdefault(name.rsplit(".", 1)[0], []).append(p)

    worst = 0.0
    for seed in seeds:
        for gname, group in grouped.items():
            rng = np.random.default_rng([seed, abs(hash(gname)) % 2**31])
            report = directional_grad_check(loss, group, rng, tol=1e-3)
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                return [CheckResult("grad/end_to_end", False, report.max_rel_error, 1e-3,
                                    details=f"group={gname} seed={seed}")]
    return [CheckResult("grad/end_to_end", True, worst, 1e-3,
                        details=f"groups={len(grouped)} seeds={len(seeds)}")]


def _attention_identity_checks() -> list[CheckResult]:
    rng = np.random.default_rng(99)
    attn = CrossAttention(rng, 8, 2)
    x = Tensor(rng.standard_normal((4, 8)))
    src = Tensor(rng.standard_normal((6, 8)))

    ones = learnable_mask_attention(attn, x, src, Tensor(np.ones((4, 6))))
    plain = multi_head_attention(attn, x, src) + x
    err_ones = float(np.abs(ones.data - plain.data).max())

    zeros = learnable_mask_attention(attn, x, src, Tensor(np.zeros((4, 6))))
    err_zeros = float(np.abs(zeros.data - x.data).max())

    mask_bin = Tensor((rng.uniform(size=(4, 6)) > 0.5).astype(float), requires_grad=True)
    out = binary_mask_attention(attn, x, src, mask_bin)
    backward(out.mean())
    bin_grad = float(np.abs(mask_bin.grad).max())

    mask_prob = Tensor(rng.uniform(0.2, 0.8, (4, 6)), requires_grad=True)
    out = learnable_mask_attention(attn, x, src, mask_prob)
    backward(out.mean())
    learn_grad = float(np.abs(mask_prob.grad).max())

    report = grad_check(
        lambda m: learnable_mask_attention(attn, x, src, m).gelu().mean(),
        Tensor(rng.uniform(0.2, 0.8, (4, 6))), tol=1e-4)

    return [
        CheckResult("identity/ones_mask_equals_plain", err_ones < 1e-12, err_ones, 1e-12),
        CheckResult("identity/zeros_mask_returns_residual", err_zeros == 0.0, err_zeros, 0.0),
        CheckResult("identity/binary_mask_grad_zero", bin_grad == 0.0, bin_grad, 0.0),
        CheckResult("identity/learnable_mask_grad_nonzero", learn_grad > 1e-8, learn_grad, 1e-8,
                    details="measured must exceed tol"),
        CheckResult("identity/learnable_mask_grad_fd", report.passed, report.max_rel_error, 1e-4),
    ]


def _noise_statistics_check(draws: int = 100_000) -> list[CheckResult]:
    table = ClassNoiseTable(var=np.array([0.05, 0.3]))
    p = Tensor(np.zeros((draws, 2, 2, 2)))
    gt = np.ones((draws, 2, 2), dtype=int)
    out = class_balanced_augment(p, gt, table, rng_seed=[5, 17])
    rel = float(np.abs(out.data.var(axis=0) / table.var[1] - 1.0).max())

    eval_out = class_balanced_augment(p, gt, table, rng_seed=[5, 17], training=False)
    noop = float(np.abs(eval_out.data - p.data).max())
    return [
        CheckResult("noise/empirical_variance", rel < 0.05, rel, 0.05),
        CheckResult("noise/eval_mode_noop", noop == 0.0, noop, 0.0),
    ]


def _schedule_checks(cfg: RunConfig) -> list[CheckResult]:
    lw0 = lambda_w(0, cfg.loss)
    lw300 = lambda_w(300, cfg.loss)
    expect300 = cfg.loss.lambda_w_start * math.exp(-cfg.loss.lambda_w_decay * 300)
    return [
        CheckResult("schedule/lambda_w_epoch0", abs(lw0 - cfg.loss.lambda_w_start) < 1e-12,
                    abs(lw0 - cfg.loss.lambda_w_start), 1e-12),
        CheckResult("schedule/lambda_w_epoch300", abs(lw300 - expect300) < 1e-12,
                    abs(lw300 - expect300), 1e-12),
        CheckResult("schedule/convex_weights",
                    all(abs(lambda_w(e, cfg.loss) + (1 - lambda_w(e, cfg.loss)) - 1.0) < 1e-15
                        for e in range(0, 301, 25)), 0.0, 1e-15),
    ]


def _parameter_count_checks(cfg: RunConfig) -> list[CheckResult]:
    out = []
    for rank in (1, 4, 8, 16):
        enc_cfg = cfg.encoder_config()
        enc_cfg = EncoderConfig(
            image_size=enc_cfg.image_size, patch=enc_cfg.patch, depth=enc_cfg.depth,
            dim=enc_cfg.dim, heads=enc_cfg.heads, in_channels=enc_cfg.in_channels,
            mlp_ratio=enc_cfg.mlp_ratio, lora_rank=rank, lora_targets=enc_cfg.lora_targets)
        mcfg = ModelConfig(encoder=enc_cfg, num_classes=cfg.model.num_classes,
                           decoder_heads=cfg.model.decoder_heads,
                           decoder_depth=cfg.model.decoder_depth, toggles=cfg.ablation)
        model = HierarchicalSegmenter(np.random.default_rng([cfg.seed, rank]), mcfg)
        report = model.parameter_report()
        closed = lora_param_count_closed_form(enc_cfg)
        ok = report["lora_bypass"] == closed
        out.append(CheckResult(f"params/lora_rank_{rank}", ok, report["lora_bypass"], closed,
                               details=f"trainable={report['trainable']} total={report['total']}"))
    return out


def run_suite(cfg: RunConfig | None = None, seeds: int = 20) -> list[CheckResult]:
    cfg = cfg or RunConfig()
    results = []
    results += _op_gradient_checks(range(seeds))
    results += _end_to_end_check(range(min(seeds, 20)))
    results += _attention_identity_checks()
    results += _noise_statistics_check()
    results += _schedule_checks(cfg)
    results += _parameter_count_checks(cfg)
    return results
