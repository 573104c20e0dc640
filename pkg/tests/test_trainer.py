import os

import numpy as np
import pytest

from hiseg.config import config_from_dict, config_hash
from hiseg.data import generate
from hiseg.errors import TrainingError, UsageError
from hiseg.losses import lambda_w
from hiseg.trainer import (
    build_model,
    eval_mean_dice,
    format_record,
    full_metric_report,
    load_model_from_checkpoint,
    parse_record,
    render_metric_table,
    train,
    write_pgm,
)


def tiny_config(**overrides):
    doc = {
        "seed": 7,
        "model": {"image_size": 16, "patch": 8, "depth": 1, "dim": 16, "heads": 2,
                  "lora_rank": 2, "num_classes": 3, "decoder_heads": 2},
        "optim": {"warmup_steps": 4, "base_lr": 1e-3},
        "train": {"epochs": 2, "batch_size": 4, "eval_every": 1,
                  "augment": {"rotation_degrees": [-10.0, 10.0],
                              "scale_range": [0.95, 1.05],
                              "elastic_magnitude": 0.5, "elastic_radius": 4.0}},
    }
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if field:
            doc.setdefault(section, {})[field] = value
        else:
            doc[section] = value
    return config_from_dict(doc)


@pytest.fixture(scope="module")
def tiny_data():
    train_d = generate(seed=50, n=8, height=16, width=16, num_classes=3, tail_ratio=0.6)
    eval_d = generate(seed=51, n=4, height=16, width=16, num_classes=3, tail_ratio=0.6,
                      split="eval")
    return train_d, eval_d


class TestDeterminism:
    def test_two_runs_byte_identical(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config()
        a = train(cfg, train_d, eval_d, tmp_path / "a")
        b = train(cfg, train_d, eval_d, tmp_path / "b")
        log_a = (tmp_path / "a" / "train.log").read_bytes()
        log_b = (tmp_path / "b" / "train.log").read_bytes()
        assert log_a == log_b
        ck_a = (tmp_path / "a" / "checkpoint.hck").read_bytes()
        ck_b = (tmp_path / "b" / "checkpoint.hck").read_bytes()
        assert ck_a == ck_b

    def test_lambda_w_logged_matches_schedule(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config()
        result = train(cfg, train_d, eval_d, tmp_path / "lam")
        for rec in result["records"]:
            assert rec.lambda_w == lambda_w(rec.epoch, cfg.loss)
        assert result["records"][0].lambda_w == 0.8

    def test_resume_replays_bit_identically(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config(**{"train.epochs": 4, "train.checkpoint_every": 2})
        full = train(cfg, train_d, eval_d, tmp_path / "full")
        midrun = tmp_path / "full" / "checkpoint_epoch0002.hck"
        assert midrun.exists()

        resumed = train(cfg, train_d, eval_d, tmp_path / "resumed", resume=str(midrun))
        full_records = [(r.epoch, r.loss, r.eval_dice) for r in full["records"]]
        res_records = [(r.epoch, r.loss, r.eval_dice) for r in resumed["records"]]
        assert res_records == full_records[2:]
        # final checkpoints agree byte for byte
        assert ((tmp_path / "full" / "checkpoint.hck").read_bytes()
                == (tmp_path / "resumed" / "checkpoint.hck").read_bytes())

    def test_config_hash_guard_on_resume(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config(**{"train.checkpoint_every": 1})
        result = train(cfg, train_d, eval_d, tmp_path / "guard")
        other = tiny_config(**{"train.checkpoint_every": 1, "seed": 8})
        with pytest.raises(UsageError):
            train(other, train_d, eval_d, tmp_path / "guard2", resume=result["checkpoint"])


class TestAbort:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_diagnostic(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config(**{"optim.base_lr": 1e80, "optim.warmup_steps": 0,
                             "train.epochs": 5})
        with pytest.raises(TrainingError) as err:
            train(cfg, train_d, eval_d, tmp_path / "diverge")
        msg = str(err.value)
        assert "epoch" in msg and "batch" in msg and ("stage1" in msg or "stage2" in msg)


class TestEvaluation:
    def test_single_stage_baseline_trains_and_evals(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config(ablation={"learnable_mask_attention": False,
                                    "hierarchical_pixel_decoder": False,
                                    "cmattn": False})
        result = train(cfg, train_d, eval_d, tmp_path / "base")
        assert result["records"][-1].loss_stage2 is None
        model = result["model"]
        assert model.stage2 is None
        assert 0.0 <= result["records"][-1].eval_dice <= 1.0

    def test_checkpoint_reload_reproduces_eval(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config()
        result = train(cfg, train_d, eval_d, tmp_path / "reload")
        model, cfg2, meta = load_model_from_checkpoint(result["checkpoint"])
        assert config_hash(cfg2) == config_hash(cfg)
        d1 = eval_mean_dice(result["model"], eval_d)
        d2 = eval_mean_dice(model, eval_d)
        assert d1 == d2

    def test_untrained_model_near_chance_on_balanced_data(self):
        data = generate(seed=60, n=6, height=16, width=16, num_classes=3, tail_ratio=1.0)
        cfg = tiny_config()
        model = build_model(cfg, None)
        dice = eval_mean_dice(model, data)
        assert dice < 0.6  # untrained: far from the trained regime

    def test_metric_report_passthrough_and_render(self, tiny_data, tmp_path):
        train_d, eval_d = tiny_data
        cfg = tiny_config()
        result = train(cfg, train_d, eval_d, tmp_path / "report")
        report, preds = full_metric_report(result["model"], eval_d)
        text = render_metric_table(report, "text")
        csv = render_metric_table(report, "csv")
        assert repr(report.mean_dice) in csv
        assert f"{report.mean_dice:.6f}" in text
        assert preds.shape == (4, 16, 16)

    def test_pgm_dump_format(self, tmp_path):
        labels = np.arange(16).reshape(4, 4) % 3
        path = tmp_path / "m.pgm"
        write_pgm(path, labels, 3)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n4 4\n255\n")
        assert len(raw) == len(b"P5\n4 4\n255\n") + 16


class TestRecordFormat:
    def test_roundtrip(self):
        from hiseg.trainer import EpochRecord

        rec = EpochRecord(epoch=3, lambda_w=0.788, loss_stage1=0.5, loss_stage2=None,
                          loss=0.5, eval_dice=0.9125, lr=2.5e-3)
        parsed = parse_record(format_record(rec))
        assert parsed["epoch"] == 3
        assert parsed["loss_stage2"] is None
        assert parsed["eval_dice"] == 0.9125
