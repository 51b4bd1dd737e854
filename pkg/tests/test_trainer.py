"""Pipeline assembly, checkpointing, the training loop, and resume semantics."""

import csv

import numpy as np
import pytest
import torch

from morphview.errors import ConfigurationError, TrainingFault
from morphview.pipeline import (
    MultiViewPipeline,
    PipelineConfig,
    default_pipeline_config,
)
from morphview.synthdata import DatasetConfig, build_dataset
from morphview.trainer import (
    TrainConfig,
    gradient_coverage,
    lr_at,
    make_optimizer,
    param_groups,
    train,
)
from morphview.utils import make_generator, single_thread_mode


def tiny_dataset_config(**overrides):
    base = dict(subjects=3, expressions=3, views=2, image_size=16,
                test_subjects=1, seed=21)
    base.update(overrides)
    return DatasetConfig(**base)


def tiny_pipeline_config(ds_cfg):
    return default_pipeline_config(
        ds_cfg, channels=(8, 12), noise_feature_dim=4, kv_width=8,
        attention_width=8, voxel_size=0.05, volume_grid=8, timesteps=25)


@pytest.fixture(scope="module")
def tiny_dataset():
    return build_dataset(tiny_dataset_config())


@pytest.fixture()
def tiny_pipeline(tiny_dataset):
    cfg = tiny_pipeline_config(tiny_dataset.config)
    return MultiViewPipeline.from_dataset(tiny_dataset, cfg, init_seed=1)


class TestLrSchedule:
    def test_paper_defaults_at_step_zero(self):
        cfg = TrainConfig(total_steps=200)
        assert lr_at(0, cfg) == (1e-6, 5e-4)

    def test_peak_reached_at_warmup_end(self):
        cfg = TrainConfig(total_steps=200, lr_warmup_steps=100)
        assert lr_at(100, cfg) == (5e-5, 5e-4)
        assert lr_at(150, cfg) == (5e-5, 5e-4)

    def test_linear_midpoint(self):
        cfg = TrainConfig(total_steps=200, lr_warmup_steps=100)
        main, _ = lr_at(50, cfg)
        assert main == pytest.approx((1e-6 + 5e-5) / 2)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=10, lr_warmup_steps=20)
        with pytest.raises(ConfigurationError):
            TrainConfig(lr_start=1e-3, lr_peak=1e-5)
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_items=0)


class TestPipelineAssembly:
    def test_config_consistency_enforced(self, tiny_dataset):
        cfg = tiny_pipeline_config(tiny_dataset.config)
        bad = PipelineConfig.from_dict(cfg.to_dict())
        bad.denoiser.num_views = 5
        with pytest.raises(ConfigurationError):
            PipelineConfig(dataset=bad.dataset, conditioner=bad.conditioner,
                           denoiser=bad.denoiser)

    def test_loss_runs_and_is_finite(self, tiny_dataset, tiny_pipeline):
        item = tiny_dataset.item(0, "neutral", 0, "mouth_open")
        loss = tiny_pipeline.loss_for_item(item, make_generator(0))
        assert torch.isfinite(loss)
        # zero-init head predicts zero noise: loss should sit near E[eps^2] = 1
        assert 0.5 < loss.item() < 1.5

    def test_sample_shape_and_range(self, tiny_dataset, tiny_pipeline):
        item = tiny_dataset.item(0, "neutral", 0, "neutral")
        out = tiny_pipeline.sample(item.input_image, item.target_mesh, steps=3,
                                   generator=make_generator(1))
        assert tuple(out.shape) == (2, 16, 16, 3)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_checkpoint_round_trip(self, tiny_dataset, tiny_pipeline, tmp_path):
        path = tmp_path / "ck.bin"
        opt = make_optimizer(tiny_pipeline, TrainConfig(total_steps=10,
                                                        lr_warmup_steps=5))
        tiny_pipeline.save_checkpoint(path, step=7, optimizer=opt)
        back, meta, extras = MultiViewPipeline.load_checkpoint(path)
        assert meta["step"] == 7
        assert extras["missing"] == [] and extras["extra"] == []
        for (na, pa), (nb, pb) in zip(tiny_pipeline.named_parameters(),
                                      back.named_parameters()):
            assert na == nb
            assert torch.allclose(pa, pb.to(pa.dtype), atol=1e-7)
        assert meta["rig_hash"] == tiny_pipeline.rig_hash()

    def test_checkpoint_name_matching_reports(self, tiny_dataset, tiny_pipeline,
                                              tmp_path):
        from morphview import archive

        path = tmp_path / "ck.bin"
        tiny_pipeline.save_checkpoint(path, step=0)
        meta, arrays = archive.read_archive(path)
        victim = next(n for n in arrays if n.startswith("param.predictor.stem"))
        renamed = dict(arrays)
        renamed["param.predictor.bogus"] = renamed.pop(victim)
        archive.write_archive(path, meta, renamed)
        with pytest.raises(ConfigurationError, match="missing.*stem"):
            MultiViewPipeline.load_checkpoint(path)
        back, meta2, extras = MultiViewPipeline.load_checkpoint(path, strict=False)
        assert any("stem" in m for m in extras["missing"])
        assert any("bogus" in e for e in extras["extra"])


class TestParamGroups:
    def test_partition_covers_everything_once(self, tiny_pipeline):
        main, aux = param_groups(tiny_pipeline)
        total = sum(p.numel() for p in main) + sum(p.numel() for p in aux)
        assert total == sum(p.numel() for p in tiny_pipeline.parameters())
        assert len(main) > 0 and len(aux) > 0


class TestTrainLoop:
    def run(self, dataset, steps, tmp_path, seed=2, tag="run", dtype=None,
            resume_from=None, pipeline=None, **cfg_overrides):
        if pipeline is None:
            cfg = tiny_pipeline_config(dataset.config)
            pipeline = MultiViewPipeline.from_dataset(dataset, cfg, init_seed=3)
            if dtype == torch.float64:
                pipeline.double()
        base = dict(total_steps=steps, batch_items=1, lr_warmup_steps=min(5, steps),
                    lr_peak=1e-3, lr_start=1e-4, lr_aux=1e-3, seed=seed,
                    shuffled=True)
        base.update(cfg_overrides)
        config = TrainConfig(**base)
        result = train(dataset, pipeline, config, tmp_path / tag,
                       resume_from=resume_from)
        return pipeline, result

    def test_zero_steps_initial_checkpoint_only(self, tiny_dataset, tmp_path):
        _, result = self.run(tiny_dataset, 0, tmp_path, lr_warmup_steps=0)
        assert result.losses == []
        assert result.final_checkpoint.exists()
        with open(result.metrics_path) as f:
            rows = list(csv.reader(f))
        assert rows == [["step", "loss", "lr_main", "lr_aux", "wall_ms"]]

    def test_frozen_weights_fixed_seed_replay_bitwise(self, tiny_dataset, tmp_path):
        with single_thread_mode():
            _, r1 = self.run(tiny_dataset, 4, tmp_path, tag="f1", dtype=torch.float64,
                             lr_peak=0.0, lr_start=0.0, lr_aux=0.0,
                             weight_decay=0.0, lr_warmup_steps=0)
            _, r2 = self.run(tiny_dataset, 4, tmp_path, tag="f2", dtype=torch.float64,
                             lr_peak=0.0, lr_start=0.0, lr_aux=0.0,
                             weight_decay=0.0, lr_warmup_steps=0)
        assert r1.losses == r2.losses

    def test_loss_decreases_on_micro_run(self, tiny_dataset, tmp_path):
        _, result = self.run(tiny_dataset, 30, tmp_path, tag="conv")
        first = np.mean(result.losses[:5])
        last = np.mean(result.losses[-5:])
        assert last < first

    def test_deterministic_resume_bitwise(self, tiny_dataset, tmp_path):
        with single_thread_mode():
            full, r_full = self.run(tiny_dataset, 8, tmp_path, tag="full",
                                    dtype=torch.float64,
                                    checkpoint_interval=4, lr_warmup_steps=2)
            ck4 = next(p for p in r_full.checkpoints if "000004" in str(p))

            cfg = tiny_pipeline_config(tiny_dataset.config)
            half = MultiViewPipeline.from_dataset(tiny_dataset, cfg, init_seed=99)
            half.double()
            half, r_resumed = self.run(tiny_dataset, 8, tmp_path, tag="resumed",
                                       pipeline=half, resume_from=ck4,
                                       checkpoint_interval=4, lr_warmup_steps=2)
        assert r_resumed.losses == r_full.losses[4:]
        for (na, pa), (nb, pb) in zip(full.named_parameters(),
                                      half.named_parameters()):
            assert na == nb
            assert torch.equal(pa, pb), na

    def test_excluded_expression_never_sampled(self, tiny_dataset, tmp_path):
        _, result = self.run(tiny_dataset, 6, tmp_path, tag="excl",
                             expression_exclusions=("pucker",))
        with open(result.items_path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 6
        for row in rows:
            assert row["input_expression"] != "pucker"
            assert row["target_expression"] != "pucker"

    def test_non_finite_loss_aborts_with_diagnostics(self, tiny_dataset, tmp_path):
        cfg = tiny_pipeline_config(tiny_dataset.config)
        pipeline = MultiViewPipeline.from_dataset(tiny_dataset, cfg, init_seed=3)
        with torch.no_grad():
            pipeline.predictor.stem.weight.fill_(float("nan"))
        config = TrainConfig(total_steps=2, batch_items=1, lr_warmup_steps=0, seed=0)
        with pytest.raises(TrainingFault) as exc:
            train(tiny_dataset, pipeline, config, tmp_path / "nan")
        assert "step" in exc.value.diagnostics
        assert "items" in exc.value.diagnostics

    def test_every_parameter_receives_gradient(self, tiny_dataset, tmp_path):
        # one real optimizer step first so the zero-init head is off zero,
        # then probe: nothing may be excluded from gradients
        pipeline, _ = self.run(tiny_dataset, 1, tmp_path, tag="cov",
                               lr_warmup_steps=0)
        cov = gradient_coverage(pipeline, tiny_dataset,
                                TrainConfig(total_steps=1, lr_warmup_steps=0, seed=5))
        dead = [name for name, g in cov.items() if g == 0.0]
        assert dead == []
