"""Assembly of conditioner + noise predictor + schedule into one trainable
model, with self-contained checkpoint archives (config, morphable model,
camera rig, parameters, optimizer state).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from . import archive
from .condvolume import ConditionerConfig, MorphableConditioner
from .denoiser import DenoiserConfig, NoisePredictor
from .diffusion import (
    NoiseSchedule,
    ddim_sample,
    make_noise_schedule,
    schedule_hash,
    training_loss,
)
from .errors import ConfigurationError
from .geometry import CameraParams
from .morphable import MorphableModel, MorphCoeffs, build_mesh
from .synthdata import DatasetConfig, SyntheticDataset, TrainingItem
from .utils import config_hash


@dataclass
class PipelineConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    conditioner: ConditionerConfig = field(default_factory=ConditionerConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 50

    def __post_init__(self):
        img = self.dataset.image_size
        if self.denoiser.image_size != (img, img):
            raise ConfigurationError("denoiser image size must match the dataset")
        if self.denoiser.num_views != self.dataset.views:
            raise ConfigurationError("denoiser view count must match the rig")
        if self.conditioner.levels != self.denoiser.levels:
            raise ConfigurationError("pyramid level count must match UNet depth")
        if self.conditioner.kv_width != self.denoiser.kv_width:
            raise ConfigurationError("pyramid channels must match attention kv width")
        if (self.conditioner.frustum_height, self.conditioner.frustum_width) != (img, img):
            raise ConfigurationError("frustum base grid must match the image size")

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "conditioner": self.conditioner.to_dict(),
            "denoiser": self.denoiser.to_dict(),
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "ddim_steps": self.ddim_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        den = dict(d["denoiser"])
        den["channels"] = tuple(den["channels"])
        den["image_size"] = tuple(den["image_size"])
        return cls(dataset=DatasetConfig(**d["dataset"]),
                   conditioner=ConditionerConfig(**d["conditioner"]),
                   denoiser=DenoiserConfig(**den),
                   timesteps=d["timesteps"], beta_start=d["beta_start"],
                   beta_end=d["beta_end"], ddim_steps=d["ddim_steps"])


def default_pipeline_config(dataset_cfg: DatasetConfig,
                            channels: tuple[int, ...] = (32, 64, 128),
                            noise_feature_dim: int = 16,
                            kv_width: int = 64,
                            attention_width: int = 64,
                            voxel_size: float = 0.02,
                            volume_grid: int = 32,
                            timesteps: int = 1000) -> PipelineConfig:
    """Derive consistent module dimensions from a dataset configuration.

    The frustum base grid matches the image plane; its depth count keeps the
    48:32 depth-to-width ratio of the reference configuration.
    """
    img = dataset_cfg.image_size
    levels = len(channels)
    cond = ConditionerConfig(
        noise_feature_dim=noise_feature_dim,
        volume_channels=4 * noise_feature_dim,
        volume_grid=volume_grid,
        voxel_size=voxel_size,
        frustum_depth=max(2, int(round(img * 1.5))),
        frustum_height=img,
        frustum_width=img,
        levels=levels,
        kv_width=kv_width,
    )
    den = DenoiserConfig(
        levels=levels,
        channels=channels,
        attention_width=attention_width,
        kv_width=kv_width,
        num_views=dataset_cfg.views,
        image_size=(img, img),
    )
    return PipelineConfig(dataset=dataset_cfg, conditioner=cond, denoiser=den,
                          timesteps=timesteps)


def to_signed(images: Tensor) -> Tensor:
    """[0, 1] image range to the [-1, 1] diffusion range."""
    return images * 2.0 - 1.0


def to_unit(images: Tensor) -> Tensor:
    return ((images + 1.0) / 2.0).clamp(0.0, 1.0)


class MultiViewPipeline(nn.Module):
    """Trainable bundle: morphable conditioning stack plus noise predictor."""

    def __init__(self, config: PipelineConfig, model: MorphableModel,
                 cameras: list[CameraParams]):
        super().__init__()
        if len(cameras) != config.dataset.views:
            raise ConfigurationError("camera rig size must match the config")
        self.config = config
        self.model = model
        self.cameras = cameras
        self.conditioner = MorphableConditioner(config.conditioner)
        self.predictor = NoisePredictor(config.denoiser)
        self.schedule = make_noise_schedule(config.timesteps, config.beta_start,
                                            config.beta_end)

    @classmethod
    def from_dataset(cls, dataset: SyntheticDataset,
                     config: PipelineConfig | None = None,
                     init_seed: int = 0) -> "MultiViewPipeline":
        cfg = config or default_pipeline_config(dataset.config)
        if cfg.dataset.to_dict() != dataset.config.to_dict():
            raise ConfigurationError("pipeline dataset config must match the dataset")
        torch.manual_seed(init_seed)
        return cls(cfg, dataset.model, dataset.cameras)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.predictor.parameters()).dtype

    def rig_hash(self) -> str:
        return config_hash([c.to_json_dict() for c in self.cameras])

    def pyramid_builder(self, vertices: Tensor):
        verts = vertices.to(torch.float64)

        def build(x_t: Tensor):
            _, pyramids = self.conditioner(x_t, self.cameras, verts)
            return pyramids

        return build

    def mesh_for(self, coeffs: MorphCoeffs) -> Tensor:
        return build_mesh(self.model, coeffs)

    def loss_for_item(self, item: TrainingItem, generator: torch.Generator) -> Tensor:
        x0 = to_signed(item.target_images).to(self.dtype)
        emb = self.predictor.encode_input_image(to_signed(item.input_image).to(self.dtype))
        builder = self.pyramid_builder(item.target_mesh)
        return training_loss(x0, emb, builder, self.predictor.predict_noise,
                             self.schedule, generator)

    def sample(self, input_image: Tensor, target_mesh: Tensor,
               steps: int | None = None, generator: torch.Generator | None = None,
               eta: float = 0.0) -> Tensor:
        """Generate the N rig views conditioned on one input image and a mesh.

        input_image is (h, w, 3) in [0, 1]; the result is (N, h, w, 3) in [0, 1].
        """
        cfg = self.config
        steps = cfg.ddim_steps if steps is None else steps
        h, w = cfg.denoiser.image_size
        shape = (cfg.dataset.views, h, w, 3)
        with torch.no_grad():
            emb = self.predictor.encode_input_image(to_signed(input_image).to(self.dtype))
            builder = self.pyramid_builder(target_mesh)
            state = ddim_sample(self.predictor.predict_noise, emb, builder,
                                self.schedule, shape, steps=steps,
                                generator=generator, eta=eta, dtype=self.dtype)
        return to_unit(state.images)

    # -- checkpointing --------------------------------------------------

    def save_checkpoint(self, path, step: int, optimizer: torch.optim.Optimizer | None = None,
                        extra_meta: dict | None = None) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.named_parameters():
            arrays[f"param.{name}"] = p.detach().cpu().numpy()
        if optimizer is not None:
            names = [n for n, _ in self.named_parameters()]
            params = [p for _, p in self.named_parameters()]
            state = optimizer.state
            for name, p in zip(names, params):
                st = state.get(p, {})
                for key, value in st.items():
                    if isinstance(value, torch.Tensor):
                        arrays[f"opt.{name}.{key}"] = value.detach().cpu().numpy().astype(np.float64)
        arrays["morphable.template"] = self.model.template.numpy().astype(np.float32)
        arrays["morphable.identity_basis"] = self.model.identity_basis.numpy().astype(np.float32)
        arrays["morphable.expression_basis"] = self.model.expression_basis.numpy().astype(np.float32)
        arrays["morphable.faces"] = self.model.faces.numpy().astype(np.int64)
        arrays["morphable.keypoint_indices"] = self.model.keypoint_indices.numpy().astype(np.int64)
        if self.model.vertex_color_basis is not None:
            arrays["morphable.vertex_color_basis"] = \
                self.model.vertex_color_basis.numpy().astype(np.float32)
        meta = {
            "kind": "checkpoint",
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config.to_dict()),
            "step": step,
            "schedule_hash": schedule_hash(self.schedule),
            "rig_hash": self.rig_hash(),
            "rig": [c.to_json_dict() for c in self.cameras],
            "eye_corner_slots": list(self.model.eye_corner_slots),
            "dtype": str(self.dtype).replace("torch.", ""),
        }
        meta.update(extra_meta or {})
        archive.write_archive(path, meta, arrays)

    @staticmethod
    def load_checkpoint(path, strict: bool = True):
        """Rebuild a pipeline from a checkpoint archive.

        Returns (pipeline, meta, extras) where extras holds optimizer arrays
        and the missing/extra parameter names found by name matching.
        """
        meta, arrays = archive.read_archive(path)
        if meta.get("kind") != "checkpoint":
            raise ConfigurationError(f"{path}: not a checkpoint archive")
        config = PipelineConfig.from_dict(meta["config"])
        model = MorphableModel(
            template=arrays["morphable.template"],
            identity_basis=arrays["morphable.identity_basis"],
            expression_basis=arrays["morphable.expression_basis"],
            faces=arrays["morphable.faces"],
            keypoint_indices=arrays["morphable.keypoint_indices"],
            eye_corner_slots=tuple(meta["eye_corner_slots"]),
            vertex_color_basis=arrays.get("morphable.vertex_color_basis"),
        )
        cameras = [CameraParams.from_json_dict(d) for d in meta["rig"]]
        pipeline = MultiViewPipeline(config, model, cameras)
        if meta.get("dtype") == "float64":
            pipeline.double()
        param_arrays = {n[len("param."):]: a for n, a in arrays.items()
                        if n.startswith("param.")}
        own = dict(pipeline.named_parameters())
        missing = sorted(set(own) - set(param_arrays))
        extra = sorted(set(param_arrays) - set(own))
        if strict and (missing or extra):
            raise ConfigurationError(
                f"checkpoint parameter mismatch: missing={missing}, extra={extra}")
        with torch.no_grad():
            for name, p in own.items():
                if name in param_arrays:
                    p.copy_(torch.from_numpy(param_arrays[name]).to(p.dtype))
        extras = {
            "optimizer": {n[len("opt."):]: a for n, a in arrays.items()
                          if n.startswith("opt.")},
            "missing": missing,
            "extra": extra,
        }
        return pipeline, meta, extras
