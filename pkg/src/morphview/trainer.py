"""Optimization loop: warm-up learning rate, per-step item sampling, loss,
decoupled-weight-decay updates, checkpointing, deterministic resume.

Per-step randomness (item draws, timestep, noise) comes from a generator
seeded by (config.seed, step), so a resumed run replays exactly the draws
the straight-through run would have made.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import ConfigurationError, TrainingFault
from .pipeline import MultiViewPipeline
from .synthdata import SyntheticDataset, sample_training_item
from .utils import make_generator


@dataclass
class TrainConfig:
    total_steps: int = 1000
    batch_items: int = 2              # images per step = batch_items * (1 + N)
    lr_warmup_steps: int = 100
    lr_start: float = 1e-6
    lr_peak: float = 5e-5
    lr_aux: float = 5e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    expression_exclusions: tuple[str, ...] = ()
    shuffled: bool = True
    checkpoint_interval: int = 0      # 0: only the final checkpoint

    def __post_init__(self):
        self.expression_exclusions = tuple(self.expression_exclusions)
        if self.total_steps < 0 or self.batch_items < 1:
            raise ConfigurationError("need total_steps >= 0 and batch_items >= 1")
        if self.lr_start > self.lr_peak:
            raise ConfigurationError("lr_start must not exceed lr_peak")
        if self.total_steps > 0 and self.lr_warmup_steps > self.total_steps:
            raise ConfigurationError("warmup must fit inside total_steps")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["expression_exclusions"] = list(self.expression_exclusions)
        return d


def lr_at(step: int, config: TrainConfig) -> tuple[float, float]:
    """Warm up linearly from lr_start to lr_peak, then hold; aux is constant."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    if config.lr_warmup_steps <= 0 or step >= config.lr_warmup_steps:
        main = config.lr_peak
    else:
        frac = step / config.lr_warmup_steps
        main = config.lr_start + (config.lr_peak - config.lr_start) * frac
    return main, config.lr_aux


def param_groups(pipeline: MultiViewPipeline):
    """(denoiser-path params, conditioning-module params), by module prefix."""
    main, aux = [], []
    for name, p in pipeline.named_parameters():
        if name.startswith("predictor."):
            main.append(p)
        elif name.startswith("conditioner."):
            aux.append(p)
        else:
            raise ConfigurationError(f"parameter {name!r} outside known modules")
    return main, aux


def make_optimizer(pipeline: MultiViewPipeline, config: TrainConfig) -> torch.optim.AdamW:
    main, aux = param_groups(pipeline)
    return torch.optim.AdamW(
        [{"params": main, "lr": config.lr_start},
         {"params": aux, "lr": config.lr_aux}],
        weight_decay=config.weight_decay, foreach=False)


def restore_optimizer(optimizer: torch.optim.AdamW, pipeline: MultiViewPipeline,
                      opt_arrays: dict) -> None:
    """Refill AdamW moment buffers saved under opt.<param>.<slot>."""
    by_name = dict(pipeline.named_parameters())
    for key, arr in opt_arrays.items():
        name, slot = key.rsplit(".", 1)
        if name not in by_name:
            continue
        p = by_name[name]
        value = torch.from_numpy(arr)
        if slot == "step":
            optimizer.state[p][slot] = value.to(torch.float32).reshape(())
        else:
            optimizer.state[p][slot] = value.to(p.dtype).reshape(p.shape)


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list
    metrics_path: Path
    items_path: Path
    losses: list = field(default_factory=list)


def train(dataset: SyntheticDataset, pipeline: MultiViewPipeline, config: TrainConfig,
          out_dir, resume_from=None) -> TrainResult:
    """Run the loop; emits metrics.csv, items.csv, and checkpoint archives."""
    if pipeline.config.dataset.to_dict() != dataset.config.to_dict():
        raise ConfigurationError("pipeline was configured for a different dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(pipeline, config)
    start_step = 0
    if resume_from is not None:
        restored, meta, extras = MultiViewPipeline.load_checkpoint(resume_from)
        if meta["config_hash"] != pipeline_config_hash(pipeline):
            raise ConfigurationError("resume checkpoint config does not match pipeline")
        with torch.no_grad():
            own = dict(pipeline.named_parameters())
            for name, p in restored.named_parameters():
                own[name].copy_(p.to(own[name].dtype))
        restore_optimizer(optimizer, pipeline, extras["optimizer"])
        start_step = int(meta["step"])

    metrics_path = out_dir / "metrics.csv"
    items_path = out_dir / "items.csv"
    new_metrics = not metrics_path.exists()
    new_items = not items_path.exists()
    metrics_file = open(metrics_path, "a", newline="")
    items_file = open(items_path, "a", newline="")
    metrics_csv = csv.writer(metrics_file)
    items_csv = csv.writer(items_file)
    if new_metrics:
        metrics_csv.writerow(["step", "loss", "lr_main", "lr_aux", "wall_ms"])
    if new_items:
        items_csv.writerow(["step", "subject", "input_expression",
                            "target_expression", "input_view"])

    all_params = [p for _, p in pipeline.named_parameters()]
    losses = []
    checkpoints = []
    try:
        for step in range(start_step, config.total_steps):
            t0 = time.perf_counter()
            gen = make_generator(config.seed, "step", step)
            items = [sample_training_item(dataset, gen, config.shuffled,
                                          config.expression_exclusions)
                     for _ in range(config.batch_items)]
            for item in items:
                items_csv.writerow([step, item.subject, item.input_expression,
                                    item.target_expression, item.input_view])
            try:
                per_item = [pipeline.loss_for_item(item, gen) for item in items]
            except TrainingFault as fault:
                fault.diagnostics.update({
                    "step": step,
                    "items": [(i.subject, i.input_expression, i.target_expression)
                              for i in items],
                })
                raise
            loss = torch.stack(per_item).mean()
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(all_params, config.grad_clip)
            if not torch.isfinite(grad_norm):
                raise TrainingFault("non-finite gradient norm", {
                    "step": step, "loss": loss.item(),
                    "items": [(i.subject, i.input_expression, i.target_expression)
                              for i in items]})
            lr_main, lr_aux = lr_at(step, config)
            optimizer.param_groups[0]["lr"] = lr_main
            optimizer.param_groups[1]["lr"] = lr_aux
            optimizer.step()
            wall_ms = (time.perf_counter() - t0) * 1000.0
            losses.append(loss.item())
            metrics_csv.writerow([step, repr(loss.item()), repr(lr_main),
                                  repr(lr_aux), f"{wall_ms:.1f}"])
            done = step + 1
            if config.checkpoint_interval and done % config.checkpoint_interval == 0 \
                    and done < config.total_steps:
                path = out_dir / f"checkpoint_{done:06d}.bin"
                pipeline.save_checkpoint(path, done, optimizer)
                checkpoints.append(path)
    finally:
        metrics_file.close()
        items_file.close()

    final = out_dir / "checkpoint_final.bin"
    pipeline.save_checkpoint(final, config.total_steps, optimizer)
    checkpoints.append(final)
    return TrainResult(final_checkpoint=final, checkpoints=checkpoints,
                       metrics_path=metrics_path, items_path=items_path,
                       losses=losses)


def pipeline_config_hash(pipeline: MultiViewPipeline) -> str:
    from .utils import config_hash

    return config_hash(pipeline.config.to_dict())


def gradient_coverage(pipeline: MultiViewPipeline, dataset: SyntheticDataset,
                      config: TrainConfig, step: int = 0) -> dict[str, float]:
    """Max |grad| per parameter on one probe batch; zero entries mean a
    parameter is excluded from gradients."""
    gen = make_generator(config.seed, "probe", step)
    item = sample_training_item(dataset, gen, config.shuffled,
                                config.expression_exclusions)
    loss = pipeline.loss_for_item(item, gen)
    for p in pipeline.parameters():
        p.grad = None
    loss.backward()
    return {name: (0.0 if p.grad is None else p.grad.abs().max().item())
            for name, p in pipeline.named_parameters()}
