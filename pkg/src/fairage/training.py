"""Two-phase training loop.

Each step runs the aging transform twice: forward (source age to a sampled
target age) and cycle (the synthesized image back to the source age, scored
against the original input). Both losses are backpropagated before any
parameter moves; in the default ``dual`` mode the forward-phase gradients
are then applied by the slow forward-preset optimizer and the cycle-phase
gradients by the faster reconstruction-preset optimizer, one after the
other. ``single`` mode accumulates both phases and takes one step with the
forward-preset optimizer.

Per-step randomness (target ages, epoch shuffles) is derived from the run
seed and the step/epoch counter, so a resumed run replays exactly the
randomness of an uninterrupted one.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from . import __version__
from .core import (Config, ConfigError, FairageError, derive_seed,
                   sample_target_age, seeded_generator, validate_age)
from .losses import CompositeLoss, LossBreakdown
from .synthesis import FaceAgingModel
from .weights import load_arrays, save_arrays

_OPT_PHASES = ("forward", "cycle")


class NonFiniteLossError(FairageError):
    """A loss went non-finite; carries both phase breakdowns for diagnosis."""

    def __init__(self, forward_values: dict, cycle_values: dict = None):
        self.forward_values = forward_values
        self.cycle_values = cycle_values
        super().__init__(f"non-finite loss: forward={forward_values} cycle={cycle_values}")


@dataclass
class TrainState:
    """Everything a resumable run needs."""

    model: FaceAgingModel
    composite: CompositeLoss
    config: Config
    optimizers: dict
    step: int = 0

    @property
    def seed(self) -> int:
        return self.config.seed


def _adam(params, preset):
    return torch.optim.Adam(params, lr=preset.learning_rate,
                            betas=(preset.beta1, preset.beta2),
                            weight_decay=preset.weight_decay, foreach=True)


def build_train_state(model: FaceAgingModel, composite: CompositeLoss,
                      config: Config) -> TrainState:
    params = [p for _, p in model.trainable_named_parameters()]
    if not params:
        raise ConfigError("model has no trainable parameters")
    if config.optimizer_mode == "dual":
        optimizers = {"forward": _adam(params, config.forward_optimizer),
                      "cycle": _adam(params, config.reconstruction_optimizer)}
    else:
        # one step after both backward passes; it closes the reconstruction
        # phase, so it uses the reconstruction preset
        optimizers = {"single": _adam(params, config.reconstruction_optimizer)}
    return TrainState(model=model, composite=composite, config=config, optimizers=optimizers)


def _sample_targets(config: Config, step: int, count: int):
    g = seeded_generator(derive_seed(config.seed, "target-age", step))
    if config.age_resample == "per-batch":
        return [sample_target_age(g, config.age_low, config.age_high)] * count
    return [sample_target_age(g, config.age_low, config.age_high) for _ in range(count)]


def train_step(state: TrainState, images: torch.Tensor, source_ages) -> tuple:
    """One two-phase update; returns the (forward, cycle) loss breakdowns."""
    model, composite, config = state.model, state.composite, state.config
    if images.dim() != 4:
        images = images.unsqueeze(0)
    source_ages = [validate_age(a) for a in source_ages]
    if len(source_ages) != images.shape[0]:
        raise ConfigError(f"{len(source_ages)} ages for a batch of {images.shape[0]}")
    targets = _sample_targets(config, state.step, images.shape[0])

    x_prime, codes = model.transform(images, source_ages, targets)
    fwd = composite(images, x_prime, codes)
    if not fwd.is_finite():
        raise NonFiniteLossError(fwd.as_floats())
    x_rec, codes_rec = model.transform(x_prime, targets, source_ages)
    cyc = composite(x_rec, images, codes_rec)
    if not cyc.is_finite():
        raise NonFiniteLossError(fwd.as_floats(), cyc.as_floats())

    params = [p for _, p in model.trainable_named_parameters()]
    for p in params:
        p.grad = None

    def _grads(total, retain):
        if not total.requires_grad:
            return None
        return torch.autograd.grad(total, params, retain_graph=retain, allow_unused=True)

    if config.optimizer_mode == "dual":
        grads_fwd = _grads(fwd.total, retain=True)
        grads_cyc = _grads(cyc.total, retain=False)
        for phase, grads in (("forward", grads_fwd), ("cycle", grads_cyc)):
            if grads is None:
                continue
            for p, g in zip(params, grads):
                p.grad = g
            state.optimizers[phase].step()
            for p in params:
                p.grad = None
    else:
        grads_fwd = _grads(fwd.total, retain=True)
        grads_cyc = _grads(cyc.total, retain=False)
        if grads_fwd is not None or grads_cyc is not None:
            for i, p in enumerate(params):
                pieces = [g[i] for g in (grads_fwd, grads_cyc)
                          if g is not None and g[i] is not None]
                p.grad = sum(pieces) if pieces else None
            state.optimizers["single"].step()
            for p in params:
                p.grad = None

    state.step += 1
    return _detached(fwd), _detached(cyc)


def _detached(breakdown: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(**{k: v.detach() if isinstance(v, torch.Tensor) else torch.tensor(v)
                            for k, v in breakdown.__dict__.items()})


def _materialize(source) -> torch.Tensor:
    if isinstance(source, torch.Tensor):
        return source
    from .datakit import load_image_normalized
    return load_image_normalized(source)


def run_training(state: TrainState, dataset, steps: int, out_dir=None,
                 log_path=None, checkpoint_every: int = None) -> list:
    """Iterate ``train_step`` over seeded shuffled batches.

    ``dataset`` is a sequence of ``(image-or-path, age)`` samples. Returns
    the log records (one dict per executed step) and, when paths are given,
    writes the line-delimited log and periodic checkpoints.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty; nothing to train on")
    for source, age in dataset:
        validate_age(age)
        if not isinstance(source, torch.Tensor) and not Path(source).exists():
            raise ConfigError(f"dataset image not found: {source}")
    config = state.config
    if checkpoint_every is None:
        checkpoint_every = config.checkpoint_every
    batch = config.batch_size
    per_epoch = math.ceil(len(dataset) / batch)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        epoch_order, epoch_of_order = None, -1
        for global_step in range(state.step, steps):
            epoch, slot = divmod(global_step, per_epoch)
            if epoch != epoch_of_order:
                g = seeded_generator(derive_seed(config.seed, "shuffle", epoch))
                epoch_order = torch.randperm(len(dataset), generator=g).tolist()
                epoch_of_order = epoch
            picked = epoch_order[slot * batch:(slot + 1) * batch]
            images = torch.stack([_materialize(dataset[i][0]) for i in picked])
            ages = [dataset[i][1] for i in picked]
            fwd, cyc = train_step(state, images, ages)
            record = {"step": state.step, "forward": fwd.as_floats(), "cycle": cyc.as_floats()}
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if out_dir is not None and checkpoint_every > 0 and state.step % checkpoint_every == 0:
                save_checkpoint(state, out_dir / f"checkpoint_step{state.step}.weights")
    finally:
        if log_fh is not None:
            log_fh.close()
    return records


def save_checkpoint(state: TrainState, path) -> None:
    """Weight container with model parameters and optimizer state, plus a
    JSON manifest carrying step, seed, and config hash."""
    path = Path(path)
    arrays = {}
    for name, tensor in state.model.state_dict().items():
        arrays[f"model/{name}"] = tensor
    trainable = state.model.trainable_named_parameters()
    for phase, optimizer in state.optimizers.items():
        for (name, param) in trainable:
            opt_state = optimizer.state.get(param)
            if not opt_state:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                value = opt_state[key]
                if not isinstance(value, torch.Tensor):
                    value = torch.tensor(float(value))
                arrays[f"opt/{phase}/{name}/{key}"] = value.reshape(-1)
    save_arrays(path, arrays)
    manifest = {"step": state.step, "seed": state.config.seed,
                "config_hash": state.config.config_hash(),
                "optimizer_mode": state.config.optimizer_mode,
                "version": __version__}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_model_weights(path, model: FaceAgingModel) -> int:
    """Restore only the model parameters from a checkpoint; returns its step."""
    path = Path(path)
    arrays = load_arrays(path)
    state_dict = model.state_dict()
    loaded = {}
    for key, tensor in state_dict.items():
        entry = arrays.get(f"model/{key}")
        if entry is None:
            raise ConfigError(f"{path}: checkpoint misses model entry {key!r}")
        if tuple(entry.shape) != tuple(tensor.shape):
            raise ConfigError(f"{path}: model entry {key!r} has shape {entry.shape}, "
                              f"expected {tuple(tensor.shape)}")
        loaded[key] = torch.from_numpy(entry).to(tensor.dtype)
    model.load_state_dict(loaded)
    manifest_path = path.with_suffix(".json")
    if manifest_path.exists():
        return int(json.loads(manifest_path.read_text())["step"])
    return 0


def load_checkpoint(path, model: FaceAgingModel, composite: CompositeLoss,
                    config: Config) -> TrainState:
    """Rebuild a full train state (parameters + optimizer moments) from disk."""
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not manifest_path.exists():
        raise ConfigError(f"checkpoint manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("config_hash") != config.config_hash():
        raise ConfigError("checkpoint was written under a different config "
                          f"(hash {manifest.get('config_hash')} vs {config.config_hash()})")
    step = load_model_weights(path, model)
    state = build_train_state(model, composite, config)
    state.step = step
    arrays = load_arrays(path)
    for phase, optimizer in state.optimizers.items():
        for name, param in model.trainable_named_parameters():
            prefix = f"opt/{phase}/{name}/"
            if f"{prefix}step" not in arrays:
                continue
            optimizer.state[param] = {
                "step": torch.tensor(float(arrays[f"{prefix}step"][0])),
                "exp_avg": torch.from_numpy(arrays[f"{prefix}exp_avg"]).view_as(param),
                "exp_avg_sq": torch.from_numpy(arrays[f"{prefix}exp_avg_sq"]).view_as(param),
            }
    return state
