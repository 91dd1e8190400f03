"""Alternating multi-scale training with Adam and step learning-rate decay."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .image import DatasetManifest, PatchPair, sample_patch
from .metrics import mae_loss
from .network import ConfigError, NetworkConfig, ParameterStore, forward, init_params
from .tensor import GradientTape, Tensor, backward, parameter

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    patch_size: int = 48
    lr: float = 1e-4
    decay_factor: float = 2.0
    decay_interval: int | None = None  # defaults to |S| * 2e5
    iterations: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 1
    on_the_fly: bool = False

    def __post_init__(self) -> None:
        for name in ("batch_size", "patch_size", "iterations", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must exceed 1, got {self.decay_factor}")
        if self.decay_interval is not None and self.decay_interval < 1:
            raise ConfigError("decay_interval must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def interval(self, n_scales: int) -> int:
        return self.decay_interval if self.decay_interval is not None else n_scales * 200_000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    """First/second moments and an update counter per parameter.

    Counters are per parameter because alternating training updates each
    head only on the iterations that sampled its scale.
    """

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


def adam_update(params: ParameterStore, adam: AdamState, grads: dict[str, np.ndarray], lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Replace each parameter that has a gradient with its Adam-updated value."""
    for name, g in grads.items():
        p = params[name]
        dt = p.dtype
        g = g.astype(dt, copy=False)
        if name not in adam.m:
            adam.m[name] = np.zeros_like(p.data)
            adam.v[name] = np.zeros_like(p.data)
            adam.steps[name] = 0
        t = adam.steps[name] + 1
        m = dt.type(beta1) * adam.m[name] + dt.type(1 - beta1) * g
        v = dt.type(beta2) * adam.v[name] + dt.type(1 - beta2) * g * g
        m_hat = m / dt.type(1 - beta1 ** t)
        v_hat = v / dt.type(1 - beta2 ** t)
        new = p.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(eps))
        adam.m[name], adam.v[name], adam.steps[name] = m, v, t
        params[name] = parameter(new.astype(dt, copy=False), name)


def sample_scale(rng: np.random.Generator, scales) -> int:
    scales = tuple(scales)
    if not scales:
        raise ValueError("scale set is empty")
    return scales[int(rng.integers(len(scales)))]


def lr_schedule(it: int, lr0: float, interval: int, factor: float = 2.0) -> float:
    return lr0 / factor ** (it // interval)


def batch_tensors(batch: list[PatchPair], dtype=np.float32) -> tuple[Tensor, Tensor]:
    scales = {p.scale for p in batch}
    if len(scales) != 1:
        raise ValueError(f"batch mixes scales {sorted(scales)}")
    lr = np.stack([p.lr.transpose(2, 0, 1) for p in batch]).astype(dtype)
    hr = np.stack([p.hr.transpose(2, 0, 1) for p in batch]).astype(dtype)
    return Tensor.wrap(lr), Tensor.wrap(hr)


def train_step(params: ParameterStore, adam: AdamState, batch: list[PatchPair], lr: float,
               config: NetworkConfig, tcfg: TrainConfig | None = None) -> float:
    """One MAE/Adam step through the head of the batch's scale; returns the loss."""
    tcfg = tcfg or TrainConfig()
    x, y = batch_tensors(batch, dtype=next(iter(params.values())).dtype)
    s = batch[0].scale
    with GradientTape() as tape:
        loss = mae_loss(forward(x, s, params, config), y)
    value = float(loss.data.reshape(()))
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss became {value} at scale x{s}")
    grads = backward(tape, loss)
    adam_update(params, adam, grads, lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    return value


# --------------------------------------------------------------------------
# loop, persistence


def adam_to_arrays(adam: AdamState) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    arrays = {}
    for name in adam.m:
        arrays[f"adam.m.{name}"] = adam.m[name]
        arrays[f"adam.v.{name}"] = adam.v[name]
    return arrays, dict(adam.steps)


def adam_from_arrays(arrays: dict[str, np.ndarray], steps: dict[str, int]) -> AdamState:
    adam = AdamState()
    for name, count in steps.items():
        adam.m[name] = arrays[f"adam.m.{name}"].copy()
        adam.v[name] = arrays[f"adam.v.{name}"].copy()
        adam.steps[name] = int(count)
    return adam


def write_training_checkpoint(path, config, tcfg, params, adam, it, rng) -> None:
    arrays, steps = adam_to_arrays(adam)
    state = {"iteration": it, "adam_steps": steps, "rng": rng.bit_generator.state,
             "train_config": tcfg.to_dict()}
    save_checkpoint(path, config, params, arrays, state)


@dataclass
class TrainResult:
    params: ParameterStore
    adam: AdamState
    records: list[dict]
    checkpoints: list[Path]


def train_loop(manifest: DatasetManifest, config: NetworkConfig, tcfg: TrainConfig,
               out_dir=None, resume=None, deterministic: bool = True,
               on_step: Callable[[int, int, float], None] | None = None) -> TrainResult:
    """Run ``tcfg.iterations`` alternating-scale steps.

    With ``out_dir`` set, writes ``train_log.jsonl``, periodic checkpoints and
    ``final.ckpt``. ``resume`` is a checkpoint written by this loop; the run
    continues from its iteration with its optimizer and RNG state.
    """
    missing = set(config.scales) - set(manifest.scales)
    if missing:
        raise ConfigError(f"dataset has no LR images for scales {sorted(missing)}")
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(config, tcfg.seed)
    adam = AdamState()
    start = 0
    if resume is not None:
        cfg2, params, extra, state = load_checkpoint(resume)
        if cfg2.to_dict() != config.to_dict():
            raise ConfigError(f"{resume}: network config differs from the requested one")
        if not state:
            raise ConfigError(f"{resume}: checkpoint carries no training state")
        adam = adam_from_arrays(extra, state["adam_steps"])
        rng.bit_generator.state = state["rng"]
        start = int(state["iteration"])

    interval = tcfg.interval(len(config.scales))
    out = Path(out_dir) if out_dir is not None else None
    logfh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logfh = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    records, checkpoints = [], []
    try:
        for it in range(start, tcfg.iterations):
            t0 = time.perf_counter()
            s = sample_scale(rng, config.scales)
            batch = [sample_patch(manifest, rng, s, tcfg.patch_size) for _ in range(tcfg.batch_size)]
            lr = lr_schedule(it, tcfg.lr, interval, tcfg.decay_factor)
            loss = train_step(params, adam, batch, lr, config, tcfg)
            wall = 0 if deterministic else int(round((time.perf_counter() - t0) * 1000))
            rec = {"iter": it + 1, "scale": s, "loss": loss, "lr": lr, "wall_ms": wall}
            records.append(rec)
            if on_step is not None:
                on_step(it + 1, s, loss)
            if logfh is not None and ((it + 1) % tcfg.log_every == 0 or it + 1 == tcfg.iterations):
                logfh.write(json.dumps(rec) + "\n")
            done = it + 1
            boundary = done % interval == 0
            if out is not None and done < tcfg.iterations and (done % tcfg.checkpoint_every == 0 or boundary):
                path = out / f"ckpt_{done:07d}.ckpt"
                write_training_checkpoint(path, config, tcfg, params, adam, done, rng)
                checkpoints.append(path)
                log.info("iter %d: wrote %s", done, path)
    finally:
        if logfh is not None:
            logfh.close()
    if out is not None:
        path = out / "final.ckpt"
        write_training_checkpoint(path, config, tcfg, params, adam, tcfg.iterations, rng)
        checkpoints.append(path)
    return TrainResult(params, adam, records, checkpoints)
