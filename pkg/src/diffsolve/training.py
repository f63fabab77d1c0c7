"""Supervised denoising training.

Each step draws a timestep per instance, corrupts the label through the
matching forward process, evaluates the denoiser on the noisy variables, and
applies one adaptive-moment update under a cosine-decayed learning rate.
The discrete branch minimizes per-variable cross-entropy against the clean
bits; the continuous branch regresses the injected Gaussian noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from math import ceil, cos, pi
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import checkpoint as ckpt
from .denoiser import (DenoiserParams, apply_bn_update, backward,
                       batch_graphs, bn_batch_stats, forward, init_params,
                       zeros_like_params)
from .diffusion import (NoiseSchedule, continuous_forward_sample,
                        discrete_forward_sample, make_noise_schedule)
from .instances import (MisInstance, SparseGraph, TspInstance, dense_graph,
                        load_instances, mis_graph, sparsify)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# losses


def loss_discrete(logits: np.ndarray, x0: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy between softmax(logits) and the one-hot clean bits.

    Returns (loss, d loss / d logits).
    """
    logits = np.asarray(logits, dtype=float)
    x0 = np.asarray(x0, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != x0.shape[0]:
        raise ValueError(f"logit shape {logits.shape} does not match "
                         f"{x0.shape[0]} target bits")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted[np.arange(n), x0] - logz
    probs = np.exp(shifted - logz[:, None])
    grad = probs.copy()
    grad[np.arange(n), x0] -= 1.0
    return float(-logp.mean()), grad / n


def loss_continuous(pred_eps: np.ndarray, eps: np.ndarray
                    ) -> tuple[float, np.ndarray]:
    """Mean squared error against the injected noise; returns (loss, grad)."""
    pred = np.asarray(pred_eps, dtype=float).reshape(-1)
    eps = np.asarray(eps, dtype=float).reshape(-1)
    if pred.shape != eps.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {eps.shape}")
    diff = pred - eps
    return float((diff * diff).mean()), 2.0 * diff / diff.shape[0]


# ---------------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, total_steps: int, peak: float) -> float:
    """Cosine decay from ``peak`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return peak
    frac = min(max(step / total_steps, 0.0), 1.0)
    return peak * cos(0.5 * pi * frac) ** 2


def adam_step(tensors: dict, grads: dict, m: dict, v: dict, step: int,
              lr: float, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """One bias-corrected adaptive-moment update, in place. ``step`` counts
    updates already applied (so the first call passes 0)."""
    t = step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for key, g in grads.items():
        m[key] = beta1 * m[key] + (1.0 - beta1) * g
        v[key] = beta2 * v[key] + (1.0 - beta2) * (g * g)
        tensors[key] -= lr * (m[key] / c1) / (np.sqrt(v[key] / c2) + eps)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    task: str = "tsp"
    branch: str = "discrete"
    T: int = 1000
    beta1: float = 1e-4
    betaT: float = 0.02
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 2e-4
    seed: int = 0
    train_path: str = ""
    out_dir: str = "runs"
    checkpoint_every: int = 0  # steps; 0 = final checkpoint only
    layers: int = 12
    width: int = 256
    knn: int = 0  # TSP sparsification; 0 keeps the dense graph
    warm_start: str = ""  # checkpoint to initialize from (curriculum)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not self.train_path:
            raise ValueError("train_path is required")


_CONFIG_TYPES = {
    "task": str, "branch": str, "T": int, "beta1": float, "betaT": float,
    "epochs": int, "batch_size": int, "learning_rate": float, "seed": int,
    "train_path": str, "out_dir": str, "checkpoint_every": int,
    "layers": int, "width": int, "knn": int, "warm_start": str,
}


def load_config(path) -> TrainConfig:
    """Parse a flat ``key = value`` (or ``key value``) text file."""
    cfg = TrainConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" in text:
                key, _, value = text.partition("=")
            else:
                key, _, value = text.partition(" ")
            key, value = key.strip(), value.strip()
            if key not in _CONFIG_TYPES:
                raise ValueError(f"{path} line {lineno}: unknown key {key!r}")
            setattr(cfg, key, _CONFIG_TYPES[key](value))
    return cfg


# ---------------------------------------------------------------------------
# examples and state


@dataclass(eq=False)
class TrainExample:
    graph: SparseGraph
    x0: np.ndarray
    coords: Optional[np.ndarray]


def build_example(instance: Union[TspInstance, MisInstance],
                  knn: int = 0) -> TrainExample:
    """Turn a labeled instance into (graph, clean bits, coords)."""
    if instance.label is None:
        raise ValueError(f"instance {instance.id!r} has no label")
    if isinstance(instance, TspInstance):
        graph = dense_graph(instance) if knn <= 0 else sparsify(instance, knn)
        x0 = np.zeros(graph.n_edges, dtype=np.int64)
        index = graph.edge_index()
        order = instance.label.order
        for a in range(len(order)):
            u, v = order[a], order[(a + 1) % len(order)]
            for key in ((u, v), (v, u)):
                e = index.get(key)
                if e is not None:
                    x0[e] = 1
        return TrainExample(graph=graph, x0=x0, coords=instance.coords)
    graph = mis_graph(instance)
    x0 = np.zeros(instance.n, dtype=np.int64)
    x0[list(instance.label.nodes)] = 1
    return TrainExample(graph=graph, x0=x0, coords=None)


@dataclass(eq=False)
class TrainState:
    params: DenoiserParams
    adam_m: dict
    adam_v: dict
    step: int
    epoch: int
    rng: np.random.Generator
    total_steps: int
    peak_lr: float


def init_train_state(config: TrainConfig, total_steps: int) -> TrainState:
    if config.warm_start:
        loaded = ckpt.load_checkpoint(config.warm_start)
        params = loaded["params"]
        if params.task != config.task or params.branch != config.branch:
            raise ValueError(
                f"warm-start checkpoint is {params.task}/{params.branch}, "
                f"config wants {config.task}/{config.branch}")
    else:
        params = init_params(config.layers, config.width, config.seed,
                             task=config.task, branch=config.branch)
    return TrainState(
        params=params,
        adam_m=zeros_like_params(params),
        adam_v=zeros_like_params(params),
        step=0, epoch=0,
        rng=np.random.default_rng(np.random.SeedSequence(config.seed)),
        total_steps=total_steps,
        peak_lr=config.learning_rate,
    )


# ---------------------------------------------------------------------------
# steps and loop


def train_step(state: TrainState, batch: list[TrainExample],
               sched: NoiseSchedule,
               rng: Optional[np.random.Generator] = None) -> dict:
    """Corrupt a batch, run forward/backward, apply one optimizer update.

    Returns metrics {"loss", "lr"}. Timesteps are drawn uniformly in [1, T],
    one per instance.
    """
    if rng is None:
        rng = state.rng
    params = state.params
    t_per_graph = np.array([int(rng.integers(1, sched.T + 1)) for _ in batch])
    noisy = []
    targets = []
    for ex, t in zip(batch, t_per_graph):
        if params.branch == "discrete":
            noisy.append(discrete_forward_sample(ex.x0, int(t), sched, rng))
            targets.append(ex.x0)
        else:
            x_hat_t, eps = continuous_forward_sample(ex.x0, int(t), sched, rng)
            noisy.append(x_hat_t)
            targets.append(eps)
    x_t = np.concatenate(noisy)
    target = np.concatenate(targets)
    coords = [ex.coords for ex in batch] if params.task == "tsp" else None
    gbatch = batch_graphs([ex.graph for ex in batch], coords)

    out, cache = forward(params, gbatch, x_t, t_per_graph, train_mode=True)
    if params.branch == "discrete":
        loss, seed = loss_discrete(out, target)
    else:
        loss, seed = loss_continuous(out[:, 0], target)
        seed = seed[:, None]
    grads = backward(params, cache, seed)

    lr = cosine_lr(state.step, state.total_steps, state.peak_lr)
    adam_step(params.tensors, grads, state.adam_m, state.adam_v,
              state.step, lr)
    apply_bn_update(params, bn_batch_stats(cache))
    state.step += 1
    return {"loss": loss, "lr": lr}


def save_state(path, state: TrainState) -> None:
    ckpt.save_checkpoint(path, state.params, step=state.step,
                         epoch=state.epoch, adam_m=state.adam_m,
                         adam_v=state.adam_v, rng=state.rng)


def load_state(path, total_steps: int = 0, peak_lr: float = 0.0) -> TrainState:
    loaded = ckpt.load_checkpoint(path)
    if "adam_m" not in loaded:
        raise ckpt.CheckpointError(f"{path} has no optimizer state")
    return TrainState(params=loaded["params"], adam_m=loaded["adam_m"],
                      adam_v=loaded["adam_v"], step=loaded["step"],
                      epoch=loaded["epoch"], rng=loaded["rng"],
                      total_steps=total_steps, peak_lr=peak_lr)


def train(config: TrainConfig, log_fh=None) -> dict:
    """Run the configured training; returns paths and per-epoch mean losses.

    Writes ``model.ckpt`` (parameters only) and ``train.ckpt`` (with
    optimizer state) under ``config.out_dir``, plus a tab-separated
    ``train.log`` with one ``step loss lr seconds`` line per step.
    """
    config.validate()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    instances = load_instances(config.train_path)
    if not instances:
        raise ValueError(f"no instances in {config.train_path}")
    examples = [build_example(inst, config.knn) for inst in instances]

    sched = make_noise_schedule(config.T, config.beta1, config.betaT)
    steps_per_epoch = ceil(len(examples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    state = init_train_state(config, total_steps)

    log_path = out_dir / "train.log"
    epoch_losses: list[float] = []
    with open(log_path, "w", encoding="utf-8") as log:
        for epoch in range(config.epochs):
            state.epoch = epoch
            order = state.rng.permutation(len(examples))
            losses = []
            for lo in range(0, len(examples), config.batch_size):
                batch = [examples[i] for i in order[lo:lo + config.batch_size]]
                tic = time.perf_counter()
                metrics = train_step(state, batch, sched)
                seconds = time.perf_counter() - tic
                losses.append(metrics["loss"])
                line = (f"{state.step}\t{metrics['loss']:.6f}\t"
                        f"{metrics['lr']:.8f}\t{seconds:.3f}")
                log.write(line + "\n")
                if log_fh is not None:
                    print(line, file=log_fh)
                if (config.checkpoint_every > 0
                        and state.step % config.checkpoint_every == 0):
                    save_state(out_dir / f"step{state.step:07d}.ckpt", state)
            epoch_losses.append(float(np.mean(losses)))

    model_path = out_dir / "model.ckpt"
    ckpt.save_checkpoint(model_path, state.params)
    save_state(out_dir / "train.ckpt", state)
    return {
        "model": str(model_path),
        "train_state": str(out_dir / "train.ckpt"),
        "log": str(log_path),
        "epoch_losses": epoch_losses,
    }
