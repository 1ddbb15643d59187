"""Episodic meta-learning of an initialization (inner/outer loop).

``loss_fn(params, batch)`` maps an adaptable parameter set and a labeled batch
to a scalar tensor. Anything the loss needs besides those parameters (frozen
embeddings, normalization state) is closed over by the caller.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .synth import Episode, LabeledSet, TaskSampler

LossFn = Callable[[ParamSet, LabeledSet], Tensor]

EXACT_MODE_MAX_PARAMS = 10_000


class AdaptationError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"inner step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    meta_batch_size: int = 4
    mode: str = "first_order"
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_decay: float = 0.1
    decay_every_epochs: int = 10
    epoch_size: int = 100

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.meta_batch_size < 1:
            raise ValueError("meta_batch_size must be >= 1")
        if self.mode not in ("first_order", "exact"):
            raise ValueError(f"unknown meta mode {self.mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, iteration: int) -> float:
        epoch = iteration // max(1, self.epoch_size)
        return self.outer_lr * self.lr_decay ** (epoch // max(1, self.decay_every_epochs))


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: ParamSet, grads, lr: float | None = None) -> ParamSet:
        return params.step(grads, self.lr if lr is None else lr)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads, lr: float | None = None) -> ParamSet:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = ParamSet()
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p.detach()
                continue
            g = g.data
            m = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = Tensor(p.data - lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def make_optimizer(cfg: MetaConfig):
    if cfg.optimizer == "sgd":
        return Sgd(cfg.outer_lr)
    return Adam(cfg.outer_lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.item()):
        raise AdaptationError(step, "non-finite support loss")


def inner_adapt(theta: ParamSet, support: LabeledSet, cfg: MetaConfig, loss_fn: LossFn,
                trace: list | None = None) -> ParamSet:
    """k plain gradient steps on the support loss; ``theta`` is left untouched."""
    if len(support) == 0:
        raise ValueError("support set is empty")
    current = theta.detach()
    for step in range(cfg.inner_steps):
        tape = ad.Tape()
        p = tape.watch(current)
        try:
            loss = loss_fn(p, support)
        except FloatingPointError as exc:
            raise AdaptationError(step, str(exc)) from exc
        _check_finite(loss, step)
        if trace is not None:
            trace.append(loss.item())
        current = current.step(ad.backward(loss, p), cfg.inner_lr)
    return current


def adapt_tracked(theta: ParamSet, support: LabeledSet, cfg: MetaConfig, loss_fn: LossFn) -> ParamSet:
    """Inner steps recorded on the tape of ``theta`` so they can be differentiated."""
    current = theta
    for step in range(cfg.inner_steps):
        try:
            loss = loss_fn(current, support)
        except FloatingPointError as exc:
            raise AdaptationError(step, str(exc)) from exc
        grads = ad.backward(loss, current, create_graph=True)
        current = ParamSet((k, ad.sub(v, ad.scale(grads[k], cfg.inner_lr))) for k, v in current.items())
    return current


@dataclass
class MetaStepResult:
    params: ParamSet
    meta_loss: float
    grads: dict[str, np.ndarray]
    episode_losses: list[float] = field(default_factory=list)


def meta_gradient(theta: ParamSet, episodes: Sequence[Episode], cfg: MetaConfig,
                  loss_fn: LossFn) -> tuple[dict[str, np.ndarray], list[float]]:
    """Gradient of the mean query loss after adaptation, and per-episode losses."""
    if not episodes:
        raise ValueError("meta step needs at least one episode")
    if cfg.mode == "exact" and theta.num_values() > EXACT_MODE_MAX_PARAMS:
        raise ValueError(f"exact mode is limited to {EXACT_MODE_MAX_PARAMS} parameters")
    total = {k: np.zeros(v.shape) for k, v in theta.items()}
    losses = []
    for ep in episodes:
        if cfg.mode == "exact":
            tape = ad.Tape()
            base = tape.watch(theta)
            adapted = adapt_tracked(base, ep.support, cfg, loss_fn)
            q = loss_fn(adapted, ep.query)
            grads = ad.backward(q, base)
        else:
            adapted = inner_adapt(theta, ep.support, cfg, loss_fn)
            tape = ad.Tape()
            p = tape.watch(adapted)
            q = loss_fn(p, ep.query)
            grads = ad.backward(q, p)
        losses.append(q.item())
        for k in total:
            total[k] = total[k] + grads[k].data
    n = len(episodes)
    return {k: v / n for k, v in total.items()}, losses


def meta_step(theta: ParamSet, episodes: Sequence[Episode], cfg: MetaConfig, loss_fn: LossFn,
              optimizer=None, lr: float | None = None) -> MetaStepResult:
    grads, losses = meta_gradient(theta, episodes, cfg, loss_fn)
    meta_loss = float(np.mean(losses))
    if not np.isfinite(meta_loss):
        raise FloatingPointError("non-finite meta-loss")
    optimizer = optimizer or make_optimizer(cfg)
    new = optimizer.step(theta, {k: Tensor(g) for k, g in grads.items()}, lr)
    return MetaStepResult(new, meta_loss, grads, losses)


@dataclass
class MetaTrace:
    params: ParamSet
    rows: list[tuple[int, float, float]]  # iteration, meta_loss, wall seconds

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "meta_loss", "wall_time"])
            for it, loss, wall in self.rows:
                w.writerow([it, repr(loss), f"{wall:.6f}"])


def meta_train(theta: ParamSet, sampler: TaskSampler, cfg: MetaConfig, iterations: int,
               loss_fn: LossFn) -> MetaTrace:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    opt = make_optimizer(cfg)
    rows = []
    start = time.perf_counter()
    params = theta.detach()
    for it in range(iterations):
        episodes = sampler.sample(cfg.meta_batch_size)
        res = meta_step(params, episodes, cfg, loss_fn, opt, cfg.lr_at(it))
        params = res.params
        rows.append((it, res.meta_loss, time.perf_counter() - start))
    return MetaTrace(params, rows)


def adapted_accuracy(theta: ParamSet, episode: Episode, cfg: MetaConfig, loss_fn: LossFn,
                     predict: Callable[[ParamSet, LabeledSet], np.ndarray]) -> float:
    """Query accuracy after inner adaptation on the support set."""
    adapted = inner_adapt(theta, episode.support, cfg, loss_fn)
    probs = predict(adapted, episode.query)
    return float(np.mean(np.argmax(probs, axis=1) == episode.query.targets))
