"""Domain embeddings learned with an autoencoder.

A domain's embedding is the mean encoder code over a reference batch of that
domain. Training can add a weighted task term whose loss depends on the
embedding (the joint refinement phase).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .models import DomainEmbedding, Mlp, MlpSpec
from .objectives import LossValue, embedding_loss, reconstruction_loss

TaskTerm = Callable[[ParamSet, Tensor], LossValue]


@dataclass
class EmbeddingTable:
    dim: int
    provenance: str = "autoencoder"
    entries: dict[str, DomainEmbedding] = field(default_factory=dict)

    def __post_init__(self):
        if self.provenance not in ("autoencoder", "supervised", "joint", "none"):
            raise ValueError(f"unknown embedding provenance {self.provenance!r}")

    def add(self, emb: DomainEmbedding) -> None:
        if emb.dim != self.dim:
            raise ValueError(f"embedding {emb.domain_id!r} has dim {emb.dim}, table has {self.dim}")
        self.entries[emb.domain_id] = emb

    def __getitem__(self, domain_id: str) -> DomainEmbedding:
        try:
            return self.entries[domain_id]
        except KeyError:
            raise KeyError(f"no embedding for domain {domain_id!r}") from None

    def __contains__(self, domain_id: str) -> bool:
        return domain_id in self.entries

    @classmethod
    def zeros(cls, dim: int, domain_ids) -> EmbeddingTable:
        table = cls(dim, "none")
        for d in domain_ids:
            table.add(DomainEmbedding(np.zeros(dim), d))
        return table

    def to_dict(self) -> dict:
        return {"dim": self.dim, "provenance": self.provenance,
                "entries": {k: [float(v) for v in e.vector] for k, e in sorted(self.entries.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> EmbeddingTable:
        table = cls(int(d["dim"]), d["provenance"])
        for k, v in d["entries"].items():
            table.add(DomainEmbedding(np.array(v, dtype=np.float64), k))
        return table

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class AutoencoderNets:
    def __init__(self, in_dim: int, code_dim: int, hidden: tuple[int, ...] = (16,)):
        self.encoder = Mlp(MlpSpec((in_dim, *hidden, code_dim)), "E.enc.")
        self.decoder = Mlp(MlpSpec((code_dim, *reversed(hidden), in_dim)), "E.dec.")
        if self.decoder.spec.layer_widths[-1] != in_dim:
            raise ValueError("decoder output width must equal input width")

    @property
    def code_dim(self) -> int:
        return self.encoder.spec.layer_widths[-1]

    def init(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        a, b = (int(s) for s in rng.integers(0, 2**31, size=2))
        return self.encoder.init(a).merged(self.decoder.init(b))

    def encode(self, params, x: Tensor) -> Tensor:
        return self.encoder(params, x)

    def reconstruct(self, params, x: Tensor) -> Tensor:
        return self.decoder(params, self.encoder(params, x))

    def mean_code(self, params, x: Tensor) -> Tensor:
        codes = self.encode(params, x)
        m = x.shape[0]
        return ad.matmul(Tensor(np.full((1, m), 1.0 / m)), codes)


def domain_embedding(nets: AutoencoderNets, params, domain_data, domain_id: str = "domain") -> DomainEmbedding:
    x = np.asarray(domain_data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("domain embedding needs a nonempty batch")
    codes = nets.encode(params.detach() if isinstance(params, ParamSet) else params, Tensor(x)).data
    # exactly rounded column sums: the mean is invariant to row order and duplication
    sums = np.array([math.fsum(col) for col in codes.T])
    return DomainEmbedding(sums / len(codes), domain_id)


@dataclass
class AutoencoderTrace:
    losses: list[float]
    params: ParamSet


def train_autoencoder(data, nets: AutoencoderNets, params: ParamSet, epochs: int, lr: float,
                      seed: int, batch_size: int | None = None, lambda_e: float = 0.0,
                      task_term: TaskTerm | None = None) -> AutoencoderTrace:
    """Gradient descent on reconstruction (+ lambda_e * task term) loss.

    ``task_term(params, x_batch)`` returns a loss that may depend on the
    encoder parameters (for example through ``nets.mean_code``). The trace
    holds the mean loss of each epoch.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("autoencoder training needs nonempty data")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lambda_e > 0 and task_term is None:
        raise ValueError("lambda_e > 0 needs a task term")
    rng = np.random.default_rng(seed)
    n = len(x)
    bs = n if batch_size is None else min(batch_size, n)
    theta = params.detach()
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            xb = x[order[start:start + bs]]
            tape = ad.Tape()
            p = tape.watch(theta)
            loss = _ae_loss(nets, p, xb, lambda_e, task_term)
            grads = ad.backward(loss.scalar, p)
            theta = theta.step(grads, lr)
            total += loss.value * len(xb)
            count += len(xb)
        losses.append(total / count)
    return AutoencoderTrace(losses, theta)


def _ae_loss(nets, params, xb, lambda_e, task_term) -> LossValue:
    rec = reconstruction_loss(xb, nets.reconstruct(params, Tensor(xb)))
    if lambda_e == 0:
        return rec
    return embedding_loss(rec, task_term(params, Tensor(xb)), lambda_e)
