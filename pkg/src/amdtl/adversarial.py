"""Alternating discriminator / feature-extractor training, fine-tuning and evaluation."""

from __future__ import annotations

import copy
import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .embeddings import EmbeddingTable
from .evaluation import MetricsReport, report_from_probs
from .models import AmdtlModel, DomainEmbedding, param_groups
from .objectives import adversarial_feature_loss, cross_entropy, discriminator_loss, total_loss
from .synth import LabeledSet

LOG_HEADER = ("epoch", "L_C", "L_D", "L_F", "disc_acc", "src_acc")
L_D_BAND = (0.2, 2.5)
L_D_PATIENCE = 5


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AdvConfig:
    eta_D: float = 0.05
    eta_F: float = 0.05
    eta_C: float = 0.05
    lambda_adv: float = 0.1
    d_steps_per_f_step: int = 1
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        for name in ("eta_D", "eta_F", "eta_C", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.d_steps_per_f_step < 1:
            raise ValueError("d_steps_per_f_step must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class TrainState:
    model: AmdtlModel
    params: ParamSet
    embeddings: EmbeddingTable
    seed: int = 0
    epoch: int = 0
    log: list[dict] = field(default_factory=list)
    source_id: str = "source"
    target_id: str = "target"

    def copy(self) -> TrainState:
        new = copy.copy(self)
        new.model = copy.deepcopy(self.model)
        new.params = ParamSet(self.params)
        new.embeddings = EmbeddingTable.from_dict(self.embeddings.to_dict())
        new.log = [dict(r) for r in self.log]
        return new

    def embedding(self, domain_id: str) -> DomainEmbedding:
        return self.embeddings[domain_id]

    def forward(self, mode: str = "eval", domain_id: str | None = None, params=None):
        """Differentiable x -> class probabilities for one domain."""
        domain_id = domain_id or self.target_id
        params = self.params if params is None else params
        e = self.embedding(domain_id)
        return lambda x: self.model.predict_proba(params, x, e, domain_id, mode)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.log:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in LOG_HEADER[1:]])
        return buf.getvalue()

    # serialization: arrays go to .npz, the rest to JSON
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.numpy() for k, v in self.params.items()}
        out.update({f"stats/{k}": v for k, v in self.model.stats_arrays().items()})
        return out

    def meta_dict(self) -> dict:
        return {"seed": self.seed, "epoch": self.epoch, "log": self.log,
                "embeddings": self.embeddings.to_dict(),
                "param_order": list(self.params),
                "source_id": self.source_id, "target_id": self.target_id}

    @classmethod
    def restore(cls, model: AmdtlModel, arrays, meta: dict) -> TrainState:
        params = ParamSet((k, Tensor(arrays[f"param/{k}"])) for k in meta["param_order"])
        model.load_stats({k[len("stats/"):]: arrays[k] for k in arrays if k.startswith("stats/")})
        return cls(model, params, EmbeddingTable.from_dict(meta["embeddings"]), meta["seed"],
                   meta["epoch"], meta["log"], meta["source_id"], meta["target_id"])

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k, v in sorted(self.to_arrays().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        h.update(json.dumps(self.meta_dict(), sort_keys=True).encode())
        return h.hexdigest()


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def discriminator_step(state: TrainState, xs: np.ndarray, xt: np.ndarray, eta_D: float):
    """One descent step on L_D with F frozen; returns (new params, L_D, L_F, disc_acc)."""
    model, params = state.model, state.params
    frozen = params.detach()
    hs = model.features(frozen, Tensor(xs), state.embedding(state.source_id), state.source_id,
                        "train", update_stats=False).detach()
    ht = model.features(frozen, Tensor(xt), state.embedding(state.target_id), state.target_id,
                        "train", update_stats=False).detach()
    tape = ad.Tape()
    d_params = tape.watch(param_groups(params, ["D"]))
    view = params.merged(d_params)
    ds, dt = model.discriminate(view, hs), model.discriminate(view, ht)
    l_d = discriminator_loss(ds, dt)
    l_f = adversarial_feature_loss(ds.detach(), dt.detach())
    acc = (np.sum(ds.data > 0.5) + np.sum(dt.data < 0.5)) / (len(xs) + len(xt))
    grads = ad.backward(l_d.scalar, d_params)
    return params.merged(d_params.step(grads, eta_D)), l_d.value, l_f.value, float(acc)


def feature_step(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray, cfg: AdvConfig):
    """Joint step: F descends L_C + lambda L_F, C descends L_C; D untouched."""
    model, params = state.model, state.params
    tape = ad.Tape()
    fc = tape.watch(param_groups(params, ["F", "C"]))
    view = params.detach().merged(fc)
    hs = model.features(view, Tensor(xs), state.embedding(state.source_id), state.source_id, "train")
    ht = model.features(view, Tensor(xt), state.embedding(state.target_id), state.target_id, "train")
    probs = model.classify(view, hs)
    l_c = cross_entropy(probs, ys)
    if cfg.lambda_adv > 0:
        l_f = adversarial_feature_loss(model.discriminate(view, hs), model.discriminate(view, ht))
        loss = total_loss(l_c, l_f, cfg.lambda_adv)
    else:
        loss = l_c
    f_names = [k for k in fc if k.startswith("F.")]
    c_names = [k for k in fc if k.startswith("C.")]
    grads = ad.backward(loss.scalar, fc)
    new = ParamSet(params)
    for k in f_names:
        new[k] = Tensor(params[k].data - cfg.eta_F * grads[k].data)
    for k in c_names:
        new[k] = Tensor(params[k].data - cfg.eta_C * grads[k].data)
    src_acc = float(np.mean(probs.data.argmax(axis=1) == ys.argmax(axis=1)))
    return new, l_c.value, src_acc


def adversarial_epoch(state: TrainState, src: LabeledSet, tgt: LabeledSet, cfg: AdvConfig) -> TrainState:
    """One pass over paired source/target batches. Target labels are never read."""
    state = state.copy()
    rng = np.random.default_rng([state.seed, 7919, state.epoch])
    src_batches = _batches(len(src), cfg.batch_size, rng)
    tgt_batches = _batches(len(tgt), cfg.batch_size, rng)
    n_pairs = min(len(src_batches), len(tgt_batches))
    sums = dict.fromkeys(LOG_HEADER[1:], 0.0)
    for b in range(n_pairs):
        xs, ys = src.inputs[src_batches[b]], src.labels[src_batches[b]]
        xt = tgt.inputs[tgt_batches[b]]
        for j in range(cfg.d_steps_per_f_step):
            params, l_d, l_f, d_acc = discriminator_step(state, xs, xt, cfg.eta_D)
            if j == 0:
                sums["L_D"] += l_d
                sums["L_F"] += l_f
                sums["disc_acc"] += d_acc
            state.params = params
        state.params, l_c, s_acc = feature_step(state, xs, ys, xt, cfg)
        sums["L_C"] += l_c
        sums["src_acc"] += s_acc
    row = {"epoch": state.epoch}
    row.update({k: v / max(n_pairs, 1) for k, v in sums.items()})
    if not all(np.isfinite(v) for v in row.values()):
        raise FloatingPointError(f"non-finite losses in epoch {state.epoch}")
    state.log.append(row)
    state.epoch += 1
    _monitor(state.log)
    return state


def _monitor(log: list[dict]) -> None:
    lo, hi = L_D_BAND
    recent = log[-L_D_PATIENCE:]
    if len(recent) == L_D_PATIENCE and all(not lo <= r["L_D"] <= hi for r in recent):
        warnings.warn(f"discriminator loss outside [{lo}, {hi}] for {L_D_PATIENCE} consecutive epochs",
                      ConvergenceWarning, stacklevel=3)


def adversarial_train(state: TrainState, src: LabeledSet, tgt: LabeledSet, cfg: AdvConfig) -> TrainState:
    for _ in range(cfg.epochs):
        state = adversarial_epoch(state, src, tgt, cfg)
    return state


def calibrate_stats(state: TrainState, x: np.ndarray, domain_id: str) -> None:
    """Replace a domain's normalization statistics with those of one full batch."""
    e = state.embedding(domain_id)
    for s in state.model.bn:
        s.running.pop(domain_id, None)
    state.model.features(state.params.detach(), Tensor(x), e, domain_id, "train", update_stats=True)


@dataclass(frozen=True)
class FineTuneConfig:
    steps: int = 50
    eta_F: float = 0.05
    eta_C: float = 0.05
    eta_E: float = 0.0

    def __post_init__(self):
        if self.steps < 0 or min(self.eta_F, self.eta_C, self.eta_E) < 0:
            raise ValueError("fine-tune steps and rates must be non-negative")


def fine_tune(state: TrainState, tgt_labeled: LabeledSet, cfg: FineTuneConfig,
              domain_id: str | None = None) -> tuple[TrainState, list[float]]:
    """Full-batch descent on the target task loss for F and C (and optionally E_D).

    Normalization uses the stored statistics of the target domain, so a few
    labeled samples do not overwrite what was estimated from unlabeled data.
    """
    if len(tgt_labeled) == 0:
        raise ValueError("fine-tuning needs a nonempty labeled target set")
    domain_id = domain_id or state.target_id
    state = state.copy()
    losses = []
    x = Tensor(tgt_labeled.inputs)
    for _ in range(cfg.steps):
        tape = ad.Tape()
        fc = tape.watch(param_groups(state.params, ["F", "C"]))
        view = state.params.detach().merged(fc)
        emb = state.embedding(domain_id)
        e_row = tape.leaf(emb.vector.reshape(1, -1))
        probs = state.model.classify(view, state.model.features(view, x, e_row, domain_id, "eval"))
        loss = cross_entropy(probs, tgt_labeled.labels)
        losses.append(loss.value)
        grads = ad.gradients(loss.scalar, [*fc.values(), e_row])
        new = ParamSet(state.params)
        for (k, _), g in zip(fc.items(), grads):
            rate = cfg.eta_F if k.startswith("F.") else cfg.eta_C
            new[k] = Tensor(state.params[k].data - rate * g.data)
        state.params = new
        if cfg.eta_E > 0:
            vec = emb.vector - cfg.eta_E * grads[-1].data.reshape(-1)
            state.embeddings.add(DomainEmbedding(vec, domain_id))
    return state, losses


@dataclass
class Evaluation:
    report: MetricsReport
    probs: np.ndarray
    truth: np.ndarray

    def predictions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.probs.shape[1]
        w.writerow(["row", "truth", "pred"] + [f"p{c}" for c in range(k)])
        for i, (t, p) in enumerate(zip(self.truth, self.probs)):
            w.writerow([i, int(t), int(np.argmax(p))] + [repr(float(v)) for v in p])
        return buf.getvalue()


def evaluate(state: TrainState, test: LabeledSet, domain_id: str | None = None) -> Evaluation:
    """Eval-mode forward pass and metrics; never mutates ``state``."""
    if len(test) == 0:
        raise ValueError("evaluation needs a nonempty test set")
    domain_id = domain_id or test.domain_id
    probs = state.forward("eval", domain_id)(Tensor(test.inputs)).data
    truth = test.targets
    return Evaluation(report_from_probs(probs, truth), probs, truth)
