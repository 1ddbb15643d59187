"""MLP networks and domain-conditioned feature layers.

All forward functions are pure in the parameters they are handed: a network
object only knows its shapes and parameter names, so the same forward code
serves plain evaluation, taped training, and nested (second-order) replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths include the input width: ``(in, hidden..., out)``."""

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"MlpSpec needs >= 2 positive widths, got {self.layer_widths}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.output_head not in ("linear", "softmax", "sigmoid", "relu"):
            raise ValueError(f"unsupported output head {self.output_head!r}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1


class Mlp:
    def __init__(self, spec: MlpSpec, prefix: str = ""):
        self.spec = spec
        self.prefix = prefix

    def names(self, i: int) -> tuple[str, str]:
        return f"{self.prefix}W{i}", f"{self.prefix}b{i}"

    def init(self, seed: int) -> ParamSet:
        return init_params(self.spec, seed, self.prefix)

    def linear(self, params, x: Tensor, i: int) -> Tensor:
        w, b = self.names(i)
        return ad.add(ad.matmul(x, params[w]), params[b])

    def __call__(self, params, x: Tensor, hidden_hook=None) -> Tensor:
        """Forward pass; ``hidden_hook(i, z)`` may rewrite each hidden pre-activation."""
        if x.data.ndim != 2 or x.shape[1] != self.spec.layer_widths[0]:
            raise ShapeError(f"{self.prefix or 'mlp'} expects input width "
                             f"{self.spec.layer_widths[0]}, got shape {x.shape}")
        h = x
        last = self.spec.n_layers - 1
        for i in range(self.spec.n_layers):
            z = self.linear(params, h, i)
            if i < last:
                if hidden_hook is not None:
                    z = hidden_hook(i, z)
                h = ad.relu(z)
            else:
                h = _head(z, self.spec.output_head)
        return h


def _head(z: Tensor, kind: str) -> Tensor:
    if kind == "softmax":
        return ad.softmax_rows(z)
    if kind == "sigmoid":
        return ad.sigmoid(z)
    if kind == "relu":
        return ad.relu(z)
    return z


def init_params(spec: MlpSpec, seed: int, prefix: str = "") -> ParamSet:
    """He-uniform weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet()
    for i, (fan_in, fan_out) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        bound = np.sqrt(6.0 / fan_in)
        params[f"{prefix}W{i}"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params[f"{prefix}b{i}"] = Tensor(np.zeros(fan_out))
    return params


# ------------------------------------------------------------------ heads


def forward_extractor(net: Mlp, params, x: Tensor) -> Tensor:
    return net(params, x)


def forward_classifier(net: Mlp, params, h: Tensor) -> Tensor:
    if net.spec.layer_widths[-1] < 2:
        raise ValueError("classifier needs at least two classes")
    if net.spec.output_head != "linear":
        raise ValueError("classifier network must use a linear output head")
    return ad.softmax_rows(net(params, h))


def forward_discriminator(net: Mlp, params, h: Tensor) -> Tensor:
    if net.spec.layer_widths[-1] != 1:
        raise ShapeError("discriminator must have a single output unit")
    return ad.clip(ad.sigmoid(net(params, h)), PROB_CLAMP, 1.0 - PROB_CLAMP)


# ---------------------------------------------------------- normalization


@dataclass
class DomainEmbedding:
    vector: np.ndarray
    domain_id: str

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError(f"embedding for {self.domain_id!r} has non-finite entries")

    @property
    def dim(self) -> int:
        return self.vector.size

    def row(self) -> Tensor:
        return Tensor(self.vector.reshape(1, -1))


@dataclass
class AdaBnState:
    """Per-domain running statistics plus the affine pair of one BN layer."""

    gamma: Tensor
    beta: Tensor
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    running: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("BN epsilon must be positive")

    @classmethod
    def identity(cls, n: int, **kw) -> AdaBnState:
        return cls(Tensor(np.ones(n)), Tensor(np.zeros(n)), **kw)

    def update(self, domain_id: str, mu: np.ndarray, var: np.ndarray) -> None:
        if domain_id not in self.running:
            self.running[domain_id] = (mu.copy(), var.copy())
            return
        m = self.momentum
        old_mu, old_var = self.running[domain_id]
        self.running[domain_id] = ((1 - m) * old_mu + m * mu, (1 - m) * old_var + m * var)


def normalize(x: Tensor, stats: AdaBnState, mode: str, domain_id: str,
              update_stats: bool = True) -> Tensor:
    """(x - mu) / sqrt(var + eps), with batch stats in train mode."""
    if x.data.ndim != 2:
        raise ShapeError(f"batch norm expects a matrix, got {x.shape}")
    m, n = x.shape
    if m == 0:
        raise ValueError("batch norm on an empty batch")
    if mode == "train":
        avg = Tensor(np.full((1, m), 1.0 / m))
        mu = ad.matmul(avg, x)
        centered = ad.sub(x, mu)
        var = ad.matmul(avg, ad.mul(centered, centered))
        if update_stats:
            stats.update(domain_id, mu.data.reshape(-1), var.data.reshape(-1))
    elif mode == "eval":
        if domain_id not in stats.running:
            raise KeyError(f"no stored normalization statistics for domain {domain_id!r}")
        mu_np, var_np = stats.running[domain_id]
        if mu_np.size != n:
            raise ShapeError(f"stored statistics have width {mu_np.size}, batch has {n}")
        centered = ad.sub(x, Tensor(mu_np))
        var = Tensor(var_np.reshape(1, -1))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ad.div(centered, ad.sqrt(ad.add(var, Tensor(np.full((1, n), stats.eps)))))


def ada_bn(x: Tensor, state: AdaBnState, mode: str, domain_id: str,
           gamma: Tensor | None = None, beta: Tensor | None = None,
           update_stats: bool = True) -> Tensor:
    gamma = state.gamma if gamma is None else gamma
    beta = state.beta if beta is None else beta
    if gamma.size != x.shape[1] or beta.size != x.shape[1]:
        raise ShapeError(f"gamma/beta width {gamma.size}/{beta.size} != features {x.shape[1]}")
    xhat = normalize(x, state, mode, domain_id, update_stats)
    return ad.add(ad.mul(xhat, ad.reshape(gamma, (1, gamma.size))),
                  ad.reshape(beta, (1, beta.size)))


@dataclass
class CondBnMaps:
    """Affine maps embedding -> (gamma, beta); weights are (d_E, n)."""

    gamma_w: Tensor
    gamma_b: Tensor
    beta_w: Tensor
    beta_b: Tensor

    def __post_init__(self):
        if self.gamma_w.shape[1] != self.gamma_b.size or self.beta_w.shape[1] != self.beta_b.size:
            raise ShapeError("conditioning map output width must match its bias")

    @classmethod
    def from_params(cls, params, prefix: str) -> CondBnMaps:
        return cls(params[prefix + "gw"], params[prefix + "gb"], params[prefix + "bw"], params[prefix + "bb"])

    @staticmethod
    def init(d_e: int, n: int, prefix: str) -> ParamSet:
        return ParamSet({
            prefix + "gw": Tensor(np.zeros((d_e, n))),
            prefix + "gb": Tensor(np.ones(n)),
            prefix + "bw": Tensor(np.zeros((d_e, n))),
            prefix + "bb": Tensor(np.zeros(n)),
        })

    def gamma(self, e: Tensor) -> Tensor:
        return ad.add(ad.matmul(e, self.gamma_w), ad.reshape(self.gamma_b, (1, self.gamma_b.size)))

    def beta(self, e: Tensor) -> Tensor:
        return ad.add(ad.matmul(e, self.beta_w), ad.reshape(self.beta_b, (1, self.beta_b.size)))


def _embedding_row(e) -> Tensor:
    if isinstance(e, DomainEmbedding):
        return e.row()
    return e if e.data.ndim == 2 else ad.reshape(e, (1, e.size))


def cond_bn(x: Tensor, maps: CondBnMaps, e, state: AdaBnState, mode: str, domain_id: str,
            update_stats: bool = True) -> Tensor:
    row = _embedding_row(e)
    if row.shape[1] != maps.gamma_w.shape[0]:
        raise ShapeError(f"embedding width {row.shape[1]} != map input {maps.gamma_w.shape[0]}")
    return ada_bn(x, state, mode, domain_id, maps.gamma(row), maps.beta(row), update_stats)


# --------------------------------------------------- gating and attention


@dataclass
class GatedDomainModule:
    """g(x, E_D) scaled by a scalar gate sigmoid(w_g . E_D)."""

    net: Mlp
    gate_name: str

    def gate(self, params, e) -> Tensor:
        row = _embedding_row(e)
        w = params[self.gate_name]
        return ad.sigmoid(ad.matmul(row, ad.reshape(w, (w.size, 1))))


def gated_domain_forward(mod: GatedDomainModule, params, f_out: Tensor, x: Tensor, e) -> Tensor:
    row = _embedding_row(e)
    m = x.shape[0]
    g = mod.net(params, ad.concat_cols(x, ad.repeat_rows(row, m)))
    if g.shape != f_out.shape:
        raise ShapeError(f"domain module output {g.shape} != base output {f_out.shape}")
    gate = mod.gate(params, row)
    spread = ad.matmul(ad.matmul(Tensor(np.ones((m, 1))), gate), Tensor(np.ones((1, g.shape[1]))))
    return ad.add(f_out, ad.mul(spread, g))


@dataclass
class AttentionParams:
    W: Tensor  # (n, n + d_E)

    def __post_init__(self):
        n, cols = self.W.shape
        if cols <= n:
            raise ShapeError(f"attention matrix must be (n, n + d_E), got {self.W.shape}")


def attention_weights(h: Tensor, e, p: AttentionParams) -> Tensor:
    row = _embedding_row(e)
    n = h.shape[1]
    if p.W.shape != (n, n + row.shape[1]):
        raise ShapeError(f"attention matrix {p.W.shape} does not fit features {n} + embedding {row.shape[1]}")
    joined = ad.concat_cols(h, ad.repeat_rows(row, h.shape[0]))
    return ad.softmax_rows(ad.matmul(joined, ad.transpose(p.W)))


def contextual_attention(h: Tensor, e, p: AttentionParams) -> Tensor:
    return ad.mul(attention_weights(h, e, p), h)


# --------------------------------------------------------- composite model


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    num_classes: int
    extractor_hidden: tuple[int, ...] = (32, 32)
    feature_dim: int = 16
    classifier_hidden: tuple[int, ...] = ()
    discriminator_hidden: tuple[int, ...] = (16,)
    gate_hidden: tuple[int, ...] = (16,)
    embed_dim: int = 16
    dynamic_adjust: bool = True
    attention: bool = True
    bn_eps: float = BN_EPS
    bn_momentum: float = BN_MOMENTUM


class AmdtlModel:
    """Feature extractor F, classifier C and discriminator D.

    Parameter names are prefixed ``F.``, ``C.``, ``D.``. With ``dynamic_adjust``
    every hidden layer of F is followed by a CondBN layer with per-domain
    statistics, and a gated domain-specific branch is added to F's output;
    ``attention`` reweights the final features.
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        widths = (cfg.in_dim, *cfg.extractor_hidden, cfg.feature_dim)
        self.extractor = Mlp(MlpSpec(widths, output_head="relu"), "F.")
        self.classifier = Mlp(MlpSpec((cfg.feature_dim, *cfg.classifier_hidden, cfg.num_classes)), "C.")
        self.discriminator = Mlp(MlpSpec((cfg.feature_dim, *cfg.discriminator_hidden, 1)), "D.")
        self.gated = GatedDomainModule(
            Mlp(MlpSpec((cfg.in_dim + cfg.embed_dim, *cfg.gate_hidden, cfg.feature_dim), output_head="relu"), "F.g."),
            "F.gate")
        self.bn = [AdaBnState.identity(w, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
                   for w in cfg.extractor_hidden]

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng(seed)
        seeds = rng.integers(0, 2**31, size=4)
        params = ParamSet()
        params.update(self.extractor.init(int(seeds[0])))
        cfg = self.cfg
        if cfg.dynamic_adjust:
            for i, w in enumerate(cfg.extractor_hidden):
                params.update(CondBnMaps.init(cfg.embed_dim, w, f"F.bn{i}."))
            params.update(self.gated.net.init(int(seeds[3])))
            params["F.gate"] = Tensor(np.zeros(cfg.embed_dim))
        if cfg.attention:
            n = cfg.feature_dim
            params["F.att"] = Tensor(rng.normal(0.0, 0.01, size=(n, n + cfg.embed_dim)))
        params.update(self.classifier.init(int(seeds[1])))
        params.update(self.discriminator.init(int(seeds[2])))
        return params

    def reset_stats(self) -> None:
        for s in self.bn:
            s.running.clear()

    def features(self, params, x: Tensor, e, domain_id: str, mode: str = "train",
                 update_stats: bool = True) -> Tensor:
        row = _embedding_row(e)
        hook = None
        if self.cfg.dynamic_adjust:
            def hook(i, z):
                maps = CondBnMaps.from_params(params, f"F.bn{i}.")
                return cond_bn(z, maps, row, self.bn[i], mode, domain_id, update_stats)
        h = self.extractor(params, x, hidden_hook=hook)
        if self.cfg.dynamic_adjust:
            h = gated_domain_forward(self.gated, params, h, x, row)
        if self.cfg.attention:
            h = contextual_attention(h, row, AttentionParams(params["F.att"]))
        return h

    def classify(self, params, h: Tensor) -> Tensor:
        return forward_classifier(self.classifier, params, h)

    def discriminate(self, params, h: Tensor) -> Tensor:
        return forward_discriminator(self.discriminator, params, h)

    def predict_proba(self, params, x: Tensor, e, domain_id: str, mode: str = "eval") -> Tensor:
        return self.classify(params, self.features(params, x, e, domain_id, mode, update_stats=False))

    def stats_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, s in enumerate(self.bn):
            for dom in sorted(s.running):
                mu, var = s.running[dom]
                out[f"bn{i}/{dom}/mean"] = mu
                out[f"bn{i}/{dom}/var"] = var
        return out

    def load_stats(self, arrays) -> None:
        self.reset_stats()
        for key in arrays:
            layer, dom, what = key.split("/")
            if what != "mean":
                continue
            i = int(layer[2:])
            self.bn[i].running[dom] = (np.array(arrays[key]), np.array(arrays[f"{layer}/{dom}/var"]))


def param_groups(params, groups: Sequence[str]) -> ParamSet:
    return ParamSet((k, v) for k, v in params.items() if k.split(".", 1)[0] in groups)
