"""Stage orchestration: data, embeddings, meta-training, alignment, adaptation, evaluation.

Each stage draws its randomness from ``stage_seed(seed, tag)``, so skipping or
re-running one stage never shifts the random streams of the others.
"""

from __future__ import annotations

import io
import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adversarial import TrainState, adversarial_train, calibrate_stats, evaluate, fine_tune
from .autodiff import ParamSet, Tensor
from .config import TOGGLES, ExperimentConfig, ToggleSection
from .embeddings import AutoencoderNets, EmbeddingTable, domain_embedding, train_autoencoder
from .evaluation import robustness_curve
from .meta import meta_train
from .models import AmdtlModel, param_groups
from .objectives import cross_entropy
from .synth import LabeledSet, Standardizer, TaskSampler, from_csv, generate_domain, split, to_csv

SOURCE, TARGET = "source", "target"
META_TASK = "meta-task"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage


def stage_seed(seed: int, tag: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(tag.encode())]).generate_state(1)[0])


class _Stage:
    """Context manager that names failures and records wall time."""

    def __init__(self, name: str, timings: dict):
        self.name, self.timings = name, timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, kind, exc, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


# ------------------------------------------------------------------- data


def generate_sets(cfg: ExperimentConfig, seed: int) -> list[LabeledSet]:
    """Raw source and target splits (train, val, test each)."""
    fam = cfg.task_family()
    out = []
    for dom_id, section in ((SOURCE, cfg.source), (TARGET, cfg.target)):
        data = generate_domain(fam, section.build(), cfg.data.n_per_domain,
                               stage_seed(seed, f"data/{dom_id}"), dom_id)
        out.extend(split(data, cfg.data.split, stage_seed(seed, f"split/{dom_id}")))
    return out


def dataset_csv(sets: list[LabeledSet]) -> str:
    return to_csv(sets)


@dataclass
class DataBundle:
    sets: dict[tuple[str, str], LabeledSet]
    scaler: Standardizer
    finetune: LabeledSet

    def __getitem__(self, key: tuple[str, str]) -> LabeledSet:
        return self.sets[key]


def make_bundle(cfg: ExperimentConfig, sets: list[LabeledSet], seed: int) -> DataBundle:
    raw = {(s.domain_id, s.split): s for s in sets}
    for key in ((SOURCE, "train"), (TARGET, "train"), (TARGET, "test")):
        if key not in raw:
            raise ValueError(f"dataset is missing the {key[0]}/{key[1]} split")
    if cfg.data.standardize:
        scaler = Standardizer.fit(raw[SOURCE, "train"].inputs)
    else:
        d = raw[SOURCE, "train"].inputs.shape[1]
        scaler = Standardizer(np.zeros(d), np.ones(d))
    scaled = {k: scaler.apply(v) for k, v in raw.items()}
    tgt = scaled[TARGET, "train"]
    n = min(cfg.data.n_finetune, len(tgt))
    rows = np.sort(np.random.default_rng(stage_seed(seed, "finetune")).permutation(len(tgt))[:n])
    return DataBundle(scaled, scaler, tgt.take(rows, "finetune"))


def load_bundle(cfg: ExperimentConfig, csv_text: str, seed: int) -> DataBundle:
    return make_bundle(cfg, from_csv(csv_text, cfg.family.num_classes), seed)


# ----------------------------------------------------------------- stages


def embedding_stage(cfg: ExperimentConfig, toggles: ToggleSection, data: DataBundle,
                    model: AmdtlModel, params: ParamSet, seed: int) -> EmbeddingTable:
    ec = cfg.embeddings
    if not toggles.embeddings:
        return EmbeddingTable.zeros(ec.dim, [SOURCE, TARGET])
    src, tgt = data[SOURCE, "train"], data[TARGET, "train"]
    nets = AutoencoderNets(src.inputs.shape[1], ec.dim, ec.hidden)
    pooled = np.vstack([src.inputs, tgt.inputs])
    ae = nets.init(stage_seed(seed, "embeddings/init"))
    ae = train_autoencoder(pooled, nets, ae, ec.epochs, ec.lr, stage_seed(seed, "embeddings/train"),
                           ec.batch_size).params
    provenance = "autoencoder"
    if ec.joint_epochs > 0:
        ae = _joint_refine(cfg, nets, ae, model, params, src, seed)
        provenance = "joint"
    table = EmbeddingTable(ec.dim, provenance)
    table.add(domain_embedding(nets, ae, src.inputs, SOURCE))
    table.add(domain_embedding(nets, ae, tgt.inputs, TARGET))
    return table


def _joint_refine(cfg, nets, ae, model, params, src, seed):
    """Second embedding phase: reconstruction plus the source task loss through E_D."""
    frozen = params.detach()
    x_src = Tensor(src.inputs)

    def task_term(p, _xb):
        e = nets.mean_code(p, x_src)
        h = model.features(frozen, x_src, e, SOURCE, "train", update_stats=False)
        return cross_entropy(model.classify(frozen, h), src.labels)

    ec = cfg.embeddings
    return train_autoencoder(src.inputs, nets, ae, ec.joint_epochs, ec.lr, stage_seed(seed, "embeddings/joint"),
                             ec.batch_size, ec.lambda_e, task_term).params


def meta_stage(cfg: ExperimentConfig, model: AmdtlModel, params: ParamSet, table: EmbeddingTable,
               scaler: Standardizer, seed: int):
    """Meta-learn the F and C initialization on tasks drawn around the source domain."""
    e = table[SOURCE]

    def loss_fn(p, batch):
        x = Tensor((batch.inputs - scaler.mean) / scaler.std)
        h = model.features(p, x, e, META_TASK, "train", update_stats=False)
        return cross_entropy(model.classify(p, h), batch.labels).scalar

    mc = cfg.meta
    sampler = TaskSampler(cfg.task_family(), stage_seed(seed, "meta"), mc.n_support, mc.n_query,
                          cfg.source.build())
    theta = param_groups(params, ["F", "C"])
    trace = meta_train(theta, sampler, mc.build(), mc.iterations, loss_fn)
    return params.merged(trace.params), trace


def adversarial_stage(cfg: ExperimentConfig, toggles: ToggleSection, state: TrainState,
                      data: DataBundle) -> TrainState:
    lam = cfg.adversarial.lambda_adv if toggles.adversarial else 0.0
    src, tgt = data[SOURCE, "train"], data[TARGET, "train"]
    state = adversarial_train(state, src, tgt, cfg.adversarial.build(lam))
    state = state.copy()
    calibrate_stats(state, src.inputs, SOURCE)
    calibrate_stats(state, tgt.inputs, TARGET)
    return state


@dataclass
class Pretrained:
    state: TrainState
    meta_losses: list[float] = field(default_factory=list)


def meta_phase(cfg: ExperimentConfig, toggles: ToggleSection, data: DataBundle, seed: int,
               timings: dict | None = None) -> Pretrained:
    """Embedding learning then meta-training: the part of pre-training before alignment."""
    timings = {} if timings is None else timings
    model = AmdtlModel(cfg.model_config_for(toggles))
    params = model.init_params(stage_seed(seed, "init"))
    with _Stage("embeddings", timings):
        table = embedding_stage(cfg, toggles, data, model, params, seed)
    losses: list[float] = []
    if toggles.meta:
        with _Stage("meta-train", timings):
            params, trace = meta_stage(cfg, model, params, table, data.scaler, seed)
            losses = trace.losses
    state = TrainState(model, params, table, stage_seed(seed, "adversarial"), source_id=SOURCE, target_id=TARGET)
    return Pretrained(state, losses)


def pretrain(cfg: ExperimentConfig, toggles: ToggleSection, data: DataBundle, seed: int,
             timings: dict | None = None, start: Pretrained | None = None) -> Pretrained:
    """embeddings -> meta-train -> adversarial alignment; ``start`` resumes after meta-training."""
    timings = {} if timings is None else timings
    pre = start if start is not None else meta_phase(cfg, toggles, data, seed, timings)
    with _Stage("adversarial", timings):
        state = adversarial_stage(cfg, toggles, pre.state, data)
    return Pretrained(state, pre.meta_losses)


def adapt(cfg: ExperimentConfig, state: TrainState, data: DataBundle, timings: dict | None = None) -> TrainState:
    timings = {} if timings is None else timings
    with _Stage("adapt", timings):
        state, _ = fine_tune(state, data.finetune, cfg.fine_tune.build(), TARGET)
    return state


def evaluate_state(cfg: ExperimentConfig, state: TrainState, data: DataBundle,
                   timings: dict | None = None, seed: int = 0) -> dict:
    """Target-test metrics plus the robustness curves, as a JSON-ready dict."""
    timings = {} if timings is None else timings
    test = data[TARGET, "test"]
    with _Stage("evaluate", timings):
        ev = evaluate(state, test, TARGET)
    with _Stage("robustness", timings):
        curves = robustness_curves(cfg, state, test, seed)
    return {"metrics": ev.report.to_dict(), "robustness": curves}


def robustness_curves(cfg: ExperimentConfig, state: TrainState, test: LabeledSet, seed: int) -> dict:
    rc = cfg.robustness
    fwd = state.forward("eval", TARGET)
    out = {}
    for kind, grid in (("fgsm", rc.fgsm_grid), ("pgd", rc.pgd_grid), ("noise", rc.noise_grid)):
        if not grid:
            continue
        rows = robustness_curve(fwd, test.inputs, test.labels, grid, kind, stage_seed(seed, "noise"), rc.pgd_steps)
        out[kind] = [{"level": lvl, "accuracy": r.accuracy, "f1": r.f1, "auc_roc": r.auc_roc} for lvl, r in rows]
    return out


# --------------------------------------------------------------- variants


def variants(toggles: ToggleSection, ablate: list[str] | None = None) -> list[tuple[str, ToggleSection]]:
    """``full`` plus one variant per ablated toggle (default: every enabled toggle)."""
    enabled = toggles.enabled()
    names = enabled if ablate is None else list(ablate)
    for n in names:
        if n not in enabled:
            raise ValueError(f"cannot ablate {n!r}: toggle is unknown or already off")
    if len(set(names)) != len(names):
        raise ValueError("ablation list has duplicates")
    return [("full", toggles)] + [(f"no_{n}", toggles.without(n)) for n in names]


@dataclass
class RunOutput:
    variant: str
    seed: int
    result: dict
    timings: dict
    train_log: str


def run_variant(cfg: ExperimentConfig, variant: str, toggles: ToggleSection, seed: int,
                data: DataBundle | None = None) -> RunOutput:
    """The whole pipeline for one (variant, seed) job."""
    timings: dict[str, float] = {}
    if data is None:
        with _Stage("generate-data", timings):
            data = make_bundle(cfg, generate_sets(cfg, seed), seed)
    pre = pretrain(cfg, toggles, data, seed, timings)
    state = adapt(cfg, pre.state, data, timings)
    result = describe_run(cfg, variant, toggles, seed, pre, state, data, timings)
    return RunOutput(variant, int(seed), result, timings, state.log_csv())


def describe_run(cfg: ExperimentConfig, variant: str, toggles: ToggleSection, seed: int, pre: Pretrained,
                 state: TrainState, data: DataBundle, timings: dict | None = None) -> dict:
    """Deterministic result record of one run (no wall-clock values)."""
    result = {
        "variant": variant,
        "seed": int(seed),
        "toggles": toggles.model_dump(),
        "epochs": cfg.adversarial.epochs,
        "meta_iterations": len(pre.meta_losses),
        "final_meta_loss": pre.meta_losses[-1] if pre.meta_losses else None,
        "pre_adapt_accuracy": evaluate(pre.state, data[TARGET, "test"], TARGET).report.accuracy,
        "source_test_accuracy": evaluate(state, data[SOURCE, "test"], SOURCE).report.accuracy,
        "embeddings": state.embeddings.to_dict(),
    }
    result.update(evaluate_state(cfg, state, data, timings, seed))
    return result


def variant_name(toggles: ToggleSection) -> str:
    off = [t for t in TOGGLES if not getattr(toggles, t)]
    if not off:
        return "full"
    return "no_" + "_".join(off) if len(off) == 1 else "custom_no_" + "_".join(off)


# ------------------------------------------------------------ persistence


def state_files(prefix: Path) -> tuple[Path, Path]:
    return prefix.with_suffix(".npz"), prefix.with_suffix(".json")


def encode_state(state: TrainState, toggles: ToggleSection, extra: dict | None = None) -> tuple[bytes, str]:
    buf = io.BytesIO()
    np.savez(buf, **state.to_arrays())
    meta = state.meta_dict()
    meta["toggles"] = toggles.model_dump()
    meta.update(extra or {})
    return buf.getvalue(), json.dumps(meta, sort_keys=True, indent=1)


def decode_state(cfg: ExperimentConfig, npz_bytes: bytes, meta_text: str) -> tuple[TrainState, ToggleSection, dict]:
    meta = json.loads(meta_text)
    toggles = ToggleSection(**meta["toggles"])
    model = AmdtlModel(cfg.model_config_for(toggles))
    with np.load(io.BytesIO(npz_bytes)) as z:
        arrays = {k: z[k] for k in z.files}
    return TrainState.restore(model, arrays, meta), toggles, meta
