import json
from pathlib import Path

import numpy as np
import pytest

from amdtl.config import ToggleSection, load_config
from amdtl.models import AmdtlModel
from amdtl.pipeline import (SOURCE, TARGET, StageError, decode_state, encode_state, generate_sets, make_bundle,
                            pretrain, run_variant, stage_seed, variant_name, variants)

SMOKE = load_config(Path(__file__).resolve().parents[1] / "configs" / "smoke.json")


def _cfg(**sections):
    data = json.loads(SMOKE.to_json())
    for name, values in sections.items():
        data[name].update(values)
    return type(SMOKE).model_validate(data)


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(3, "init") == stage_seed(3, "init")
    seeds = {stage_seed(s, tag) for s in range(3) for tag in ("init", "data/source", "data/target")}
    assert len(seeds) == 9


def test_variant_list_and_names():
    t = ToggleSection()
    names = [n for n, _ in variants(t)]
    assert names == ["full", "no_meta", "no_adversarial", "no_embeddings", "no_dynamic_adjust", "no_attention"]
    assert all(variant_name(v) == n for n, v in variants(t))
    assert [n for n, _ in variants(t, ["attention"])] == ["full", "no_attention"]
    assert variant_name(t.without("meta").without("attention")) == "custom_no_meta_attention"
    with pytest.raises(ValueError):
        variants(t.without("meta"), ["meta"])
    with pytest.raises(ValueError):
        variants(t, ["meta", "meta"])


def test_bundle_is_standardized_by_source_train():
    cfg = _cfg()
    data = make_bundle(cfg, generate_sets(cfg, 0), 0)
    x = data[SOURCE, "train"].inputs
    np.testing.assert_allclose(x.mean(axis=0), 0.0, atol=1e-12)
    assert len(data.finetune) == cfg.data.n_finetune
    assert data.finetune.domain_id == TARGET


def test_skipped_stages_leave_initialization():
    cfg = _cfg(adversarial={"epochs": 0})
    toggles = ToggleSection(meta=False, embeddings=False)
    data = make_bundle(cfg, generate_sets(cfg, 1), 1)
    pre = pretrain(cfg, toggles, data, 1)
    init = AmdtlModel(cfg.model_config_for(toggles)).init_params(stage_seed(1, "init"))
    assert list(pre.state.params) == list(init)
    assert all(np.array_equal(pre.state.params[k].data, init[k].data) for k in init)
    assert pre.meta_losses == [] and pre.state.embeddings.provenance == "none"


def test_run_is_deterministic_and_state_roundtrips():
    cfg = _cfg()
    a = run_variant(cfg, "full", cfg.toggles, 0)
    b = run_variant(cfg, "full", cfg.toggles, 0)
    assert a.result == b.result and a.train_log == b.train_log
    assert set(a.timings) >= {"generate-data", "embeddings", "meta-train", "adversarial", "adapt", "evaluate"}
    assert a.result["meta_iterations"] == cfg.meta.iterations


def test_encode_decode_state():
    cfg = _cfg()
    data = make_bundle(cfg, generate_sets(cfg, 0), 0)
    state = pretrain(cfg, cfg.toggles, data, 0).state
    blob, meta = encode_state(state, cfg.toggles, {"note": 1})
    back, toggles, extra = decode_state(cfg, blob, meta)
    assert back.fingerprint() == state.fingerprint() and toggles == cfg.toggles and extra["note"] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_stage_failures_name_the_stage():
    cfg = _cfg(embeddings={"lr": 1e4})
    data = make_bundle(cfg, generate_sets(cfg, 0), 0)
    with pytest.raises(StageError, match="embeddings"):
        pretrain(cfg, cfg.toggles, data, 0)
