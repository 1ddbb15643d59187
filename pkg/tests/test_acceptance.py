"""End-to-end acceptance checks. Each test records one PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from amdtl import autodiff as ad
from amdtl.adversarial import AdvConfig, TrainState, adversarial_train, evaluate
from amdtl.autodiff import ParamSet, Tensor
from amdtl.cli import main
from amdtl.config import TOGGLES, load_config
from amdtl.embeddings import AutoencoderNets, EmbeddingTable
from amdtl.evaluation import AttackSpec, auc_mann_whitney, confusion, fgsm, metrics, pgd
from amdtl.meta import MetaConfig, adapted_accuracy, meta_gradient, meta_train
from amdtl.models import (AdaBnState, AmdtlModel, CondBnMaps, DomainEmbedding, Mlp, MlpSpec, ModelConfig, ada_bn,
                          cond_bn, forward_classifier, forward_discriminator, param_groups)
from amdtl.objectives import (adversarial_feature_loss, cross_entropy, discriminator_loss, embedding_loss,
                              reconstruction_loss, total_loss)
from amdtl.pipeline import TARGET, adapt, generate_sets, make_bundle, pretrain
from amdtl.synth import (DomainSpec, Episode, LabeledSet, Standardizer, TaskFamilySpec, TaskSampler, bayes_accuracy,
                         generate_domain, split)

from conftest import ACCEPTANCE_LINES

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def record(n: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --------------------------------------------------------------- shared runs


@pytest.fixture(scope="module")
def benchmark_runs(tmp_path_factory):
    """The ablation sweep on the benchmark config, run once through the CLI."""
    out = tmp_path_factory.mktemp("benchmark")
    start = time.perf_counter()
    code = main(["ablate", "--config", str(CONFIGS / "benchmark.json"), "--out", str(out)])
    assert code == 0
    doc = json.loads((out / "results.json").read_text())
    return doc, time.perf_counter() - start


# ------------------------------------------------------------- 1: gradients


def _random_problem(rng):
    d, k = int(rng.integers(2, 4)), int(rng.integers(2, 4))
    f_net = Mlp(MlpSpec((d, int(rng.integers(3, 8)), int(rng.integers(2, 5))), output_head="relu"), "F.")
    f_dim = f_net.spec.layer_widths[-1]
    c_net = Mlp(MlpSpec((f_dim, k)), "C.")
    d_net = Mlp(MlpSpec((f_dim, int(rng.integers(2, 5)), 1)), "D.")
    ae = AutoencoderNets(d, int(rng.integers(2, 4)), (int(rng.integers(3, 6)),))
    seeds = rng.integers(0, 2**31, size=4)
    params = f_net.init(seeds[0]).merged(c_net.init(seeds[1])).merged(d_net.init(seeds[2]))
    # biases start at zero; perturb them so relu kinks are not hit at the init
    params = ParamSet((n, Tensor(v.data + 0.1 * rng.standard_normal(v.shape))) for n, v in params.items())
    e_params = ParamSet((n, Tensor(v.data + 0.1 * rng.standard_normal(v.shape)))
                        for n, v in ae.init(seeds[3]).items())
    xs, xt = rng.normal(size=(6, d)), rng.normal(size=(5, d)) + 1.0
    ys = np.eye(k)[rng.integers(0, k, 6)]
    head = rng.normal(size=(ae.code_dim, 1))
    lam = float(rng.uniform(0.05, 1.0))

    # the probability clamp makes the domain losses non-differentiable at saturated logits
    logits = np.vstack([d_net(params, f_net(params, Tensor(x))).data for x in (xs, xt)])
    if np.abs(logits).max() > 15:
        return None, 0

    def domain_terms(p):
        hs, ht = f_net(p, Tensor(xs)), f_net(p, Tensor(xt))
        ds, dt = forward_discriminator(d_net, p, hs), forward_discriminator(d_net, p, ht)
        return cross_entropy(forward_classifier(c_net, p, hs), ys), ds, dt

    def l_c(p):
        return domain_terms(p)[0].scalar

    def l_d(p):
        return discriminator_loss(*domain_terms(p)[1:]).scalar

    def l_f(p):
        return adversarial_feature_loss(*domain_terms(p)[1:]).scalar

    def l_total(p):
        lc, ds, dt = domain_terms(p)
        return total_loss(lc, adversarial_feature_loss(ds, dt), lam).scalar

    def l_rec(p):
        return reconstruction_loss(xs, ae.reconstruct(p, Tensor(xs))).scalar

    def l_emb(p):
        rec = reconstruction_loss(xs, ae.reconstruct(p, Tensor(xs)))
        code = ae.mean_code(p, Tensor(xs))
        task = cross_entropy(ad.softmax_rows(ad.concat_cols(ad.matmul(code, Tensor(head)), Tensor(np.zeros((1, 1))))),
                             np.array([[1, 0]]))
        return embedding_loss(rec, task, lam).scalar

    return [("classification", l_c, params), ("discriminator", l_d, params), ("feature", l_f, params),
            ("total", l_total, params), ("reconstruction", l_rec, e_params), ("embedding", l_emb, e_params)], params.num_values() + e_params.num_values()


def test_gradient_correctness():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst, largest, redrawn, done = 0.0, 0, 0, 0
    while done < 50:
        losses, size = _random_problem(rng)
        if losses is None:
            redrawn += 1
            continue
        done += 1
        largest = max(largest, size)
        for _, f, params in losses:
            worst = max(worst, ad.grad_check(f, params, h=1e-5))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 30 and largest <= 300
    record(1, ok, f"worst rel err {worst:.2e} over 50 nets x 6 losses (max {largest} params, {redrawn} saturated draws redrawn) in {elapsed:.1f}s")


# --------------------------------------------------------- 2: loss identity


def test_feature_loss_is_negated_discriminator_loss():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        ds = Tensor(rng.uniform(1e-6, 1 - 1e-6, size=(int(rng.integers(1, 40)), 1)))
        dt = Tensor(rng.uniform(1e-6, 1 - 1e-6, size=(int(rng.integers(1, 40)), 1)))
        worst = max(worst, abs(adversarial_feature_loss(ds, dt).value + discriminator_loss(ds, dt).value))
    record(2, worst <= 1e-12, f"max |feature loss + discriminator loss| = {worst:.1e} over 1000 batches")


# ------------------------------------------------------ 3: exact meta-gradient


def test_exact_meta_gradient():
    net = Mlp(MlpSpec((4, 4, 2)), "C.")
    theta = net.init(3)
    assert theta.num_values() == 30
    rng = np.random.default_rng(5)
    cfg = MetaConfig(inner_lr=0.1, inner_steps=2, mode="exact")

    def loss_fn(p, b):
        return cross_entropy(forward_classifier(net, p, Tensor(b.inputs)), b.labels).scalar

    def batch(n):
        return LabeledSet(rng.normal(size=(n, 4)), np.eye(2)[rng.integers(0, 2, n)])

    episodes = [Episode(batch(8), batch(8), "t", i) for i in range(3)]
    grads, _ = meta_gradient(theta, episodes, cfg, loss_fn)

    def objective(p):
        vals = []
        for ep in episodes:
            cur = p
            for _ in range(cfg.inner_steps):
                tracked = ad.Tape().watch(cur)
                g = ad.backward(loss_fn(tracked, ep.support), tracked)
                cur = ParamSet((k, Tensor(v.data - cfg.inner_lr * g[k].data)) for k, v in cur.items())
            vals.append(loss_fn(cur, ep.query).item())
        return float(np.mean(vals))

    h, worst = 1e-5, 0.0
    for name, value in theta.items():
        flat = value.data.reshape(-1)
        for j in range(flat.size):
            plus, minus = flat.copy(), flat.copy()
            plus[j] += h
            minus[j] -= h
            num = (objective(theta.merged({name: Tensor(plus.reshape(value.shape))}))
                   - objective(theta.merged({name: Tensor(minus.reshape(value.shape))}))) / (2 * h)
            a = grads[name].reshape(-1)[j]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))

    alpha, w0 = 0.15, np.array([1.3, -0.4])
    quad = lambda p, b: ad.reduce_sum(ad.mul(p["w"], p["w"]))
    qg, _ = meta_gradient(ParamSet(w=Tensor(w0)), episodes[:1], MetaConfig(inner_lr=alpha, mode="exact"), quad)
    quad_err = float(np.max(np.abs(qg["w"] - 2 * (1 - 2 * alpha) ** 2 * w0)))
    record(3, worst <= 1e-3 and quad_err <= 1e-12,
           f"30-param rel err {worst:.2e}; quadratic factor err {quad_err:.1e}")


# ---------------------------------------------------------- 4: meta-learning


def test_meta_learned_initialization_adapts_better():
    start = time.perf_counter()
    family = TaskFamilySpec(radius=1.5, spread=1.0, task_rotation=0.5, task_translation=1.0)
    model = AmdtlModel(ModelConfig(2, 2, dynamic_adjust=False, attention=False))
    e = DomainEmbedding(np.zeros(16), "task")
    cfg = MetaConfig(inner_lr=0.01, outer_lr=0.003, inner_steps=5, meta_batch_size=4)

    def probs(p, b):
        return model.classify(p, model.features(p, Tensor(b.inputs), e, "task", "train", update_stats=False))

    def loss_fn(p, b):
        return cross_entropy(probs(p, b), b.labels).scalar

    gains = []
    for seed in range(5):
        theta = param_groups(model.init_params(seed), ["F", "C"])
        trained = meta_train(theta, TaskSampler(family, seed, 10, 30), cfg, 300, loss_fn).params
        held = TaskSampler(family, 10_000 + seed, 10, 100).sample(20)
        predict = lambda p, b: probs(p, b).data
        meta_acc = np.mean([adapted_accuracy(trained, ep, cfg, loss_fn, predict) for ep in held])
        rand_acc = np.mean([adapted_accuracy(theta, ep, cfg, loss_fn, predict) for ep in held])
        gains.append(100 * (meta_acc - rand_acc))
    elapsed = time.perf_counter() - start
    gain = float(np.mean(gains))
    record(4, gain >= 5 and elapsed <= 180,
           f"mean gain {gain:.1f} points (per seed {', '.join(f'{g:.1f}' for g in gains)}) in {elapsed:.0f}s")


# ------------------------------------------------------ 5: adversarial effect


def _probe_accuracy(hs, ht, seed):
    """Fresh domain classifier on frozen features, scored on a held-out half."""
    x = np.vstack([hs, ht])
    y = np.r_[np.ones(len(hs)), np.zeros(len(ht))]
    order = np.random.default_rng(seed).permutation(len(x))
    x, y = x[order], y[order]
    n = len(x) // 2
    mu, sd = x[:n].mean(axis=0), x[:n].std(axis=0) + 1e-9
    xtr, xte = (x[:n] - mu) / sd, (x[n:] - mu) / sd
    net = Mlp(MlpSpec((x.shape[1], 16, 1)), "P.")
    p = net.init(seed)
    target = y[:n].reshape(-1, 1)
    for _ in range(300):
        tape = ad.Tape()
        q = tape.watch(p)
        out = forward_discriminator(net, q, Tensor(xtr))
        loss = ad.neg(ad.mean(ad.add(ad.mul(Tensor(target), ad.log(out)),
                                     ad.mul(Tensor(1 - target), ad.log(ad.sub(1.0, out))))))
        p = p.step(ad.backward(loss, q), 0.5)
    pred = forward_discriminator(net, p, Tensor(xte)).data.ravel() > 0.5
    return float(np.mean(pred == y[n:]))


def test_adversarial_alignment_effect():
    family = TaskFamilySpec(means=((2, 0), (-2, 0)), spread=1.0)
    aligned_ok = unaligned_ok = acc_wins = 0
    rows = []
    for seed in range(5):
        src = generate_domain(family, DomainSpec(), 600, seed * 10 + 1, "source")
        tgt = generate_domain(family, DomainSpec(translation=(0.0, 6.0)), 600, seed * 10 + 2, "target")
        s_tr, _, _ = split(src, seed=seed)
        t_tr, _, t_te = split(tgt, seed=seed + 100)
        scaler = Standardizer.fit(s_tr.inputs)
        s_tr, t_tr, t_te = scaler.apply(s_tr), scaler.apply(t_tr), scaler.apply(t_te)
        out = {}
        for lam in (0.0, 0.1):
            model = AmdtlModel(ModelConfig(2, 2, extractor_hidden=(32, 32), feature_dim=8, discriminator_hidden=(16,),
                                           dynamic_adjust=False, attention=False))
            state = TrainState(model, model.init_params(seed), EmbeddingTable.zeros(16, ["source", "target"]), seed)
            state = adversarial_train(state, s_tr, t_tr, AdvConfig(0.1, 0.2, 0.2, lam, 5, 50, 32))
            feats = [model.features(state.params, Tensor(d.inputs), state.embedding(d.domain_id), d.domain_id,
                                    "eval").data for d in (s_tr, t_tr)]
            out[lam] = (_probe_accuracy(*feats, seed), evaluate(state, t_te, "target").report.accuracy)
        aligned_ok += out[0.1][0] <= 0.75
        unaligned_ok += out[0.0][0] >= 0.9
        acc_wins += out[0.1][1] > out[0.0][1]
        rows.append(f"s{seed} probe {out[0.1][0]:.2f}/{out[0.0][0]:.2f} acc {out[0.1][1]:.3f}/{out[0.0][1]:.3f}")
    ok = aligned_ok >= 4 and unaligned_ok >= 4 and acc_wins >= 4
    record(5, ok, f"aligned probe<=0.75 on {aligned_ok}/5, unaligned probe>=0.9 on {unaligned_ok}/5, "
                  f"lambda 0.1 beats 0 on target acc {acc_wins}/5 [{'; '.join(rows)}]")


# ---------------------------------------------------------------- 6: ablation


def test_ablation_ordering(benchmark_runs):
    doc, elapsed = benchmark_runs
    variants = doc["variants"]
    full = variants["full"]["per_seed"]
    wins = {}
    for name, v in variants.items():
        if name == "full":
            continue
        wins[name] = sum(full[s]["metrics"]["accuracy"] > v["per_seed"][s]["metrics"]["accuracy"]
                         for s in v["per_seed"])
    count_ok = len(variants) == 1 + len(TOGGLES)
    ok = count_ok and all(w >= 3 for w in wins.values())
    mean_acc = {k: v["aggregate"]["accuracy"]["mean"] for k, v in variants.items()}
    detail = ", ".join(f"{k} {w}/5 (mean acc {mean_acc[k]:.3f})" for k, w in sorted(wins.items()))
    detail += f"; full mean acc {mean_acc['full']:.3f}"
    record(6, ok, f"{len(variants)} variants emitted; full wins: {detail} ({elapsed:.0f}s)")


# ------------------------------------------------------------------ 7: metrics


def _pairwise_auc(scores, positive):
    pos, neg = scores[positive], scores[~positive]
    return ((pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()) / (len(pos) * len(neg))


def test_metric_oracles():
    rng = np.random.default_rng(11)
    exact = True
    for _ in range(100):
        k, n = int(rng.integers(2, 5)), int(rng.integers(1, 80))
        truth, preds = rng.integers(0, k, n), rng.integers(0, k, n)
        r = metrics(confusion(preds, truth, k), rng.dirichlet(np.ones(k), n), truth)
        prec, rec = [], []
        for c in range(k):
            tp = sum(1 for p, t in zip(preds, truth) if p == c and t == c)
            pp = sum(1 for p in preds if p == c)
            ap = sum(1 for t in truth if t == c)
            prec.append(tp / pp if pp else 0.0)
            rec.append(tp / ap if ap else 0.0)
        p, rc = (prec[1], rec[1]) if k == 2 else (math.fsum(prec) / k, math.fsum(rec) / k)
        f1 = 2 * p * rc / (p + rc) if p + rc else 0.0
        acc = sum(1 for a, b in zip(preds, truth) if a == b) / n
        exact &= (r.accuracy, r.precision, r.recall, r.f1) == (acc, p, rc, f1)
    worst = 0.0
    for n in list(range(2, 201, 6)) + [200]:
        for levels in (2, 7, 10**6):
            positive = rng.random(n) < 0.5
            positive[:2] = (True, False)
            scores = rng.integers(0, levels, n) / levels
            worst = max(worst, abs(auc_mann_whitney(scores, positive) - _pairwise_auc(scores, positive)))
    ties = auc_mann_whitney(np.full(50, 0.3), np.arange(50) % 3 == 0)
    ok = exact and worst <= 1e-9 and ties == 0.5
    record(7, ok, f"counts exact={exact} on 100 label sets; AUC max err {worst:.1e}; all-tied AUC {ties}")


# ----------------------------------------------------------- 8: normalization


def test_normalization_contracts():
    rng = np.random.default_rng(3)
    worst_mean = worst_var = 0.0
    bitwise = True
    for _ in range(200):
        m, c = int(rng.integers(2, 64)), int(rng.integers(1, 10))
        x = rng.normal(rng.normal(0, 5, c), rng.uniform(0.04, 5, c), size=(m, c))
        if np.min(x.var(axis=0)) < 1e-3:
            continue
        state = AdaBnState.identity(c)
        out = ada_bn(Tensor(x), state, "train", "d").data
        ref = (x - x.mean(axis=0)) / np.sqrt(x.var(axis=0) + state.eps)
        worst_mean = max(worst_mean, float(np.abs(out.mean(axis=0)).max()))
        worst_var = max(worst_var, float(np.abs(out.var(axis=0) - ref.var(axis=0)).max()))
        d = int(rng.integers(1, 5))
        maps = CondBnMaps.from_params(CondBnMaps.init(d, c, "m."), "m.")
        e = DomainEmbedding(rng.normal(size=d), "d")
        cond = cond_bn(Tensor(x), maps, e, AdaBnState.identity(c), "train", "d").data
        bitwise &= np.array_equal(cond, out)
    ok = worst_mean <= 1e-9 and worst_var <= 1e-6 and bitwise
    record(8, ok, f"max |mean| {worst_mean:.1e}, max var err {worst_var:.1e}, CondBN==AdaBN bitwise {bitwise}")


# ------------------------------------------------------------------ 9: attacks


def test_attack_contracts(benchmark_runs):
    cfg = load_config(CONFIGS / "smoke.json")
    data = make_bundle(cfg, generate_sets(cfg, 0), 0)
    state = adapt(cfg, pretrain(cfg, cfg.toggles, data, 0).state, data)
    fwd = state.forward("eval", TARGET)
    test = data[TARGET, "test"]
    x, y = test.inputs, test.labels
    in_box = True
    for eps in (0.01, 0.1, 0.25, 1.0):
        for adv in (fgsm(fwd, x, y, eps), pgd(fwd, x, y, AttackSpec.default_pgd(eps))):
            in_box &= bool(np.all(adv >= x - eps) and np.all(adv <= x + eps))
    same = np.array_equal(pgd(fwd, x, y, AttackSpec("pgd", 0.2, 1, 0.2)), fgsm(fwd, x, y, 0.2))
    doc, _ = benchmark_runs
    checked = violations = 0
    for v in doc["variants"].values():
        for res in v["per_seed"].values():
            for kind in ("fgsm", "pgd"):
                curve = res["robustness"][kind]
                clean = curve[0]["accuracy"]
                for row in curve[1:]:
                    checked += 1
                    violations += row["accuracy"] > clean
    ok = in_box and same and violations == 0
    record(9, ok, f"box audit {in_box}, 1-step PGD == FGSM {same}, "
                  f"adversarial > clean in {violations}/{checked} curve points")


# ------------------------------------------------------------- 10: determinism


def test_pipeline_determinism(tmp_path):
    smoke = str(CONFIGS / "smoke.json")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in ("generate-data", "ablate"):
            assert main([cmd, "--config", smoke, "--out", str(out), "--ablate", "meta"]
                        if cmd == "ablate" else [cmd, "--config", smoke, "--out", str(out)]) == 0
    same_results = (outs[0] / "results.json").read_bytes() == (outs[1] / "results.json").read_bytes()
    csvs = sorted(p.relative_to(outs[0]) for p in outs[0].glob("seed_*/dataset.csv"))
    same_csv = bool(csvs) and all((outs[0] / p).read_bytes() == (outs[1] / p).read_bytes() for p in csvs)
    record(10, same_results and same_csv,
           f"results.json identical {same_results}; {len(csvs)} dataset CSVs identical {same_csv}")


# -------------------------------------------------------------- 11: Bayes oracle


def test_bayes_oracle(benchmark_runs):
    family = TaskFamilySpec(means=((1, 0), (-1, 0)), spread=1.0)
    acc, se = bayes_accuracy(family, DomainSpec(), 200_000, 0)
    oracle_ok = abs(acc - norm.cdf(1.0)) <= 2 * se
    cfg = load_config(CONFIGS / "benchmark.json")
    target = cfg.target.build()
    bayes, bayes_se = bayes_accuracy(cfg.task_family(), target, 200_000, 1)
    doc, _ = benchmark_runs
    worst = -np.inf
    for v in doc["variants"].values():
        for res in v["per_seed"].values():
            # test accuracy of a Bayes-level classifier has binomial spread around the oracle
            n = res["metrics"]["n_samples"]
            combined = math.sqrt(bayes_se ** 2 + bayes * (1 - bayes) / n)
            worst = max(worst, (res["metrics"]["accuracy"] - bayes) / combined)
    ok = oracle_ok and worst <= 3
    record(11, ok, f"oracle {acc:.4f} vs Phi(1) {norm.cdf(1.0):.4f} (se {se:.4f}); "
                   f"benchmark Bayes {bayes:.3f}, max trained excess {worst:.2f} SE")
