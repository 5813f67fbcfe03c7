import json

import numpy as np
import pytest
import torch

from conftest import tiny_model, tiny_prompt
from test_policy import finite_difference_check
from qexrl import expansion_format as fmt
from qexrl.catalog import generate_catalog, generate_workload
from qexrl.errors import ConfigError, NumericError
from qexrl.expansion_format import parse_output
from qexrl.policy import (Architecture, PolicyModel, Vocab, clone_frozen, sample_group, score,
                          sequence_logprobs)
from qexrl.reward import compute_reward
from qexrl.search import RelevanceOracle, build_index
from qexrl.trainer import (SGD, KLReference, SftExample, TrainConfig, clipped_surrogate,
                           grpo_advantages, grpo_loss, grpo_step, kl_penalty, make_inputs,
                           make_sft_corpus, prompt_for, run_grpo, run_sft, run_training,
                           sft_loss, teacher_expansions)


# -- GRPO math ---------------------------------------------------------------------

def test_advantages():
    assert grpo_advantages([1, 2, 3, 2]).tolist() == [-1, 0, 1, 0]
    assert not np.any(grpo_advantages([0.7] * 4))
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = rng.random(rng.integers(2, 9)) * 3
        a = grpo_advantages(r)
        assert abs(a.sum()) <= 1e-9
        perm = rng.permutation(len(r))
        assert np.allclose(grpo_advantages(r[perm]), a[perm], atol=0)
    with pytest.raises(ValueError):
        grpo_advantages([1.0])


def test_normalized_advantages_flag():
    a = grpo_advantages([1, 2, 3, 2], normalize=True)
    assert abs(a.sum()) <= 1e-12 and a.std() == pytest.approx(1.0)
    assert not np.any(grpo_advantages([2, 2], normalize=True))


def test_clipped_surrogate_cases():
    assert clipped_surrogate(1.5, 1.0, 0.2) == 1.2
    assert clipped_surrogate(0.5, -1.0, 0.2) == -0.8
    for a in (-2.0, 0.0, 0.3):
        for e in (0.1, 0.2, 0.5):
            assert clipped_surrogate(1.0, a, e) == a
    rng = np.random.default_rng(1)
    for _ in range(500):
        rho, a, e = rng.random() * 3 + 1e-3, rng.normal(), rng.random() * 0.9 + 0.05
        s = clipped_surrogate(rho, a, e)
        assert abs(s) <= max(abs(rho * a), (1 + e) * abs(a)) + 1e-12


def test_kl_penalty_values():
    assert kl_penalty(1.0) == 0.0
    assert kl_penalty(2.0) == pytest.approx(0.306853, abs=1e-6)
    assert kl_penalty(0.5) == pytest.approx(0.193147, abs=1e-6)
    xs = np.exp(np.linspace(-5, 5, 1001))
    assert np.all(kl_penalty(xs) >= -1e-12)
    with pytest.raises(NumericError):
        kl_penalty(0.0)


# -- full loss gradient ---------------------------------------------------------------

def _grpo_fixture(seed=0):
    model = tiny_model(seed=seed)
    old = clone_frozen(model)
    ref = clone_frozen(model)
    g = torch.Generator().manual_seed(seed + 10)
    with torch.no_grad():
        old.flat.add_(0.05 * torch.randn(old.n_params, generator=g, dtype=old.dtype))
        ref.flat.add_(0.2 * torch.randn(ref.n_params, generator=g, dtype=ref.dtype))
    prompt = tiny_prompt(model)
    rolls = sample_group(old, prompt, 2, 0.9, max_new_tokens=8, rng_seed=seed)
    seqs = [(r.prompt_ids, r.generated_ids) for r in rolls]
    with torch.no_grad():
        old_lp = sequence_logprobs(old, seqs)
        ref_lp = sequence_logprobs(ref, seqs)
    adv = torch.tensor(grpo_advantages([1.3, 0.7]), dtype=model.dtype)
    return model, seqs, old_lp, ref_lp, adv


@pytest.mark.parametrize("mode", ["OldPolicy", "FrozenSftPolicy"])
def test_full_loss_gradient_matches_finite_differences(mode):
    model, seqs, old_lp, ref_lp, adv = _grpo_fixture()
    ref = old_lp if mode == "OldPolicy" else ref_lp

    def loss(m):
        return grpo_loss(m, seqs, old_lp, ref, adv, 2, 0.2, 0.5)[0]

    assert model.n_params <= 5000
    assert finite_difference_check(model, loss, n_coords=60, seed=1) <= 1e-4


def test_zero_advantage_zero_policy_gradient():
    model, seqs, old_lp, ref_lp, _ = _grpo_fixture(1)
    zero = torch.zeros(2, dtype=model.dtype)
    from qexrl.policy import grad
    g = grad(model, lambda m: grpo_loss(m, seqs, old_lp, ref_lp, zero, 2, 0.2, 0.0)[0])
    assert not np.any(g)


def test_identity_ratio_at_step_start():
    model, seqs, _, _, adv = _grpo_fixture(2)
    with torch.no_grad():
        same = sequence_logprobs(model, seqs)
    loss, aux = grpo_loss(model, seqs, same, same, adv, 2, 0.2, 0.04)
    assert torch.all(aux["ratio"] == 1.0)
    assert torch.all(aux["kl"] == 0.0)
    assert float(loss.detach()) == pytest.approx(-float(adv.mean()), abs=1e-15)


def test_log_ratio_clamp():
    model, seqs, old_lp, _, adv = _grpo_fixture(3)
    far = old_lp - 100.0
    _, aux = grpo_loss(model, seqs, far, far, adv, 2, 0.2, 0.04, log_ratio_clamp=20.0)
    assert torch.all(torch.isfinite(aux["ratio"]))
    assert aux["clamped"] == 4


# -- config ----------------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(group_size=1), dict(eps_clip=0.0), dict(eps_clip=1.0),
                                dict(beta=-0.1), dict(temperature=0), dict(old_refresh=0)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_config_defaults():
    c = TrainConfig()
    assert (c.group_size, c.temperature, c.lam, c.beta, c.eps_clip, c.eps_reward) == (
        4, 0.9, 0.1, 0.04, 0.2, 1e-4)
    assert c.kl_reference_mode is KLReference.OldPolicy
    assert not c.normalize_advantages
    assert TrainConfig(kl_reference_mode="FrozenSftPolicy").kl_reference_mode is KLReference.FrozenSftPolicy
    assert c.digest() == TrainConfig().digest() != TrainConfig(beta=0.05).digest()


# -- teacher and SFT ------------------------------------------------------------------

def test_sft_targets_valid_and_deterministic(catalog, workload, index):
    a = make_sft_corpus(catalog, workload, index, 200, seed=3)
    assert a == make_sft_corpus(catalog, workload, index, 200, seed=3)
    for ex in a:
        assert ex.target[-1] == fmt.EOS
        p = parse_output(fmt.detokenize(ex.target), catalog.vocabulary)
        assert p.valid, p.violation
        assert len(ex.prompt) <= 160
    with pytest.raises(ConfigError):
        make_sft_corpus(catalog, workload, index, 0, seed=0)


def test_teacher_grows_recall(catalog, workload, index, oracle):
    grew = 0
    for q, intent in workload:
        ctx, _ = prompt_for(q, catalog, index)
        _, exps = teacher_expansions(q, ctx, catalog, 3)
        rb = compute_reward(index, oracle, intent, fmt.ExpansionSet(q, tuple(exps)))
        grew += rb.r_size > 1
    assert grew >= 0.8 * len(workload)


def test_teacher_uses_category_values(catalog, index):
    q = (catalog.categories[0],)
    ctx, _ = prompt_for(q, catalog, index)
    think, exps = teacher_expansions(q, ctx, catalog, 2)
    assert think[0] == q[0]
    allowed = {v for vs in catalog.attribute_schema.values() for v in vs}
    for e in exps:
        assert e[0] in allowed and e[1:] == q


def _tiny_corpus(model, n=1):
    prompt = tuple(model.vocab.decode(tiny_prompt(model)))
    target = tuple(fmt.output_tokens(["red"], [("blue", "shoe")]) + [fmt.EOS])
    return [SftExample(prompt, target)] * n


def test_sft_overfits_single_example():
    m = tiny_model(seed=0, dtype=torch.float32, scale=0.1)
    corpus = _tiny_corpus(m)
    curve = run_sft(m, corpus, epochs=300, lr=0.1, batch_size=1, momentum=0.9, seed=0,
                    max_grad_norm=1.0)
    assert curve[-1] < 0.05


def test_sft_lr_zero_and_first_loss():
    m = tiny_model(seed=0)
    corpus = _tiny_corpus(m, 3)
    ex = corpus[0]
    want = -np.mean(score(m, m.vocab.encode(ex.prompt), m.vocab.encode(ex.target)))
    before = m.parameters_numpy()
    curve = run_sft(m, corpus, epochs=1, lr=0.0, batch_size=3, momentum=0.0)
    assert np.array_equal(before, m.parameters_numpy())
    assert curve[0] == pytest.approx(want, abs=1e-9)
    assert float(sft_loss(m, corpus[:1]).detach()) == pytest.approx(want, abs=1e-9)


def test_sgd_momentum_and_clip():
    m = tiny_model()
    opt = SGD(m, lr=0.5, momentum=0.9, max_grad_norm=1.0)
    x0 = m.parameters_numpy()
    g = torch.zeros(m.n_params, dtype=m.dtype)
    g[0] = 10.0
    opt.step(g)
    assert m.parameters_numpy()[0] == pytest.approx(x0[0] - 0.5)
    opt.step(g)
    assert m.parameters_numpy()[0] == pytest.approx(x0[0] - 0.5 - 0.5 * 1.9)


# -- GRPO on the small catalog ---------------------------------------------------------

@pytest.fixture(scope="module")
def small_env():
    cat = generate_catalog(3, n_items=120)
    wl = generate_workload(cat, 1, 12)
    idx = build_index(cat)
    orc = RelevanceOracle(cat)
    v = Vocab.from_words(cat.vocabulary)
    arch = Architecture(len(v), d_model=16, n_layers=1, n_heads=2, d_ff=32, context_length=256)
    return cat, wl, idx, orc, v, arch


def _small_cfg(**kw):
    base = dict(steps=2, batch_size=2, sft_examples=8, max_new_tokens=24, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_beta_zero_zero_advantage_leaves_params(small_env):
    cat, wl, idx, orc, v, arch = small_env
    m = PolicyModel.init(arch, v, seed=0)
    with torch.no_grad():
        # every rollout is a bare <eos>: invalid, reward 0, advantage 0
        m.p("b_out")[v.eos_id] = 60.0
    cfg = _small_cfg(beta=0.0, steps=1)
    inputs = make_inputs(cat, wl, idx)
    before = m.parameters_numpy()
    metrics = run_grpo(m, cfg, inputs, idx, orc, cat.vocabulary)
    assert metrics[0]["valid_frac"] == 0.0 and metrics[0]["mean_reward"] == 0.0
    assert np.array_equal(before, m.parameters_numpy())


def test_step_metrics_and_group_invariants(small_env):
    cat, wl, idx, orc, v, arch = small_env
    m = PolicyModel.init(arch, v, seed=0)
    cfg = _small_cfg()
    inputs = make_inputs(cat, wl, idx)[:2]
    old = clone_frozen(m)
    metrics, groups = grpo_step(m, old, None, inputs, cfg, idx, orc, cat.vocabulary,
                                SGD(m, cfg.lr), step=0)
    assert set(metrics) == {"step", "mean_reward", "valid_frac", "mean_kl", "clip_frac", "loss"}
    assert len(groups) == 2
    for g in groups:
        assert len(g.rollouts) == cfg.group_size
        assert abs(g.advantages.sum()) <= 1e-9
        assert np.all(g.ratios > 0) and np.all(g.kl_ratios > 0)
        # old == model at step start, so every ratio is exactly one
        assert np.all(g.ratios == 1.0)
        for p, r in zip(g.parsed, g.rewards):
            if not p.valid:
                assert r == 0.0


def test_zero_steps_returns_input_model(small_env):
    cat, wl, idx, orc, v, arch = small_env
    m = PolicyModel.init(arch, v, seed=0)
    before = m.parameters_numpy()
    res = run_training(_small_cfg(steps=0, sft=False), cat, wl, idx, orc, m)
    assert res.metrics == [] and np.array_equal(before, res.model.parameters_numpy())


def test_training_is_deterministic(small_env, tmp_path):
    cat, wl, idx, orc, v, arch = small_env
    logs = []
    for run in ("a", "b"):
        m = PolicyModel.init(arch, v, seed=0)
        out = tmp_path / run
        run_training(_small_cfg(), cat, wl, idx, orc, m, out_dir=out)
        logs.append((out / "metrics.jsonl").read_bytes())
        assert (out / "policy-step1.ckpt").exists()
        state = json.loads((out / "policy-step2.state.json").read_text())
        assert state["step"] == 2 and state["config_hash"] == _small_cfg().digest()
    assert logs[0] == logs[1]
    assert len(logs[0].splitlines()) == 2


def test_frozen_reference_mode_runs(small_env):
    cat, wl, idx, orc, v, arch = small_env
    m = PolicyModel.init(arch, v, seed=0)
    res = run_training(_small_cfg(kl_reference_mode="FrozenSftPolicy"), cat, wl, idx, orc, m)
    assert res.sft_model is not None and len(res.metrics) == 2
