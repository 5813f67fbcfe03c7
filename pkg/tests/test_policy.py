import math
import struct

import numpy as np
import pytest
import torch

from conftest import tiny_model, tiny_prompt
from qexrl import expansion_format as fmt
from qexrl.errors import CheckpointError, InputError, NumericError
from qexrl.policy import (Architecture, PolicyModel, Vocab, checkpoint_digest, clone_frozen, grad,
                          load_checkpoint, sample, sample_from_logits, sample_group,
                          save_checkpoint, score, sequence_logprobs, token_logprobs)


def finite_difference_check(model, loss_fn, n_coords=60, h=1e-5, seed=0):
    """Worst relative error between autograd and central differences on random coordinates."""
    analytic = grad(model, loss_fn)
    base = model.parameters_numpy()
    rng = np.random.default_rng(seed)
    coords = rng.choice(model.n_params, size=n_coords, replace=False)
    worst = 0.0
    for c in coords:
        x = base.copy()
        x[c] += h
        model.set_parameters(x)
        with torch.no_grad():
            up = float(loss_fn(model))
        x[c] -= 2 * h
        model.set_parameters(x)
        with torch.no_grad():
            down = float(loss_fn(model))
        num = (up - down) / (2 * h)
        a = analytic[c]
        denom = max(abs(a), abs(num))
        if denom > 1e-7:
            worst = max(worst, abs(a - num) / denom)
        else:
            worst = max(worst, abs(a - num))
    model.set_parameters(base)
    return worst


def test_tiny_model_is_small(tiny):
    assert tiny.n_params <= 5000


def test_default_architecture_size():
    v = Vocab.from_words([f"w{i}" for i in range(200)])
    m = PolicyModel.init(Architecture(len(v)), v)
    assert 100_000 < m.n_params < 1_000_000


def test_sampling_frequencies_match_softmax():
    probs = np.array([0.2, 0.3, 0.5])
    logits = torch.tensor(np.log(probs)).repeat(100_000, 1)
    g = torch.Generator().manual_seed(123)
    draws = sample_from_logits(logits, 1.0, g).numpy()
    freq = np.bincount(draws, minlength=3) / draws.size
    assert np.all(np.abs(freq - probs) <= 0.01)


def test_temperature_sharpens():
    logits = torch.tensor(np.log([0.2, 0.3, 0.5])).repeat(50_000, 1)
    g = torch.Generator().manual_seed(5)
    freq = np.bincount(sample_from_logits(logits, 0.5, g).numpy(), minlength=3) / 50_000
    want = np.array([0.2, 0.3, 0.5]) ** 2
    want /= want.sum()
    assert np.all(np.abs(freq - want) <= 0.01)


def test_normalization_every_position(tiny):
    ids = torch.tensor([tiny_prompt(tiny) + [3, 4, 5, 6]])
    p = torch.softmax(tiny.logits(ids).double(), -1)
    assert torch.all(p > 0)
    assert torch.allclose(p.sum(-1), torch.ones(p.shape[:2], dtype=torch.float64), atol=1e-6)
    prompt = tiny_prompt(tiny)
    total = sum(math.exp(score(tiny, prompt, [t])[0]) for t in range(len(tiny.vocab)))
    assert abs(total - 1.0) <= 1e-6


def test_uniform_model_logprobs():
    m = tiny_model()
    u = PolicyModel.init(m.arch, m.vocab, seed=0, uniform_output=True, dtype=torch.float64)
    lp = score(u, tiny_prompt(u), [3, 7, 9])
    assert np.allclose(lp, -math.log(len(u.vocab)), atol=1e-12)


def test_rollout_logprobs_match_score(tiny):
    prompt = tiny_prompt(tiny)
    for r in sample_group(tiny, prompt, 4, temperature=0.9, max_new_tokens=12, rng_seed=3):
        s = score(tiny, r.prompt_ids, r.generated_ids)
        assert np.max(np.abs(s - r.per_token_logprob)) <= 1e-9
        assert r.logprob == pytest.approx(s.sum(), abs=1e-9)


def test_kv_cache_matches_full_forward(tiny):
    prompt = tiny_prompt(tiny)
    seq = prompt + [9, 3, tiny.vocab.think_close_id, 11, 12]
    ids = torch.tensor([seq])
    with torch.no_grad():
        full = tiny.logits(ids)
        cache = {}
        parts = [tiny.logits(ids[:, :len(prompt)], cache, 0)]
        for t in range(len(prompt), len(seq)):
            parts.append(tiny.logits(ids[:, t:t + 1], cache, t))
    inc = torch.cat(parts, 1)
    assert torch.allclose(full, inc, atol=1e-10)


def test_sampling_is_seeded(tiny):
    prompt = tiny_prompt(tiny)
    a = sample(tiny, prompt, 0.9, 10, rng_seed=7)
    b = sample(tiny, prompt, 0.9, 10, rng_seed=7)
    assert a.generated_ids == b.generated_ids
    g1 = sample(tiny, prompt, 1.0, 10, greedy=True, rng_seed=1)
    g2 = sample(tiny, prompt, 1.0, 10, greedy=True, rng_seed=2)
    assert g1.generated_ids == g2.generated_ids


def test_greedy_picks_argmax(tiny):
    prompt = tiny_prompt(tiny)
    g = sample(tiny, prompt, 1.0, 1, greedy=True)
    assert g.generated_ids[0] == int(np.argmax(tiny.next_token_logprobs(prompt)))


def test_stops_at_eos_and_cap():
    m = tiny_model()
    with torch.no_grad():
        m.p("b_out")[m.vocab.eos_id] = 50.0
    r = sample(m, tiny_prompt(m), 1.0, 10, rng_seed=0)
    assert r.generated_ids == [m.vocab.eos_id]
    with torch.no_grad():
        m.p("b_out")[m.vocab.eos_id] = -50.0
    assert len(sample(m, tiny_prompt(m), 1.0, 7, rng_seed=0).generated_ids) == 7


def test_input_errors(tiny):
    with pytest.raises(InputError):
        sample(tiny, [0] * 41, 1.0, 4)
    with pytest.raises(InputError):
        score(tiny, [0, 1], [len(tiny.vocab)])
    with pytest.raises(ValueError):
        sample(tiny, [0, 1], 0.0, 4)


def test_gradient_of_sequence_nll():
    m = tiny_model(seed=1)
    prompt = tiny_prompt(m)
    target = m.vocab.encode([fmt.THINK_OPEN, "red", fmt.THINK_CLOSE, fmt.ANSWER_OPEN, fmt.JSON_EMPTY,
                             fmt.ANSWER_CLOSE, fmt.EOS])

    def nll(model):
        return -sequence_logprobs(model, [(prompt, target)])[0]

    assert finite_difference_check(m, nll, n_coords=60) <= 1e-4


def test_batched_gradient_with_padding():
    m = tiny_model(seed=2)
    p = tiny_prompt(m)
    seqs = [(p, [5, 6, 7, 8, 9]), (p[1:], [10]), (p, [])]

    def loss(model):
        return -torch.cat(token_logprobs(model, seqs)).mean()

    assert finite_difference_check(m, loss, n_coords=50, seed=4) <= 1e-4


def test_constant_loss_zero_gradient(tiny):
    assert not np.any(grad(tiny, lambda m: torch.tensor(3.0)))
    assert not np.any(grad(tiny, lambda m: m.flat.sum() * 0.0))


def test_non_finite_loss_raises(tiny):
    with pytest.raises(NumericError):
        grad(tiny, lambda m: m.flat.sum() * float("inf"))


def test_clone_frozen(tiny):
    prompt, gen = tiny_prompt(tiny), [3, 4, 5]
    c = clone_frozen(tiny)
    assert np.array_equal(score(c, prompt, gen), score(tiny, prompt, gen))
    before = score(c, prompt, gen)
    with torch.no_grad():
        tiny.flat.add_(0.1)
    assert np.array_equal(score(c, prompt, gen), before)
    cc = clone_frozen(c)
    assert torch.equal(cc.flat, c.flat)


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(dtype=torch.float32)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert torch.equal(back.flat, m.flat)
    assert back.vocab == m.vocab and back.arch == m.arch
    raw = p.read_bytes()
    assert raw[:8] == b"QEXRLCKP"
    (n,) = struct.unpack_from("<Q", raw, len(raw) - 4 * m.n_params - 8)
    assert n == m.n_params
    assert checkpoint_digest(p) == checkpoint_digest(p)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError, match="nope.ckpt"):
        load_checkpoint(tmp_path / "nope.ckpt")
    m = tiny_model(dtype=torch.float32)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    raw = bytearray(p.read_bytes())
    raw[8:12] = struct.pack("<I", 99)
    bad = tmp_path / "v.ckpt"
    bad.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(bad)
    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)
    junk = tmp_path / "j.ckpt"
    junk.write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(junk)


def test_prompt_length_does_not_shift_response_positions(tiny):
    """Response positions count from <respond>, so padding the prompt's front is harmless."""
    short = tiny_prompt(tiny)
    long_ = tiny.vocab.encode([fmt.TASK, "big", "big"]) + short[2:]
    seg_s, pos_s = tiny._positions(torch.tensor([short + [3, 4]]))
    seg_l, pos_l = tiny._positions(torch.tensor([long_ + [3, 4]]))
    assert pos_s[0, -2:].tolist() == pos_l[0, -2:].tolist() == [0, 1]
    assert seg_s[0, -1] == 1 and seg_s[0, 0] == 0
