"""Supervised warm-up followed by GRPO against live search feedback."""
from __future__ import annotations

import collections
import enum
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import expansion_format as fmt
from .catalog import Catalog, Intent, QueryWorkload
from .errors import ConfigError, NumericError
from .policy import (PolicyModel, clone_frozen, sample_group, save_checkpoint,
                     sequence_logprobs, token_logprobs)
from .reward import compute_reward
from .search import Index, RelevanceOracle, search

log = logging.getLogger(__name__)


class KLReference(str, enum.Enum):
    OldPolicy = "OldPolicy"
    FrozenSftPolicy = "FrozenSftPolicy"


@dataclass
class TrainConfig:
    group_size: int = 4
    temperature: float = 0.9
    lam: float = 0.1
    eps_reward: float = 1e-4
    eps_clip: float = 0.2
    beta: float = 0.04
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    steps: int = 300
    seed: int = 0
    kl_reference_mode: KLReference = KLReference.OldPolicy
    normalize_advantages: bool = False
    old_refresh: int = 1
    log_ratio_clamp: float = 20.0
    max_new_tokens: int = 96
    k_rel: int = 10
    k_size: int = 100
    max_context_items: int = 10
    max_input_tokens: int = 160
    sft: bool = True
    sft_examples: int = 1000
    sft_epochs: int = 1
    sft_lr: float = 0.03
    sft_batch_size: int = 1
    max_grad_norm: float = 1.0
    checkpoint_every: int = 100

    def __post_init__(self):
        self.kl_reference_mode = KLReference(self.kl_reference_mode)
        self.validate()

    def validate(self):
        if self.group_size < 2:
            raise ConfigError(f"group_size must be >= 2, got {self.group_size}")
        if not 0 < self.eps_clip < 1:
            raise ConfigError(f"eps_clip must be in (0, 1), got {self.eps_clip}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.lam < 0 or self.eps_reward <= 0:
            raise ConfigError("need lam >= 0 and eps_reward > 0")
        if self.batch_size < 1 or self.steps < 0 or self.old_refresh < 1:
            raise ConfigError("batch_size >= 1, steps >= 0, old_refresh >= 1 required")

    def to_dict(self):
        d = asdict(self)
        d["kl_reference_mode"] = self.kl_reference_mode.value
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- GRPO math -------------------------------------------------------------------

def grpo_advantages(rewards, normalize: bool = False) -> np.ndarray:
    """r_i minus the group mean; optional division by the group std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    adv = r - r.mean()
    if normalize:
        sd = r.std()
        adv = adv / sd if sd > 0 else np.zeros_like(adv)
    return adv


def clipped_surrogate(ratio, advantage, eps_clip: float):
    if np.any(np.asarray(ratio) <= 0):
        raise ValueError("ratio must be positive")
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip)
    return np.minimum(ratio * advantage, clipped * advantage)


def kl_penalty(r_kl):
    r = np.asarray(r_kl, dtype=np.float64)
    if np.any(r <= 0):
        raise NumericError(f"KL ratio must be positive, got {r_kl}")
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


# -- synthetic teacher -------------------------------------------------------------

@dataclass(frozen=True)
class SftExample:
    prompt: tuple[str, ...]
    target: tuple[str, ...]
    query: tuple[str, ...] = ()


def query_category(query, catalog: Catalog):
    cats = set(catalog.categories)
    for t in query:
        if t in cats:
            return t
    return None


def teacher_expansions(query, context: fmt.PromptContext, catalog: Catalog, n: int):
    """Prefix the query with the commonest unseen attribute values among same-category context items."""
    cat = query_category(query, catalog)
    counts = collections.Counter()
    for title, attrs in context.context_items:
        if cat is None or cat in title:
            for name, v in attrs:
                if v not in query:
                    counts[name, v] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0][1]))
    picked = [nv for nv, _ in ranked[:n]]
    # the reasoning names the attribute behind each added value
    think = ([cat] if cat else []) + [t for nv in picked for t in nv]
    return think, [(v, *query) for _, v in picked]


def prompt_for(query, catalog, index, max_items=fmt.MAX_CONTEXT_ITEMS, max_input_tokens=160):
    result = search(index, query, max_items)
    return fmt.build_prompt(query, result, catalog, max_items, max_input_tokens)


def make_sft_corpus(catalog: Catalog, workload: QueryWorkload, index: Index, n: int, seed: int,
                    max_expansions: int = 3, max_input_tokens: int = 160) -> list[SftExample]:
    if n < 1:
        raise ConfigError("SFT corpus size must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        q = workload.queries[int(rng.integers(len(workload)))]
        ctx, prompt = prompt_for(q, catalog, index, max_input_tokens=max_input_tokens)
        m = int(rng.integers(1, max_expansions + 1))
        think, exps = teacher_expansions(q, ctx, catalog, m)
        target = fmt.output_tokens(think, exps) + [fmt.EOS]
        out.append(SftExample(tuple(prompt), tuple(target), tuple(q)))
    return out


# -- optimizer ---------------------------------------------------------------------

class SGD:
    """Plain SGD with optional heavy-ball momentum on the flat parameter vector."""

    def __init__(self, model: PolicyModel, lr: float, momentum: float = 0.0,
                 max_grad_norm: float | None = None):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.buf = None

    def step(self, g: torch.Tensor):
        if self.max_grad_norm:
            norm = float(g.norm())
            if norm > self.max_grad_norm:
                g = g * (self.max_grad_norm / norm)
        if self.momentum:
            self.buf = g.clone() if self.buf is None else self.buf.mul_(self.momentum).add_(g)
            g = self.buf
        with torch.no_grad():
            self.model.flat.sub_(self.lr * g)

    def state(self):
        return None if self.buf is None else self.buf.clone()


def _backward(model, loss):
    model.flat.grad = None
    if not torch.isfinite(loss):
        return None
    loss.backward()
    g = model.flat.grad
    model.flat.grad = None
    if g is None:
        g = torch.zeros_like(model.flat)
    return g.detach()


# -- supervised warm-up --------------------------------------------------------------

def sft_loss(model: PolicyModel, batch) -> torch.Tensor:
    """Mean negative log-probability over every target token in the batch."""
    v = model.vocab
    seqs = [(v.encode(ex.prompt), v.encode(ex.target)) for ex in batch]
    lps = token_logprobs(model, seqs)
    return -torch.cat(lps).mean()


def run_sft(model: PolicyModel, corpus, epochs: int = 1, lr: float = 0.1, batch_size: int = 4,
            momentum: float = 0.9, seed: int = 0, max_grad_norm: float | None = None) -> list[float]:
    """Train in place; returns the per-batch loss curve."""
    if not corpus:
        raise ConfigError("SFT corpus is empty")
    opt = SGD(model, lr, momentum, max_grad_norm)
    rng = np.random.default_rng(seed)
    curve = []
    for _ in range(epochs):
        order = rng.permutation(len(corpus))
        for s in range(0, len(order), batch_size):
            batch = [corpus[int(i)] for i in order[s:s + batch_size]]
            loss = sft_loss(model, batch)
            g = _backward(model, loss)
            if g is None or not torch.all(torch.isfinite(g)):
                raise NumericError(f"non-finite SFT loss/gradient at batch {len(curve)}",
                                   payload=[asdict(ex) for ex in batch])
            opt.step(g)
            curve.append(float(loss.detach()))
    return curve


# -- GRPO ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainInput:
    query: tuple[str, ...]
    intent: Intent
    prompt: tuple[str, ...]


def make_inputs(catalog, workload, index, max_items=fmt.MAX_CONTEXT_ITEMS, max_input_tokens=160):
    out = []
    for q, intent in workload:
        _, prompt = prompt_for(q, catalog, index, max_items, max_input_tokens)
        out.append(TrainInput(tuple(q), intent, tuple(prompt)))
    return out


@dataclass
class GrpoGroup:
    input: TrainInput
    rollouts: list
    parsed: list
    rewards: np.ndarray
    advantages: np.ndarray
    ratios: np.ndarray = field(default=None)
    kl_ratios: np.ndarray = field(default=None)

    def to_dict(self):
        return {"query": list(self.input.query), "prompt": list(self.input.prompt),
                "generated": [r.generated_ids for r in self.rollouts],
                "rewards": self.rewards.tolist(), "advantages": self.advantages.tolist()}


def decode_rollout(model: PolicyModel, rollout, vocabulary, cfg: TrainConfig | None = None):
    text = fmt.detokenize(model.vocab.decode(rollout.generated_ids))
    return fmt.parse_output(text, vocabulary)


def grpo_loss(model: PolicyModel, seqs, old_logp: torch.Tensor, ref_logp: torch.Tensor,
              advantages: torch.Tensor, group_size: int, eps_clip: float, beta: float,
              log_ratio_clamp: float = 20.0):
    """Clipped surrogate plus KL penalty, averaged per group then over groups.

    Returns (loss, aux) where aux holds detached ratios and KL values.
    """
    new = sequence_logprobs(model, seqs)
    log_ratio = torch.clamp(new - old_logp, -log_ratio_clamp, log_ratio_clamp)
    ratio = torch.exp(log_ratio)
    adv = advantages.to(new.dtype)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * adv
    surrogate = torch.minimum(unclipped, clipped)
    log_kl = torch.clamp(new - ref_logp, -log_ratio_clamp, log_ratio_clamp)
    kl = torch.exp(log_kl) - log_kl - 1.0
    G = len(seqs) // group_size
    policy_term = surrogate.view(G, group_size).mean(1).mean()
    kl_term = kl.view(G, group_size).mean(1).mean()
    loss = -policy_term + beta * kl_term
    with torch.no_grad():
        aux = {
            "ratio": ratio.detach(),
            "kl_ratio": torch.exp(log_kl).detach(),
            "kl": kl.detach(),
            "clipped": (clipped < unclipped).detach(),
            "clamped": int(((new - old_logp).abs() > log_ratio_clamp).sum()
                           + ((new - ref_logp).abs() > log_ratio_clamp).sum()),
        }
    return loss, aux


def collect_groups(sampler: PolicyModel, inputs, cfg: TrainConfig, index, oracle, vocabulary,
                   seed_base) -> list[GrpoGroup]:
    groups = []
    for b, inp in enumerate(inputs):
        prompt_ids = sampler.vocab.encode(inp.prompt)
        rollouts = sample_group(sampler, prompt_ids, cfg.group_size, cfg.temperature,
                                cfg.max_new_tokens, rng_seed=_seed(seed_base, b))
        parsed = [decode_rollout(sampler, r, vocabulary) for r in rollouts]
        rewards = np.array([compute_reward(index, oracle, inp.intent, p, inp.query, cfg.lam,
                                           cfg.eps_reward, cfg.k_rel, cfg.k_size).total
                            for p in parsed])
        adv = grpo_advantages(rewards, cfg.normalize_advantages)
        groups.append(GrpoGroup(inp, rollouts, parsed, rewards, adv))
    return groups


def _seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & ((1 << 63) - 1)


def grpo_step(model: PolicyModel, old_model: PolicyModel, kl_reference: PolicyModel | None,
              inputs, cfg: TrainConfig, index, oracle, vocabulary, optimizer: SGD,
              step: int = 0):
    """Sample, reward, and take one gradient step.  Returns the step metrics and groups."""
    groups = collect_groups(old_model, inputs, cfg, index, oracle, vocabulary,
                            (cfg.seed, "rollout", step))
    v = model.vocab
    seqs = [(r.prompt_ids, r.generated_ids) for g in groups for r in g.rollouts]
    adv = torch.tensor(np.concatenate([g.advantages for g in groups]), dtype=model.dtype)
    with torch.no_grad():
        old_logp = sequence_logprobs(old_model, seqs)
        if cfg.kl_reference_mode is KLReference.OldPolicy or kl_reference is None:
            ref_logp = old_logp
        else:
            ref_logp = sequence_logprobs(kl_reference, seqs)
    loss, aux = grpo_loss(model, seqs, old_logp, ref_logp, adv, cfg.group_size, cfg.eps_clip,
                          cfg.beta, cfg.log_ratio_clamp)
    g = _backward(model, loss)
    if g is None or not torch.all(torch.isfinite(g)):
        raise NumericError(f"non-finite GRPO loss/gradient at step {step}",
                           payload=[grp.to_dict() for grp in groups])
    optimizer.step(g)
    if aux["clamped"]:
        log.warning("step %d: log-ratio clamp active on %d values", step, aux["clamped"])
    n = cfg.group_size
    for i, grp in enumerate(groups):
        grp.ratios = aux["ratio"][i * n:(i + 1) * n].double().numpy()
        grp.kl_ratios = aux["kl_ratio"][i * n:(i + 1) * n].double().numpy()
    rewards = np.concatenate([grp.rewards for grp in groups])
    valid = [p.valid for grp in groups for p in grp.parsed]
    metrics = {
        "step": step,
        "mean_reward": float(rewards.mean()),
        "valid_frac": float(np.mean(valid)),
        "mean_kl": float(aux["kl"].double().mean()),
        "clip_frac": float(aux["clipped"].double().mean()),
        "loss": float(loss.detach()),
    }
    return metrics, groups


@dataclass
class TrainingResult:
    model: PolicyModel
    sft_model: PolicyModel | None
    metrics: list[dict]
    sft_curve: list[float]


def run_grpo(model: PolicyModel, cfg: TrainConfig, inputs, index, oracle, vocabulary,
             kl_reference: PolicyModel | None = None, out_dir=None, on_step=None) -> list[dict]:
    """GRPO for ``cfg.steps`` steps, updating ``model`` in place."""
    opt = SGD(model, cfg.lr, cfg.momentum, cfg.max_grad_norm)
    if kl_reference is None and cfg.kl_reference_mode is KLReference.FrozenSftPolicy:
        kl_reference = clone_frozen(model)
    metrics = []
    old = None
    out = Path(out_dir) if out_dir else None
    mlog = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        mlog = open(out / "metrics.jsonl", "w", encoding="utf-8")
    try:
        for step in range(cfg.steps):
            if old is None or step % cfg.old_refresh == 0:
                old = clone_frozen(model)
            rng = np.random.default_rng(_seed(cfg.seed, "batch", step))
            pick = rng.choice(len(inputs), size=min(cfg.batch_size, len(inputs)), replace=False)
            batch = [inputs[int(i)] for i in pick]
            m, _ = grpo_step(model, old, kl_reference, batch, cfg, index, oracle, vocabulary,
                             opt, step)
            metrics.append(m)
            if mlog:
                mlog.write(json.dumps(m) + "\n")
                mlog.flush()
            if on_step:
                on_step(m)
            if out and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                _write_checkpoint(model, cfg, out, step + 1)
    finally:
        if mlog:
            mlog.close()
    return metrics


def _write_checkpoint(model, cfg, out, step):
    save_checkpoint(model, out / f"policy-step{step}.ckpt")
    state = {"step": step, "config_hash": cfg.digest(),
             "rng": {"batch": _seed(cfg.seed, "batch", step),
                     "rollout_base": [cfg.seed, "rollout", step]}}
    (out / f"policy-step{step}.state.json").write_text(json.dumps(state) + "\n")


def run_training(cfg: TrainConfig, catalog: Catalog, workload: QueryWorkload, index: Index,
                 oracle: RelevanceOracle, model: PolicyModel, out_dir=None,
                 on_step=None) -> TrainingResult:
    """SFT warm-up (unless ``cfg.sft`` is off) then GRPO; ``model`` is trained in place."""
    sft_curve = []
    sft_model = None
    if cfg.sft and cfg.sft_examples > 0:
        corpus = make_sft_corpus(catalog, workload, index, cfg.sft_examples, cfg.seed,
                                 max_input_tokens=cfg.max_input_tokens)
        sft_curve = run_sft(model, corpus, cfg.sft_epochs, cfg.sft_lr, cfg.sft_batch_size,
                            cfg.momentum, cfg.seed, cfg.max_grad_norm)
        sft_model = clone_frozen(model)
        if out_dir:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(out_dir) / "policy-sft.ckpt")
    inputs = make_inputs(catalog, workload, index, cfg.max_context_items, cfg.max_input_tokens)
    metrics = run_grpo(model, cfg, inputs, index, oracle, catalog.vocabulary,
                       kl_reference=sft_model, out_dir=out_dir, on_step=on_step)
    return TrainingResult(model, sft_model, metrics, sft_curve)
