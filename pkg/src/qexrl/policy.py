"""Tiny causal transformer policy over a closed word-level vocabulary.

All weights live in a single flat tensor; named segments are views into it.
That keeps checkpoints, cloning and finite-difference checks trivial.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import expansion_format as fmt
from .errors import CheckpointError, InputError, NumericError

CHECKPOINT_MAGIC = b"QEXRLCKP"
CHECKPOINT_VERSION = 1

# prompt, reasoning, answer, anything after the answer
N_SEGMENTS = 4


class Vocab:
    """Token <-> id mapping; special tokens first, then sorted word tokens."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in fmt.SPECIAL_TOKENS:
            if t not in self.ids:
                raise ValueError(f"vocabulary lacks special token {t!r}")
        self.pad_id = self.ids[fmt.PAD]
        self.eos_id = self.ids[fmt.EOS]
        self.unk_id = self.ids[fmt.UNK]
        self.respond_id = self.ids[fmt.RESPOND]
        self.think_close_id = self.ids[fmt.THINK_CLOSE]
        self.answer_close_id = self.ids[fmt.ANSWER_CLOSE]

    @classmethod
    def from_words(cls, words):
        words = sorted(set(words) - set(fmt.SPECIAL_TOKENS))
        return cls([*fmt.SPECIAL_TOKENS, *words])

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def encode(self, tokens) -> list[int]:
        return [self.ids.get(t, self.unk_id) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Architecture:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    context_length: int = 256

    def segments(self):
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        segs = [("tok_emb", (v, d)), ("pos_emb", (self.context_length, d)), ("seg_emb", (N_SEGMENTS, d))]
        for i in range(self.n_layers):
            p = f"h{i}."
            segs += [(p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
                     (p + "w_qkv", (d, 3 * d)), (p + "b_qkv", (3 * d,)),
                     (p + "w_o", (d, d)), (p + "b_o", (d,)),
                     (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
                     (p + "w_1", (d, f)), (p + "b_1", (f,)),
                     (p + "w_2", (f, d)), (p + "b_2", (d,))]
        segs += [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, v)), ("b_out", (v,))]
        return segs


@dataclass
class Rollout:
    prompt_ids: list[int]
    generated_ids: list[int]
    per_token_logprob: np.ndarray
    temperature: float

    @property
    def logprob(self) -> float:
        return float(self.per_token_logprob.sum())


class PolicyModel:
    def __init__(self, arch: Architecture, vocab: Vocab, flat: torch.Tensor | None = None,
                 dtype=torch.float32):
        if arch.vocab_size != len(vocab):
            raise ValueError("architecture vocab_size does not match vocabulary")
        if arch.d_model % arch.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.arch = arch
        self.vocab = vocab
        self.layout = {}
        off = 0
        for name, shape in arch.segments():
            n = math.prod(shape)
            self.layout[name] = (off, shape)
            off += n
        self.n_params = off
        if flat is None:
            flat = torch.zeros(off, dtype=dtype)
        if flat.numel() != off:
            raise ValueError(f"expected {off} parameters, got {flat.numel()}")
        self.flat = flat.detach().clone().requires_grad_(True)

    @classmethod
    def init(cls, arch: Architecture, vocab: Vocab, seed: int = 0, scale: float = 0.02,
             uniform_output: bool = False, dtype=torch.float32):
        """Random init; ``uniform_output`` zeroes the head so every next-token distribution is uniform."""
        model = cls(arch, vocab, dtype=dtype)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, (off, shape) in model.layout.items():
                n = math.prod(shape)
                seg = model.flat[off:off + n]
                leaf = name.split(".")[-1]
                if leaf.endswith("_g"):
                    seg.fill_(1.0)
                elif leaf.startswith("b_") or leaf.endswith("_b"):
                    seg.zero_()
                else:
                    std = scale
                    if leaf in ("w_o", "w_2"):
                        std = scale / math.sqrt(2 * arch.n_layers)
                    seg.copy_(torch.randn(n, generator=g, dtype=torch.float64).to(dtype) * std)
            if uniform_output:
                for name in ("w_out", "b_out"):
                    model.p(name).zero_()
        return model

    @property
    def dtype(self):
        return self.flat.dtype

    def p(self, name) -> torch.Tensor:
        off, shape = self.layout[name]
        return self.flat[off:off + math.prod(shape)].view(shape)

    def parameters_numpy(self) -> np.ndarray:
        return self.flat.detach().cpu().numpy().copy()

    def set_parameters(self, values) -> None:
        with torch.no_grad():
            self.flat.copy_(torch.as_tensor(np.asarray(values), dtype=self.dtype))

    # -- forward -----------------------------------------------------------

    def _block(self, i, x, cache=None, start=0):
        p = f"h{i}."
        a = self.arch
        B, T, d = x.shape
        h = F.layer_norm(x, (d,), self.p(p + "ln1_g"), self.p(p + "ln1_b"))
        qkv = h @ self.p(p + "w_qkv") + self.p(p + "b_qkv")
        q, k, v = qkv.split(d, dim=-1)
        dh = d // a.n_heads
        q = q.view(B, T, a.n_heads, dh).transpose(1, 2)
        k = k.view(B, T, a.n_heads, dh).transpose(1, 2)
        v = v.view(B, T, a.n_heads, dh).transpose(1, 2)
        if cache is not None:
            if i in cache:
                pk, pv = cache[i]
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
            cache[i] = (k, v)
        S = k.shape[2]
        att = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        qpos = torch.arange(start, start + T).unsqueeze(1)
        kpos = torch.arange(S).unsqueeze(0)
        att = att.masked_fill(kpos > qpos, float("-inf"))
        att = torch.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + y @ self.p(p + "w_o") + self.p(p + "b_o")
        h = F.layer_norm(x, (d,), self.p(p + "ln2_g"), self.p(p + "ln2_b"))
        h = F.gelu(h @ self.p(p + "w_1") + self.p(p + "b_1"))
        return x + h @ self.p(p + "w_2") + self.p(p + "b_2")

    def _positions(self, ids):
        """Segment id and position for every token.

        The segment counts boundary tokens (``<respond>``, ``</think>``,
        ``</answer>``) strictly before a position, capped at 3.  Prompt
        positions count backwards from the first ``<respond>`` and response
        positions forwards from it, so neither depends on prompt length.
        Rows without ``<respond>`` use plain absolute positions.
        """
        B, T = ids.shape
        is_r = (ids == self.vocab.respond_id).long()
        in_resp = (torch.cumsum(is_r, 1) - is_r) > 0
        bound = is_r + (ids == self.vocab.think_close_id).long() + (ids == self.vocab.answer_close_id).long()
        seg = torch.clamp(torch.cumsum(bound, 1) - bound, max=N_SEGMENTS - 1)
        seg = torch.where(in_resp, torch.clamp(seg, min=1), torch.zeros_like(seg))
        idx = torch.arange(T).expand(B, T)
        has_r = is_r.any(1, keepdim=True)
        r_at = torch.where(has_r, is_r.argmax(1, keepdim=True), torch.zeros_like(has_r, dtype=torch.long))
        pos = torch.where(in_resp, idx - r_at - 1, torch.where(has_r, r_at - idx, idx))
        return seg, pos

    def logits(self, ids: torch.Tensor, cache=None, start: int = 0) -> torch.Tensor:
        """Next-token logits for every position of ``ids`` (B, T)."""
        B, T = ids.shape
        if start + T > self.arch.context_length:
            raise InputError(f"sequence of length {start + T} exceeds context {self.arch.context_length}")
        if cache is not None:
            hist = cache.get("ids")
            hist = ids if hist is None else torch.cat([hist, ids], 1)
            cache["ids"] = hist
            seg, pos = self._positions(hist)
            seg, pos = seg[:, start:], pos[:, start:]
        else:
            seg, pos = self._positions(ids)
        x = self.p("tok_emb")[ids] + self.p("pos_emb")[pos] + self.p("seg_emb")[seg]
        for i in range(self.arch.n_layers):
            x = self._block(i, x, cache, start)
        x = F.layer_norm(x, (self.arch.d_model,), self.p("lnf_g"), self.p("lnf_b"))
        return x @ self.p("w_out") + self.p("b_out")

    def next_token_logprobs(self, prefix_ids) -> np.ndarray:
        with torch.no_grad():
            ids = torch.tensor([list(prefix_ids)], dtype=torch.long)
            return torch.log_softmax(self.logits(ids)[0, -1].double(), -1).numpy()


def _check_ids(model, ids):
    V = model.arch.vocab_size
    for i in ids:
        if not 0 <= int(i) < V:
            raise InputError(f"token id {i} outside vocabulary of size {V}")


def token_logprobs(model: PolicyModel, seqs) -> list[torch.Tensor]:
    """Differentiable per-token log-probabilities of generated tokens.

    ``seqs`` is a list of (prompt_ids, generated_ids).  Sequences are
    right-padded into one batch; causal attention keeps padding invisible to
    real positions.
    """
    if not seqs:
        return []
    full = [list(p) + list(g) for p, g in seqs]
    for s in full:
        _check_ids(model, s)
    T = max(len(s) for s in full)
    if T > model.arch.context_length:
        raise InputError(f"sequence of length {T} exceeds context {model.arch.context_length}")
    ids = torch.full((len(full), T), model.vocab.pad_id, dtype=torch.long)
    for r, s in enumerate(full):
        ids[r, :len(s)] = torch.tensor(s, dtype=torch.long)
    logp = torch.log_softmax(model.logits(ids), dim=-1)
    out = []
    for r, (p, g) in enumerate(seqs):
        if not g:
            out.append(logp.new_zeros(0))
            continue
        pos = torch.arange(len(p) - 1, len(p) + len(g) - 1)
        out.append(logp[r, pos, torch.tensor(list(g), dtype=torch.long)])
    return out


def sequence_logprobs(model: PolicyModel, seqs) -> torch.Tensor:
    return torch.stack([t.sum() for t in token_logprobs(model, seqs)])


def score(model: PolicyModel, prompt_ids, generated_ids) -> np.ndarray:
    """log p(token_t | prompt, tokens_<t) for each generated token, float64."""
    if not prompt_ids:
        raise InputError("prompt must contain at least one token")
    with torch.no_grad():
        (lp,) = token_logprobs(model, [(list(prompt_ids), list(generated_ids))])
    return lp.double().numpy()


def sample_from_logits(logits: torch.Tensor, temperature: float, generator: torch.Generator,
                       greedy: bool = False) -> torch.Tensor:
    """Draw one id per row from softmax(logits / temperature)."""
    if greedy:
        return logits.argmax(dim=-1)
    if temperature <= 0:
        raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
    probs = torch.softmax(logits.double() / temperature, dim=-1)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


def sample_group(model: PolicyModel, prompt_ids, n: int, temperature: float = 1.0,
                 max_new_tokens: int = 96, rng_seed: int = 0, greedy: bool = False) -> list[Rollout]:
    """``n`` independent continuations of one prompt, stopping at ``<eos>``."""
    prompt_ids = list(prompt_ids)
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    if not prompt_ids:
        raise InputError("prompt must contain at least one token")
    _check_ids(model, prompt_ids)
    room = model.arch.context_length - len(prompt_ids)
    if room < 1:
        raise InputError(f"prompt of length {len(prompt_ids)} exceeds context {model.arch.context_length}")
    steps = min(max_new_tokens, room)
    g = torch.Generator().manual_seed(int(rng_seed))
    eos = model.vocab.eos_id
    gen = [[] for _ in range(n)]
    done = [False] * n
    with torch.no_grad():
        cache = {}
        ids = torch.tensor([prompt_ids] * n, dtype=torch.long)
        logits = model.logits(ids, cache, 0)[:, -1]
        pos = len(prompt_ids)
        for _ in range(steps):
            nxt = sample_from_logits(logits, temperature, g, greedy)
            for r in range(n):
                if not done[r]:
                    t = int(nxt[r])
                    gen[r].append(t)
                    done[r] = t == eos
            if all(done) or pos >= model.arch.context_length:
                break
            logits = model.logits(nxt.view(n, 1), cache, pos)[:, -1]
            pos += 1
        lps = token_logprobs(model, [(prompt_ids, g_) for g_ in gen])
    return [Rollout(prompt_ids, g_, lp.double().numpy(), temperature if not greedy else 0.0)
            for g_, lp in zip(gen, lps)]


def sample(model: PolicyModel, prompt_ids, temperature: float = 1.0, max_new_tokens: int = 96,
           rng_seed: int = 0, greedy: bool = False) -> Rollout:
    return sample_group(model, prompt_ids, 1, temperature, max_new_tokens, rng_seed, greedy)[0]


def grad(model: PolicyModel, loss_fn) -> np.ndarray:
    """Gradient of ``loss_fn(model)`` (a torch scalar) w.r.t. the flat parameters."""
    model.flat.grad = None
    loss = loss_fn(model)
    if not torch.is_tensor(loss) or not loss.requires_grad:
        return np.zeros(model.n_params)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}")
    loss.backward()
    g = model.flat.grad
    out = np.zeros(model.n_params) if g is None else g.detach().double().numpy().copy()
    model.flat.grad = None
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite gradient")
    return out


def clone_frozen(model: PolicyModel) -> PolicyModel:
    twin = PolicyModel(model.arch, copy.deepcopy(model.vocab), model.flat.detach().clone())
    twin.flat.requires_grad_(False)
    return twin


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: PolicyModel, path) -> None:
    header = json.dumps({"architecture": asdict(model.arch), "vocabulary": model.vocab.tokens},
                        ensure_ascii=False).encode("utf-8")
    params = model.flat.detach().to(torch.float32).numpy().astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", model.n_params))
        fh.write(params)


def load_checkpoint(path) -> PolicyModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a policy checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = 16
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) - off != 4 * n:
        raise CheckpointError(f"{path}: truncated parameter block")
    flat = torch.from_numpy(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32))
    return PolicyModel(Architecture(**header["architecture"]), Vocab(header["vocabulary"]), flat)


def checkpoint_digest(path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
