"""Tiny causal language model with multimodal embedding splicing.

A word-level vocabulary with character-level digits, token-type-specific
two-layer GeLU projectors for the scene / agent / map embeddings, splicing
of continuous embeddings into tokenized prompts, a small pre-LN transformer,
masked next-token loss, and greedy generation.
"""

import json
from collections import Counter
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import codec
from . import tokens as tk

UNK = "<unk>"


def segment(text):
    """Word segmenter: alphabetic runs are words, every other non-space
    character (digits included) is its own token."""
    out = []
    word = []
    for ch in text:
        if ch.isalpha():
            word.append(ch)
            continue
        if word:
            out.append("".join(word))
            word = []
        if not ch.isspace():
            out.append(ch)
    if word:
        out.append("".join(word))
    return out


# characters every vocabulary must cover so any coordinate or ego-state
# string is representable regardless of corpus content
_ALWAYS_PRESENT = list("0123456789.,-+()[]:")


class Vocabulary:
    """Token-to-id map with a fixed special-token block.

    Ids 0..len(specials)-1 are the special and placeholder-delimiting tokens
    in a fixed order, followed by <unk>, followed by corpus words ordered by
    (frequency descending, lexicographic). The segmenter can never produce a
    special token from raw text because specials contain non-alphabetic
    characters that the segmenter splits apart.
    """

    def __init__(self, words):
        self._tokens = list(tk.SPECIAL_TOKENS) + [UNK] + list(words)
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self._tokens)

    @property
    def n_special(self):
        return len(tk.SPECIAL_TOKENS)

    def token_of(self, i):
        return self._tokens[i]

    def id_of(self, token):
        return self._ids.get(token, self._ids[UNK])

    def special_id(self, token):
        if token not in tk.SPECIAL_TOKENS:
            raise KeyError(f"not a special token: {token}")
        return self._ids[token]

    def encode_text(self, text):
        return [self.id_of(t) for t in segment(text)]

    def decode(self, ids):
        return codec.detokenize([self.token_of(i) for i in ids])

    def to_json(self):
        return {"specials": list(tk.SPECIAL_TOKENS),
                "tokens": {t: i for i, t in enumerate(self._tokens)}}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=0, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        ordered = sorted(data["tokens"], key=data["tokens"].get)
        n = len(data["specials"]) + 1  # specials plus <unk>
        return cls(ordered[n:])


# text that accompanies every training sequence and must be representable
_SCAFFOLDING = [codec.SYSTEM_PROMPT] + list(codec.TEMPLATES.values()) + \
    list(codec.COMMAND_TEXT.values())


def build_vocab(records):
    """Vocabulary over corpus records plus the fixed prompt scaffolding.

    records: iterable of dicts with "question" and "answer" fields, or paths
    to JSONL files of such records. Word ids are assigned by (frequency
    descending, lexicographic), so identical corpora give identical files.
    """
    records = list(records)
    if not records:
        raise ValueError("empty corpus")
    counts = Counter()
    for rec in records:
        if isinstance(rec, (str, bytes)) or hasattr(rec, "read_text"):
            with open(rec, encoding="utf-8") as f:
                rows = [json.loads(line) for line in f if line.strip()]
        else:
            rows = [rec]
        for row in rows:
            counts.update(segment(row.get("question", "")))
            counts.update(segment(row.get("answer", "")))
    for text in _SCAFFOLDING:
        counts.update(t for t in segment(text) if t not in tk.SPECIAL_TOKENS)
    counts.update(_ALWAYS_PRESENT)
    words = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(words)


@dataclass
class LMConfig:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 832
    vocab_size: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class MultimodalSequence:
    """Ordered slots of text token ids and continuous embedding vectors.

    slots: list of ("tok", id) or ("emb", tensor, group). target_mask marks
    the positions whose token ids the loss supervises; continuous slots are
    never targets.
    """
    slots: list
    target_mask: list = field(default_factory=list)

    def __post_init__(self):
        if not self.target_mask:
            self.target_mask = [False] * len(self.slots)
        if len(self.target_mask) != len(self.slots):
            raise ValueError("target_mask length mismatch")

    def __len__(self):
        return len(self.slots)

    def token_id(self, i):
        slot = self.slots[i]
        return slot[1] if slot[0] == "tok" else None


class Projectors(nn.Module):
    """Token-type-specific two-layer GeLU MLPs into the LM embedding space."""

    GROUPS = ("scene", "agent", "map")

    def __init__(self, in_dim, d_model):
        super().__init__()
        self.mlps = nn.ModuleDict({
            g: nn.Sequential(nn.Linear(in_dim, d_model), nn.GELU(),
                             nn.Linear(d_model, d_model))
            for g in self.GROUPS})

    def forward(self, group, tokens):
        if tokens.shape[-1] != self.mlps[group][0].in_features:
            raise ValueError(
                f"projector input dim {tokens.shape[-1]} != "
                f"{self.mlps[group][0].in_features}")
        return self.mlps[group](tokens)

    def project_env(self, env):
        """EnvTokens -> {"scene", "track", "map"} projected embeddings."""
        return {
            "scene": self("scene", env.scene),
            "track": self("agent", env.agents.tokens),
            "map": self("map", env.map.tokens),
        }


def splice(prompt, embeddings, vocab):
    """Resolve a PromptSpec into a MultimodalSequence.

    embeddings maps placeholder group names ("scene", "track", "map",
    "object") to (N, d_model) tensors; empty tensors give empty spans.
    Raises KeyError for an embed slot with no binding.
    """
    slots = []
    for seg in prompt.segments:
        kind = seg[0]
        if kind == "text":
            slots.extend(("tok", i) for i in vocab.encode_text(seg[1]))
        elif kind == "special":
            slots.append(("tok", vocab.special_id(seg[1])))
        elif kind == "embed":
            group = seg[1]
            if group not in embeddings:
                raise KeyError(f"no embedding bound for placeholder {group!r}")
            for vec in embeddings[group]:
                slots.append(("emb", vec, group))
        else:
            raise ValueError(f"unknown segment kind: {kind}")
    return MultimodalSequence(slots=slots)


# target spans per prompt kind: answers for captions and QA, trajectory
# text for forecasting and planning
_TRAJ_KINDS = {"forecast", "plan"}


def append_target(seq, prompt_kind, answer_text, vocab):
    """Append the supervised span (with delimiters) to a spliced sequence."""
    if prompt_kind in _TRAJ_KINDS:
        start, end = tk.TRAJ_START, tk.TRAJ_END
    else:
        start, end = tk.ANSWER_START, tk.ANSWER_END
    ids = [vocab.special_id(start)] + vocab.encode_text(answer_text) + \
        [vocab.special_id(end)]
    slots = seq.slots + [("tok", i) for i in ids]
    mask = seq.target_mask + [True] * len(ids)
    return MultimodalSequence(slots=slots, target_mask=mask)


class _Block(nn.Module):
    def __init__(self, config):
        super().__init__()
        d = config.d_model
        self.n1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, config.n_heads,
                                          dropout=config.dropout,
                                          batch_first=True)
        self.n2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(),
                                nn.Dropout(config.dropout), nn.Linear(4 * d, d))

    def forward(self, x, attn_mask):
        h = self.n1(x)
        x = x + self.attn(h, h, h, attn_mask=attn_mask, need_weights=False)[0]
        return x + self.ff(self.n2(x))


class TinyLM(nn.Module):
    """Pre-LN causal transformer over mixed token/embedding sequences."""

    def __init__(self, config):
        super().__init__()
        if config.vocab_size <= 0:
            raise ValueError("vocab_size must be set")
        self.config = config
        d = config.d_model
        self.tok_emb = nn.Embedding(config.vocab_size, d)
        self.pos_emb = nn.Embedding(config.context_len, d)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_layers))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size, bias=False)

    def input_embeddings(self, seq):
        vecs = []
        dtype = self.tok_emb.weight.dtype
        for slot in seq.slots:
            if slot[0] == "tok":
                vecs.append(self.tok_emb.weight[slot[1]])
            else:
                vecs.append(slot[1].to(dtype))
        return torch.stack(vecs)

    def forward(self, seq):
        """Logits over the vocabulary at every position, (L, vocab)."""
        n = len(seq)
        if n > self.config.context_len:
            raise ValueError(
                f"sequence length {n} exceeds context {self.config.context_len}")
        x = self.input_embeddings(seq)
        x = x + self.pos_emb.weight[:n]
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        x = x[None]
        for block in self.blocks:
            x = block(x, mask)
        return self.head(self.norm(x[0]))


def lm_loss(logits, seq):
    """Mean next-token cross-entropy over masked target positions."""
    positions = [i for i in range(1, len(seq))
                 if seq.target_mask[i] and seq.slots[i][0] == "tok"]
    if not positions:
        raise ValueError("empty target mask")
    targets = torch.tensor([seq.slots[i][1] for i in positions])
    return F.cross_entropy(logits[[i - 1 for i in positions]], targets)


def _prefill(model, seq):
    """Full forward over the prompt, returning per-layer attention-input
    caches and the logits at the last position."""
    n = len(seq)
    x = model.input_embeddings(seq) + model.pos_emb.weight[:n]
    mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
    x = x[None]
    caches = []
    for block in model.blocks:
        h = block.n1(x)
        caches.append(h)
        x = x + block.attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        x = x + block.ff(block.n2(x))
    return caches, model.head(model.norm(x[0, -1]))


def _decode_step(model, caches, token_id, pos):
    """One incremental decoding step; extends the caches in place."""
    x = (model.tok_emb.weight[token_id] + model.pos_emb.weight[pos])[None, None]
    for i, block in enumerate(model.blocks):
        h = block.n1(x)
        caches[i] = torch.cat([caches[i], h], dim=1)
        x = x + block.attn(h, caches[i], caches[i], need_weights=False)[0]
        x = x + block.ff(block.n2(x))
    return model.head(model.norm(x[0, 0]))


def generate(model, seq, vocab, max_new_tokens=120, temperature=0.0,
             generator=None):
    """Autoregressive decoding from a spliced prompt.

    Temperature 0 is pure argmax and therefore deterministic. Decoding is
    incremental: the prompt is prefilled once and each new token attends over
    cached per-layer states. Stops at <traj_end>, <answer_end>, or
    max_new_tokens; returns {"token_ids": [...], "truncated": bool}.
    """
    stop_ids = {vocab.special_id(tk.TRAJ_END), vocab.special_id(tk.ANSWER_END)}
    out = []
    truncated = True
    with torch.no_grad():
        pos = len(seq)
        if pos > model.config.context_len:
            raise ValueError(
                f"sequence length {pos} exceeds context {model.config.context_len}")
        caches, logits = _prefill(model, seq)
        for _ in range(max_new_tokens):
            if pos >= model.config.context_len:
                break
            if temperature <= 0.0:
                nxt = int(logits.argmax())
            else:
                probs = F.softmax(logits / temperature, dim=-1)
                nxt = int(torch.multinomial(probs, 1, generator=generator))
            out.append(nxt)
            if nxt in stop_ids:
                truncated = False
                break
            logits = _decode_step(model, caches, nxt, pos)
            pos += 1
    return {"token_ids": out, "truncated": truncated}
