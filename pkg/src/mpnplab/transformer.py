"""Desk-scale decoder-only transformer whose attention accepts injected K/V.

Blocks are numbered 1..L.  Each block is pre-layernorm:
``h + MHA(LN(h))`` then ``+ FFN(LN(.))``.  Injected key/value tokens bypass
the block's K/V projections and are prepended to the text keys/values, scaled
by the block's gate; every text query may attend to all of them while
text-to-text attention stays causal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


@dataclass(frozen=True)
class TransformerConfig:
    num_blocks: int = 6
    model_dim: int = 64
    num_heads: int = 4
    vocab_size: int = 34
    max_text_len: int = 32
    ffn_hidden: int = 256

    def __post_init__(self):
        for k in ("num_blocks", "model_dim", "num_heads", "vocab_size", "max_text_len",
                  "ffn_hidden"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InjectedKV:
    """Latent key/value tokens for one block: ``(m, d)`` or ``(B, m, d)``.

    ``gate`` is a python float or a scalar Tensor (so it can be learned).
    """

    keys: Tensor
    values: Tensor
    gate: Tensor | float = 1.0

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise tc.ShapeError(f"injected keys {self.keys.shape} and values "
                                f"{self.values.shape} differ")
        g = self.gate.data if isinstance(self.gate, Tensor) else np.asarray(self.gate)
        if g.size != 1 or not (0.0 <= float(g.reshape(-1)[0]) <= 1.0):
            raise ValueError(f"gate must be a scalar in [0, 1], got {g}")

    @property
    def num_tokens(self) -> int:
        return self.keys.shape[-2]


def attention_mask(num_injected: int, seq_len: int, causal: bool = True) -> np.ndarray:
    """Boolean ``(S, m + S)`` mask: injected columns always visible."""
    text = np.tril(np.ones((seq_len, seq_len), dtype=bool)) if causal else \
        np.ones((seq_len, seq_len), dtype=bool)
    return np.concatenate([np.ones((seq_len, num_injected), dtype=bool), text], axis=1)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = tc.reshape(x, (*lead, n, heads, d // heads))
    nd = x.ndim
    return tc.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    nd = x.ndim
    x = tc.transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    *lead, n, h, dh = x.shape
    return tc.reshape(x, (*lead, n, h * dh))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray,
                         keep: dict | None = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` subspaces.

    ``q``: ``(..., S, d)``; ``k``/``v``: ``(..., n, d)``; ``mask``: ``(S, n)``.
    When ``keep`` is a dict the attention weights land in ``keep["weights"]``.
    """
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    scores = tc.scale(tc.matmul(qh, kh, transpose_b=True), scale)
    weights = tc.softmax(scores, mask=mask)
    if keep is not None:
        keep["weights"] = weights
    return _merge_heads(tc.matmul(weights, vh))


def _init(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def block_param_names(i: int) -> list[str]:
    p = f"block{i}."
    return [p + n for n in ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b",
                            "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")]


def init_block_params(rng: np.random.Generator, prefix: str, d: int, hidden: int,
                      n_blocks: int, region: str, dtype) -> dict[str, Tensor]:
    s_in, s_out = 1.0 / math.sqrt(d), 1.0 / math.sqrt(d) / math.sqrt(2 * n_blocks)
    raw = {
        "ln1.g": np.ones(d), "ln1.b": np.zeros(d),
        "wq": _init(rng, (d, d), s_in, dtype), "wk": _init(rng, (d, d), s_in, dtype),
        "wv": _init(rng, (d, d), s_in, dtype), "wo": _init(rng, (d, d), s_out, dtype),
        "ln2.g": np.ones(d), "ln2.b": np.zeros(d),
        "ffn.w1": _init(rng, (d, hidden), s_in, dtype), "ffn.b1": np.zeros(hidden),
        "ffn.w2": _init(rng, (hidden, d), 1.0 / math.sqrt(hidden) / math.sqrt(2 * n_blocks),
                        dtype),
        "ffn.b2": np.zeros(d),
    }
    return {prefix + k: tc.parameter(v, name=prefix + k, region_tag=region, dtype=dtype)
            for k, v in raw.items()}


def ffn(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    hdn = tc.gelu(tc.add(tc.matmul(x, params[prefix + "ffn.w1"]), params[prefix + "ffn.b1"]))
    return tc.add(tc.matmul(hdn, params[prefix + "ffn.w2"]), params[prefix + "ffn.b2"])


class DecoderLM:
    """Weight-tied decoder-only LM with per-block K/V injection.

    ``params`` maps names to Tensors; block ``i`` params are ``block{i}.*``.
    """

    def __init__(self, config: TransformerConfig, seed: int = 0, dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or tc.default_dtype())
        rng = np.random.default_rng([seed, 101])
        d, L = config.model_dim, config.num_blocks
        self.params: dict[str, Tensor] = {
            "tok_emb": tc.parameter(_init(rng, (config.vocab_size, d), 1.0 / math.sqrt(d),
                                          self.dtype),
                                    name="tok_emb", region_tag="input_embedding",
                                    dtype=self.dtype),
            "pos_emb": tc.parameter(_init(rng, (config.max_text_len, d), 0.02, self.dtype),
                                    name="pos_emb", region_tag="input_embedding",
                                    dtype=self.dtype),
        }
        for i in range(1, L + 1):
            self.params.update(init_block_params(rng, f"block{i}.", d, config.ffn_hidden, L,
                                                 f"block[{i}]", self.dtype))
        self.params["ln_f.g"] = tc.parameter(np.ones(d), name="ln_f.g", region_tag="head",
                                             dtype=self.dtype)
        self.params["ln_f.b"] = tc.parameter(np.zeros(d), name="ln_f.b", region_tag="head",
                                             dtype=self.dtype)

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def kv_projection_names(self) -> list[str]:
        return [f"block{i}.{w}" for i in range(1, self.config.num_blocks + 1)
                for w in ("wk", "wv")]

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    # -- forward ---------------------------------------------------------------

    def mha_extended(self, hidden: Tensor, injected: InjectedKV | None, block_index: int,
                     adapters: Mapping | None = None, keep: dict | None = None) -> Tensor:
        """Attention of block ``block_index`` with optional injected K/V.

        ``hidden`` is the already layer-normalized block input ``(B, S, d)``.
        ``adapters`` may hold ``"k"``/``"v"`` callables ``(hidden, base_weight)``
        that replace the plain K/V projections.
        """
        cfg = self.config
        self._check_block(block_index)
        d = cfg.model_dim
        if hidden.shape[-1] != d:
            raise tc.ShapeError(f"block {block_index}: hidden width {hidden.shape[-1]} != {d}")
        p = f"block{block_index}."
        adapters = adapters or {}
        q = tc.matmul(hidden, self.params[p + "wq"])
        k_txt = adapters["k"](hidden, self.params[p + "wk"]) if "k" in adapters else \
            tc.matmul(hidden, self.params[p + "wk"])
        v_txt = adapters["v"](hidden, self.params[p + "wv"]) if "v" in adapters else \
            tc.matmul(hidden, self.params[p + "wv"])
        S = hidden.shape[-2]
        m = 0
        if injected is not None and injected.num_tokens > 0:
            if injected.keys.shape[-1] != d:
                raise tc.ShapeError(f"block {block_index}: injected width "
                                    f"{injected.keys.shape[-1]} != model_dim {d}")
            m = injected.num_tokens
            gate = injected.gate
            if isinstance(gate, Tensor):
                gk, gv = tc.mul(injected.keys, gate), tc.mul(injected.values, gate)
            else:
                gk, gv = tc.scale(injected.keys, gate), tc.scale(injected.values, gate)
            lead = hidden.shape[:-2]
            if gk.shape[:-2] != lead:
                target = (*lead, m, d)
                gk = tc.add(gk, np.zeros(target, dtype=self.dtype))
                gv = tc.add(gv, np.zeros(target, dtype=self.dtype))
            k_ext = tc.concat([gk, k_txt], axis=-2)
            v_ext = tc.concat([gv, v_txt], axis=-2)
        else:
            k_ext, v_ext = k_txt, v_txt
        mask = attention_mask(m, S)
        att = multi_head_attention(q, k_ext, v_ext, cfg.num_heads, mask, keep)
        return tc.matmul(att, self.params[p + "wo"])

    def block_forward(self, hidden: Tensor, injected: InjectedKV | None, block_index: int,
                      adapters: Mapping | None = None, keep: dict | None = None) -> Tensor:
        p = f"block{block_index}."
        with tc.region(f"block[{block_index}]"):
            a = tc.layer_norm(hidden, self.params[p + "ln1.g"], self.params[p + "ln1.b"])
            h = tc.add(hidden, self.mha_extended(a, injected, block_index, adapters, keep))
            f = tc.layer_norm(h, self.params[p + "ln2.g"], self.params[p + "ln2.b"])
            return tc.add(h, ffn(f, self.params, p))

    def embed(self, token_ids: np.ndarray, prefix: Tensor | None = None) -> Tensor:
        ids = np.asarray(token_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        cfg = self.config
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        P = 0 if prefix is None else prefix.shape[-2]
        total = P + ids.shape[1]
        if total > cfg.max_text_len:
            raise ValueError(f"sequence length {total} exceeds max_text_len {cfg.max_text_len}")
        with tc.region("input_embedding"):
            x = tc.embedding(self.params["tok_emb"], ids)
            if prefix is not None:
                if prefix.ndim == 2:
                    prefix = tc.add(prefix, np.zeros((ids.shape[0], *prefix.shape),
                                                     dtype=self.dtype))
                x = tc.concat([prefix, x], axis=1)
            return tc.add(x, tc.getitem(self.params["pos_emb"], slice(0, total)))

    def forward(self, token_ids, injections: Mapping[int, InjectedKV] | None = None,
                adapters: Mapping[int, Mapping] | None = None, prefix: Tensor | None = None,
                stop_below: int | None = None, keep: dict | None = None) -> Tensor:
        """Logits ``(B, S, vocab)`` for the text positions.

        ``prefix`` (``(B, P, d)`` or ``(P, d)``) is prepended to the input
        embeddings; its positions are dropped from the logits.  ``stop_below``
        wraps the activations entering that block in a gradient-sink boundary.
        ``keep`` collects per-block attention weights when given.
        """
        cfg = self.config
        injections = injections or {}
        adapters = adapters or {}
        for j in list(injections) + list(adapters):
            self._check_block(j)
        if stop_below is not None:
            self._check_block(stop_below)
        h = self.embed(token_ids, prefix)
        for i in range(1, cfg.num_blocks + 1):
            if stop_below == i:
                h = tc.detach_boundary(h, keep_grad=True)
            bk = None if keep is None else keep.setdefault(i, {})
            h = self.block_forward(h, injections.get(i), i, adapters.get(i), bk)
        if prefix is not None:
            h = tc.getitem(h, (slice(None), slice(prefix.shape[-2], None)))
        with tc.region("head"):
            h = tc.layer_norm(h, self.params["ln_f.g"], self.params["ln_f.b"])
        with tc.region("output_embedding"):
            return tc.matmul(h, self.params["tok_emb"], transpose_b=True)

    __call__ = forward

    def _check_block(self, j: int) -> None:
        if not (isinstance(j, (int, np.integer)) and 1 <= j <= self.config.num_blocks):
            raise ValueError(f"no block {j}; blocks are 1..{self.config.num_blocks}")


def lm_loss(logits: Tensor, target_ids, answer_mask) -> Tensor:
    """Mean cross-entropy over positions flagged in ``answer_mask``."""
    mask = np.asarray(answer_mask, dtype=bool)
    if not mask.any():
        raise ValueError("lm_loss: answer mask selects no positions")
    return tc.cross_entropy(logits, np.asarray(target_ids), mask.astype(float))


def _slice_injections(injections: Mapping[int, InjectedKV], rows) -> dict[int, InjectedKV]:
    out = {}
    for j, inj in injections.items():
        if inj.keys.ndim == 3:
            out[j] = InjectedKV(tc.getitem(inj.keys, rows), tc.getitem(inj.values, rows),
                                inj.gate)
        else:
            out[j] = inj
    return out


def greedy_decode(model: DecoderLM, prompt_ids, injections: Mapping[int, InjectedKV] | None = None,
                  max_new: int = 8, eos_id: int | None = None, adapters=None,
                  prefix: Tensor | None = None) -> list[list[int]]:
    """Argmax decoding for a batch of equal-length prompts.

    Returns the generated ids per row, cut before EOS.  Injected K/V (and any
    prefix) are reused unchanged at every step.
    """
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = np.atleast_2d(np.asarray(prompt_ids, dtype=np.int64))
    B = seq.shape[0]
    done = np.zeros(B, dtype=bool)
    out: list[list[int]] = [[] for _ in range(B)]
    injections = injections or {}
    for _ in range(max_new):
        logits = model.forward(seq, injections, adapters, prefix).data
        nxt = logits[:, -1, :].argmax(axis=-1)
        for b in range(B):
            if done[b]:
                continue
            if eos_id is not None and nxt[b] == eos_id:
                done[b] = True
            else:
                out[b].append(int(nxt[b]))
        if done.all():
            break
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
    return out


def beam_decode(model: DecoderLM, prompt_ids, injections: Mapping[int, InjectedKV] | None = None,
                max_new: int = 8, eos_id: int | None = None, beam_width: int = 4,
                adapters=None, prefix: Tensor | None = None) -> list[int]:
    """Beam search for a single prompt (optional; greedy is the default)."""
    prompt = list(np.asarray(prompt_ids).reshape(-1))
    beams = [(0.0, [], False)]
    for _ in range(max_new):
        live = [b for b in beams if not b[2]]
        if not live:
            break
        seqs = np.array([prompt + b[1] for b in live], dtype=np.int64)
        rows = np.zeros(len(live), dtype=np.int64)
        inj = _slice_injections(injections or {}, rows)
        pre = None if prefix is None else (prefix if prefix.ndim == 2 else tc.getitem(prefix, rows))
        logits = model.forward(seqs, inj, adapters, pre).data[:, -1, :]
        logp = logits - logits.max(-1, keepdims=True)
        logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
        cand = [b for b in beams if b[2]]
        for (score, toks, _), lp in zip(live, logp):
            for t in np.argsort(-lp)[:beam_width]:
                fin = eos_id is not None and int(t) == eos_id
                cand.append((score + float(lp[t]), toks if fin else toks + [int(t)], fin))
        cand.sort(key=lambda c: -c[0])
        beams = cand[:beam_width]
    return max(beams, key=lambda b: b[0])[1]
