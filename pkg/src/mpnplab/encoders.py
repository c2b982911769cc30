"""Frozen random unimodal encoders producing multi-level pooled tokens.

Each encoder is a small bidirectional pre-LN transformer with weights drawn
once from a fixed seed and never trained.  Its feature tokens are the
average-pooled hidden states of the deepest ``levels`` blocks, each split
into ``tokens_per_level`` contiguous chunks along the sequence.  Pooled
tokens are standardized with per-token statistics measured once on seeded
day-regime scenes, like a batch norm frozen in inference mode.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import synthdata as sd
from . import tensorcore as tc
from .tensorcore import Tensor
from .transformer import ffn, init_block_params, multi_head_attention

MODALITIES = ("camera", "range")
BINDING_STD = 0.7


@dataclass(frozen=True)
class EncoderConfig:
    modality: str = "camera"
    enc_dim: int = 32
    enc_blocks: int = 4
    levels: int = 2
    tokens_per_level: int = 4
    num_heads: int = 4
    grid_size: int = 8

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 1 <= self.levels <= self.enc_blocks:
            raise ValueError(f"levels {self.levels} must lie in [1, enc_blocks={self.enc_blocks}]")
        if self.tokens_per_level < 1 or self.enc_dim % self.num_heads:
            raise ValueError("tokens_per_level must be >= 1 and enc_dim divisible by num_heads")

    @property
    def num_tokens(self) -> int:
        return self.levels * self.tokens_per_level

    def to_dict(self) -> dict:
        return asdict(self)


DEFAULT_CAMERA = EncoderConfig("camera", levels=2, tokens_per_level=8)
DEFAULT_RANGE = EncoderConfig("range", levels=4, tokens_per_level=1)


@dataclass
class ModalityTokens:
    tokens: np.ndarray          # (B, m, enc_dim)
    modality: str
    level_index: np.ndarray     # (m,) encoder block each token was pooled from


def pool_multilevel(per_block_hidden: Sequence, levels: int, tokens_per_level: int,
                    modality: str = "camera") -> ModalityTokens:
    """Mean-pool the deepest ``levels`` blocks, ``tokens_per_level`` chunks each."""
    if not per_block_hidden:
        raise ValueError("pool_multilevel: no hidden states")
    if levels > len(per_block_hidden):
        raise ValueError(f"levels {levels} exceeds {len(per_block_hidden)} available blocks")
    first = len(per_block_hidden) - levels
    toks, level_idx = [], []
    for b in range(first, len(per_block_hidden)):
        h = per_block_hidden[b]
        h = h.data if isinstance(h, Tensor) else np.asarray(h)
        if h.ndim == 2:
            h = h[None]
        S = h.shape[1]
        if tokens_per_level > S:
            raise ValueError(f"tokens_per_level {tokens_per_level} exceeds sequence length {S}")
        for chunk in np.array_split(np.arange(S), tokens_per_level):
            toks.append(h[:, chunk, :].mean(axis=1))
            level_idx.append(b + 1)
    return ModalityTokens(np.stack(toks, axis=1), modality, np.array(level_idx))


class FrozenEncoder:
    """Random, frozen bidirectional transformer for one modality."""

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=None,
                 calibration_scenes: int = 256):
        self.config = config
        self.dtype = np.dtype(dtype or tc.default_dtype())
        rng = np.random.default_rng([seed, 505, MODALITIES.index(config.modality)])
        e, G = config.enc_dim, config.grid_size
        self.params: dict[str, Tensor] = {}

        def p(name, arr):
            self.params[name] = tc.parameter(arr, name=name, region_tag="encoder",
                                             trainable=False, dtype=self.dtype)

        if config.modality == "camera":
            # object cells embed as shape + colour + a per-pair binding term, so a
            # shape shares a direction across colours
            shape_e = rng.standard_normal((len(sd.SHAPES), e))
            color_e = rng.standard_normal((len(sd.COLORS), e)) * 0.7
            table = rng.standard_normal((sd.CAM_VOCAB, e))
            for si, sh in enumerate(sd.SHAPES):
                for ci, co in enumerate(sd.COLORS):
                    t = sd.camera_cell_token(sh, co)
                    table[t] = shape_e[si] + color_e[ci] + BINDING_STD * table[t]
            p("camera.enc.tok_emb", table)
            p(f"{config.modality}.enc.pos_emb", rng.standard_normal((G * G, e)) * 0.5)
        else:
            p("range.enc.shape_emb", rng.standard_normal((len(sd.SHAPES) + 1, e)))
            p("range.enc.x_emb", rng.standard_normal((G, e)) * 0.7)
            p("range.enc.y_emb", rng.standard_normal((G, e)) * 0.7)
        for i in range(1, config.enc_blocks + 1):
            blk = init_block_params(rng, f"{config.modality}.enc.block{i}.", e, 4 * e,
                                    config.enc_blocks, "encoder", self.dtype)
            for t in blk.values():
                t.requires_grad = False
            self.params.update(blk)
        self.out_mean = np.zeros((config.num_tokens, e), dtype=self.dtype)
        self.out_std = np.ones((config.num_tokens, e), dtype=self.dtype)
        if calibration_scenes:
            self._calibrate(seed, calibration_scenes)

    def _calibrate(self, seed: int, n: int) -> None:
        G = self.config.grid_size
        scenes = [sd.sample_scene(i, np.random.default_rng([seed, 606, i]), G) for i in range(n)]
        if self.config.modality == "camera":
            r = np.stack([sd.render_camera_tokens(s, "day") for s in scenes])
        else:
            r = np.stack([sd.render_range_tokens(s) for s in scenes])
        toks = self.encode(r, standardize=False).tokens
        self.out_mean = toks.mean(axis=0).astype(self.dtype)
        # one scale per token keeps the relative geometry of the feature dims
        rms = np.sqrt(((toks - toks.mean(axis=0)) ** 2).mean(axis=(0, 2)))
        self.out_std = np.repeat(rms[:, None] + 1e-6, toks.shape[2], axis=1).astype(self.dtype)

    def _inputs(self, renderings) -> Tensor:
        cfg = self.config
        G = cfg.grid_size
        if cfg.modality == "camera":
            grids = np.asarray(renderings, dtype=np.int64)
            if grids.ndim == 2:
                grids = grids[None]
            if grids.shape[1:] != (G, G):
                raise ValueError(f"camera rendering must be {G}x{G}, got {grids.shape[1:]}")
            ids = grids.reshape(grids.shape[0], G * G)   # x-major: left columns first
            x = tc.embedding(self.params["camera.enc.tok_emb"], ids)
            return tc.add(x, self.params["camera.enc.pos_emb"])
        objs = np.asarray(renderings, dtype=np.int64)
        if objs.ndim == 2:
            objs = objs[None]
        if objs.ndim != 3 or objs.shape[2] != 3:
            raise ValueError(f"range rendering must be a list of (shape, x, y), got {objs.shape}")
        null = objs[..., 0] < 0
        shape_ids = np.where(null, len(sd.SHAPES), objs[..., 0])
        xs, ys = np.where(null, 0, objs[..., 1]), np.where(null, 0, objs[..., 2])
        keep = (~null).astype(self.dtype)[..., None]
        x = tc.embedding(self.params["range.enc.shape_emb"], shape_ids)
        pos = tc.add(tc.embedding(self.params["range.enc.x_emb"], xs),
                     tc.embedding(self.params["range.enc.y_emb"], ys))
        return tc.add(x, tc.mul(pos, keep))

    def hidden_states(self, renderings) -> list[Tensor]:
        cfg = self.config
        with tc.region("encoder"):
            h = self._inputs(renderings)
            S = h.shape[1]
            mask = np.ones((S, S), dtype=bool)
            out = []
            for i in range(1, cfg.enc_blocks + 1):
                pre = f"{cfg.modality}.enc.block{i}."
                a = tc.layer_norm(h, self.params[pre + "ln1.g"], self.params[pre + "ln1.b"])
                q = tc.matmul(a, self.params[pre + "wq"])
                k = tc.matmul(a, self.params[pre + "wk"])
                v = tc.matmul(a, self.params[pre + "wv"])
                att = multi_head_attention(q, k, v, cfg.num_heads, mask)
                h = tc.add(h, tc.matmul(att, self.params[pre + "wo"]))
                f = tc.layer_norm(h, self.params[pre + "ln2.g"], self.params[pre + "ln2.b"])
                h = tc.add(h, ffn(f, self.params, pre))
                out.append(h)
        return out

    def encode(self, renderings, standardize: bool = True) -> ModalityTokens:
        hs = self.hidden_states(renderings)
        out = pool_multilevel(hs, self.config.levels, self.config.tokens_per_level,
                              self.config.modality)
        if standardize:
            out.tokens = ((out.tokens - self.out_mean) / self.out_std).astype(self.dtype)
        return out


def render(sample: sd.QASample, modality: str, regime_config: sd.RegimeConfig = sd.RegimeConfig(),
           seed: int = 0):
    if modality == "camera":
        return sd.render_camera_tokens(sample.scene, sample.regime, regime_config, seed)
    if modality == "range":
        return sd.render_range_tokens(sample.scene)
    raise ValueError(f"unknown modality {modality!r}")


def encode_modality(samples: Sequence[sd.QASample], encoder: FrozenEncoder,
                    regime_config: sd.RegimeConfig = sd.RegimeConfig(), seed: int = 0,
                    batch: int = 256) -> np.ndarray:
    """Encode the scenes behind ``samples``; returns ``(len(samples), m, enc_dim)``."""
    mod = encoder.config.modality
    outs = []
    for i in range(0, len(samples), batch):
        r = np.stack([np.asarray(render(s, mod, regime_config, seed)) for s in samples[i:i + batch]])
        outs.append(encoder.encode(r).tokens)
    if not outs:
        return np.zeros((0, encoder.config.num_tokens, encoder.config.enc_dim), encoder.dtype)
    return np.concatenate(outs, axis=0)
