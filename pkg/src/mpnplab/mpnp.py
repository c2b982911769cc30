"""Key/value aligners, gated latent connections and connected-block LoRA.

Encoder tokens of each modality go through a key aligner and a value aligner
(``GELU(x W1 + b1) W2 + b2``), are concatenated across modalities, get a
learned positional offset, and are handed to each of the last ``N`` blocks
scaled by that block's gate ``sigmoid(w_j / T)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .transformer import InjectedKV


def _p(data, name, region, dtype):
    return tc.parameter(data, name=name, region_tag=region, dtype=dtype)


class Aligner:
    """Pointwise projection from encoder width to model width.

    ``kind="mlp"`` is the two-layer GELU map; ``kind="linear"`` collapses it
    to ``x W + b`` (ablation).
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None,
                 kind: str = "mlp", seed: int = 0, name: str = "aligner", dtype=None):
        if kind not in ("mlp", "linear"):
            raise ValueError(f"aligner kind must be 'mlp' or 'linear', got {kind!r}")
        dtype = np.dtype(dtype or tc.default_dtype())
        rng = np.random.default_rng([seed, 202])
        self.in_dim, self.out_dim, self.kind = in_dim, out_dim, kind
        self.hidden = hidden or out_dim
        self.params: dict[str, Tensor] = {}
        if kind == "mlp":
            self.params[f"{name}.w1"] = _p(rng.standard_normal((in_dim, self.hidden))
                                           / math.sqrt(in_dim), f"{name}.w1", "aligner", dtype)
            self.params[f"{name}.b1"] = _p(np.zeros(self.hidden), f"{name}.b1", "aligner", dtype)
            self.params[f"{name}.w2"] = _p(rng.standard_normal((self.hidden, out_dim))
                                           / math.sqrt(self.hidden), f"{name}.w2", "aligner",
                                           dtype)
            self.params[f"{name}.b2"] = _p(np.zeros(out_dim), f"{name}.b2", "aligner", dtype)
        else:
            self.params[f"{name}.w"] = _p(rng.standard_normal((in_dim, out_dim))
                                          / math.sqrt(in_dim), f"{name}.w", "aligner", dtype)
            self.params[f"{name}.b"] = _p(np.zeros(out_dim), f"{name}.b", "aligner", dtype)
        self.name = name

    def _get(self, key):
        return self.params[f"{self.name}.{key}"]

    def __call__(self, tokens) -> Tensor:
        return aligner_forward(tokens, self)


def aligner_forward(tokens, aligner: Aligner) -> Tensor:
    tokens = tokens if isinstance(tokens, Tensor) else tc.constant(tokens)
    if tokens.shape[-1] != aligner.in_dim:
        raise tc.ShapeError(f"aligner {aligner.name}: input width {tokens.shape[-1]} != "
                            f"{aligner.in_dim}")
    with tc.region("aligner"):
        if aligner.kind == "linear":
            return tc.add(tc.matmul(tokens, aligner._get("w")), aligner._get("b"))
        h = tc.gelu(tc.add(tc.matmul(tokens, aligner._get("w1")), aligner._get("b1")))
        return tc.add(tc.matmul(h, aligner._get("w2")), aligner._get("b2"))


class ModalityAligners:
    """Key and value aligner pair for one modality, plus its positional rows."""

    def __init__(self, modality: str, in_dim: int, d_model: int, num_tokens: int,
                 hidden: int | None = None, kind: str = "mlp", seed: int = 0,
                 positional: bool = True, dtype=None):
        dtype = np.dtype(dtype or tc.default_dtype())
        self.modality = modality
        self.num_tokens = num_tokens
        self.key = Aligner(in_dim, d_model, hidden, kind, seed=seed * 2 + 1,
                           name=f"{modality}.key_aligner", dtype=dtype)
        self.value = Aligner(in_dim, d_model, hidden, kind, seed=seed * 2 + 2,
                             name=f"{modality}.value_aligner", dtype=dtype)
        rng = np.random.default_rng([seed, 303])
        self.positional = positional
        self.pos_k = _p(rng.standard_normal((num_tokens, d_model)) * 0.02,
                        f"{modality}.pos_k", "other", dtype)
        self.pos_v = _p(rng.standard_normal((num_tokens, d_model)) * 0.02,
                        f"{modality}.pos_v", "other", dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {**self.key.params, **self.value.params}
        if self.positional:
            out[self.pos_k.name] = self.pos_k
            out[self.pos_v.name] = self.pos_v
        return out

    def __call__(self, tokens) -> tuple[Tensor, Tensor]:
        return self.key(tokens), self.value(tokens)


@dataclass
class PositionalKV:
    pos_k: Tensor | None
    pos_v: Tensor | None
    enabled: bool = True


@dataclass
class MultimodalKV:
    keys: Tensor
    values: Tensor
    sizes: tuple[int, ...]

    @property
    def num_tokens(self) -> int:
        return self.keys.shape[-2]


def build_multimodal_kv(per_modality_kv: Sequence[tuple[Tensor, Tensor]],
                        pos: PositionalKV | None = None) -> MultimodalKV:
    """Concatenate per-modality K/V along the token axis and add positions."""
    if not per_modality_kv:
        raise ValueError("build_multimodal_kv: need at least one modality")
    d = per_modality_kv[0][0].shape[-1]
    for k, v in per_modality_kv:
        if k.shape != v.shape:
            raise tc.ShapeError(f"modality keys {k.shape} vs values {v.shape}")
        if k.shape[-1] != d:
            raise tc.ShapeError(f"modality width {k.shape[-1]} != {d}")
    sizes = tuple(k.shape[-2] for k, _ in per_modality_kv)
    with tc.region("other"):
        if len(per_modality_kv) == 1:
            keys, values = per_modality_kv[0]
        else:
            keys = tc.concat([k for k, _ in per_modality_kv], axis=-2)
            values = tc.concat([v for _, v in per_modality_kv], axis=-2)
        if pos is not None and pos.enabled:
            m = keys.shape[-2]
            if pos.pos_k.shape != (m, d) or pos.pos_v.shape != (m, d):
                raise tc.ShapeError(f"positional KV shape {pos.pos_k.shape} does not match "
                                    f"{m} tokens of width {d}")
            keys, values = tc.add(keys, pos.pos_k), tc.add(values, pos.pos_v)
    return MultimodalKV(keys, values, sizes)


def positional_for(aligners: Sequence[ModalityAligners]) -> PositionalKV:
    if not all(a.positional for a in aligners):
        return PositionalKV(None, None, enabled=False)
    with tc.region("other"):
        if len(aligners) == 1:
            return PositionalKV(aligners[0].pos_k, aligners[0].pos_v)
        return PositionalKV(tc.concat([a.pos_k for a in aligners], axis=0),
                            tc.concat([a.pos_v for a in aligners], axis=0))


# --- gates -------------------------------------------------------------------

@dataclass
class GateSet:
    """Per-block trainable gate weights ``w_j``; ``alpha_j = sigmoid(w_j / T)``."""

    weights: dict[int, Tensor]
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def gate_alpha(w: Tensor, temperature: float) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    with tc.region("gate"):
        return tc.sigmoid(tc.scale(w, 1.0 / temperature))


def gate_alphas(gates: GateSet) -> dict[int, Tensor]:
    return {j: gate_alpha(w, gates.temperature) for j, w in sorted(gates.weights.items())}


# --- LoRA --------------------------------------------------------------------

class LoRAAdapter:
    """``hidden @ base + scaling * (hidden @ down) @ up`` with ``up`` zero-initialized."""

    def __init__(self, d: int, rank: int = 4, scaling: float = 1.0, seed: int = 0,
                 name: str = "lora", region: str = "other", dtype=None):
        if not 1 <= rank <= d:
            raise ValueError(f"LoRA rank {rank} must lie in [1, {d}]")
        if not scaling > 0:
            raise ValueError("LoRA scaling must be positive")
        dtype = np.dtype(dtype or tc.default_dtype())
        rng = np.random.default_rng([seed, 404])
        self.rank, self.scaling, self.name = rank, scaling, name
        self.down = _p(rng.standard_normal((d, rank)) / math.sqrt(d), f"{name}.down", region,
                       dtype)
        self.up = _p(np.zeros((rank, d)), f"{name}.up", region, dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        return {self.down.name: self.down, self.up.name: self.up}

    def __call__(self, hidden: Tensor, base_weight: Tensor) -> Tensor:
        return lora_kv_project(hidden, base_weight, self)


def lora_kv_project(hidden: Tensor, base_weight: Tensor, adapter: LoRAAdapter) -> Tensor:
    d = base_weight.shape[0]
    if adapter.rank > d:
        raise ValueError(f"LoRA rank {adapter.rank} exceeds {d}")
    base = tc.matmul(hidden, base_weight)
    delta = tc.matmul(tc.matmul(hidden, adapter.down), adapter.up)
    if adapter.scaling != 1.0:
        delta = tc.scale(delta, adapter.scaling)
    return tc.add(base, delta)


# --- connection plan ---------------------------------------------------------

@dataclass
class ConnectionPlan:
    """Latent connections to the last ``N`` of ``L`` blocks.

    ``adapters[j]`` holds ``{"k": LoRAAdapter, "v": LoRAAdapter}`` for each
    connected block when LoRA is enabled.
    """

    L: int
    N: int
    gates: GateSet
    adapters: dict[int, dict[str, LoRAAdapter]] = field(default_factory=dict)
    shared: bool = True
    fixed_gates: bool = False
    lora_rank: int = 4
    lora_scaling: float = 1.0
    d_model: int = 0
    seed: int = 0
    dtype: object = None

    @property
    def connected(self) -> list[int]:
        return list(range(self.L - self.N + 1, self.L + 1))

    @property
    def boundary(self) -> int:
        return self.L - self.N + 1

    def gate_params(self) -> dict[str, Tensor]:
        if self.fixed_gates:
            return {}
        return {f"gate.w{j}": w for j, w in sorted(self.gates.weights.items())}

    def adapter_params(self) -> dict[str, Tensor]:
        out = {}
        for j in sorted(self.adapters):
            for kv in ("k", "v"):
                out.update(self.adapters[j][kv].params)
        return out

    def alphas(self) -> dict[int, Tensor | float]:
        if self.fixed_gates:
            return {j: 1.0 for j in self.connected}
        return gate_alphas(self.gates)

    def resize(self, N: int) -> "ConnectionPlan":
        return plan_connections(self.L, N, self.shared, previous=self, d_model=self.d_model,
                                lora=bool(self.adapters), rank=self.lora_rank,
                                scaling=self.lora_scaling, temperature=self.gates.temperature,
                                seed=self.seed, dtype=self.dtype)


def _fresh_adapters(j: int, d: int, rank: int, scaling: float, seed: int, dtype):
    return {kv: LoRAAdapter(d, rank, scaling, seed=seed * 1000 + j * 2 + (kv == "v"),
                            name=f"block{j}.lora_{kv}", region=f"block[{j}]", dtype=dtype)
            for kv in ("k", "v")}


def plan_connections(L: int, N: int, shared: bool = True, previous: ConnectionPlan | None = None,
                     d_model: int = 0, lora: bool = True, rank: int = 4, scaling: float = 1.0,
                     temperature: float = 1.0, seed: int = 0, dtype=None) -> ConnectionPlan:
    """Connect the last ``N`` blocks.

    State of blocks that stay connected is taken from ``previous``; newly
    connected blocks get ``w_j = 0`` and zero-initialized adapters.
    """
    if not 1 <= N <= L:
        raise ValueError(f"N must lie in [1, {L}], got {N}")
    if not shared:
        raise NotImplementedError("per-modality connection sets are not supported")
    if lora and d_model < 1:
        raise ValueError("d_model is required when LoRA adapters are enabled")
    dtype = np.dtype(dtype or tc.default_dtype())
    connected = range(L - N + 1, L + 1)
    weights, adapters = {}, {}
    for j in connected:
        if previous is not None and j in previous.gates.weights:
            weights[j] = previous.gates.weights[j]
        else:
            weights[j] = _p(np.zeros(()), f"gate.w{j}", "gate", dtype)
        if lora:
            if previous is not None and j in previous.adapters:
                adapters[j] = previous.adapters[j]
            else:
                adapters[j] = _fresh_adapters(j, d_model, rank, scaling, seed, dtype)
    return ConnectionPlan(L, N, GateSet(weights, temperature), adapters, shared,
                          fixed_gates=previous.fixed_gates if previous else False,
                          lora_rank=rank, lora_scaling=scaling, d_model=d_model, seed=seed,
                          dtype=dtype)


def make_injections(mmkv: MultimodalKV, plan: ConnectionPlan) -> dict[int, InjectedKV]:
    """One gated view of the shared multimodal K/V per connected block."""
    alphas = plan.alphas()
    return {j: InjectedKV(mmkv.keys, mmkv.values, alphas[j]) for j in plan.connected}
