"""Offline preparation, runtime modality adaptation, evaluation and baselines.

The :class:`MPnPSystem` bundles a base decoder, the frozen encoders, one
aligner pair per mounted modality and a :class:`~mpnplab.mpnp.ConnectionPlan`.
Training phases only differ in which parameters are trainable, where the
gradient stops, and whether the connected blocks use LoRA.
"""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import costmodel as cm
from . import synthdata as sd
from . import tensorcore as tc
from .encoders import DEFAULT_CAMERA, DEFAULT_RANGE, MODALITIES, EncoderConfig, FrozenEncoder, \
    encode_modality
from .mpnp import Aligner, ModalityAligners, build_multimodal_kv, make_injections, \
    plan_connections, positional_for
from .optim import AdamW, ParamGroup
from .tensorcore import Tensor
from .transformer import DecoderLM, TransformerConfig, greedy_decode, lm_loss
from .vocab import Vocab, make_lm_batch

ABLATIONS = ("linear_aligner", "fixed_gates", "no_lora", "no_offline_kv")
EVAL_QTYPES = ("exists", "count", "side")


class TrainingError(RuntimeError):
    pass


class FreezeViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 8
    lr_main: float = 3e-3
    lr_gates: float = 1e-1
    weight_decay: float = 1e-2
    schedule: str = "linear-decay"
    seed: int = 0
    phase: str = "runtime"
    log_every: int = 10
    checked: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (self.lr_main > 0 and self.lr_gates > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.schedule != "linear-decay":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.phase not in ("pretrain", "offline", "runtime", "baseline"):
            raise ValueError(f"unknown phase {self.phase!r}")


# reference-scale hyperparameters; the desk defaults above use a larger lr_main
REFERENCE_TRAIN_CONFIG = TrainConfig(batch_size=16, epochs=8, lr_main=2e-5, lr_gates=1e-1,
                                     weight_decay=1e-2)


@dataclass(frozen=True)
class SystemConfig:
    transformer: TransformerConfig = TransformerConfig()
    camera: EncoderConfig = DEFAULT_CAMERA
    range: EncoderConfig = DEFAULT_RANGE
    n_connect: int = 3
    temperature: float = 1.0
    lora: bool = True
    lora_rank: int = 4
    lora_scaling: float = 1.0
    aligner_hidden: int | None = None
    aligner_kind: str = "mlp"
    positional: bool = True
    fixed_gates: bool = False
    reinit_gates: bool = False
    seed: int = 0
    regime: sd.RegimeConfig = sd.RegimeConfig()

    def encoder_config(self, modality: str) -> EncoderConfig:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return self.camera if modality == "camera" else self.range

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemConfig":
        d = dict(d)
        d["transformer"] = TransformerConfig(**d.get("transformer", {}))
        d["camera"] = EncoderConfig(**d.get("camera", asdict(DEFAULT_CAMERA)))
        d["range"] = EncoderConfig(**d.get("range", asdict(DEFAULT_RANGE)))
        d["regime"] = sd.RegimeConfig(**d.get("regime", {}))
        return cls(**d)


def _array_digest(arrays: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(arrays):
        a = np.ascontiguousarray(arrays[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class MPnPSystem:
    """Base LM + frozen encoders + aligners + latent connections."""

    def __init__(self, config: SystemConfig = SystemConfig(), dtype=None):
        self.config = config
        self.dtype = np.dtype(dtype or tc.default_dtype())
        self.vocab = Vocab()
        tcfg = config.transformer
        if len(self.vocab) != tcfg.vocab_size:
            raise ValueError(f"vocab_size {tcfg.vocab_size} != vocabulary size {len(self.vocab)}")
        self.model = DecoderLM(tcfg, seed=config.seed, dtype=self.dtype)
        self.encoders = {m: FrozenEncoder(config.encoder_config(m), seed=config.seed,
                                          dtype=self.dtype) for m in MODALITIES}
        self.aligners: dict[str, ModalityAligners] = {}
        self.active: tuple[str, ...] = ()
        self.plan = plan_connections(tcfg.num_blocks, config.n_connect, d_model=tcfg.model_dim,
                                     lora=config.lora, rank=config.lora_rank,
                                     scaling=config.lora_scaling, temperature=config.temperature,
                                     seed=config.seed, dtype=self.dtype)
        self.plan.fixed_gates = config.fixed_gates
        self.extra: dict[str, Tensor] = {}       # baseline parameters, saved alongside
        self._features: dict[tuple, np.ndarray] = {}

    # -- structure ---------------------------------------------------------------

    @property
    def L(self) -> int:
        return self.config.transformer.num_blocks

    @property
    def N(self) -> int:
        return self.plan.N

    def mount(self, modalities: Sequence[str], fresh: Sequence[str] = (),
              kind: str | None = None) -> None:
        """Make ``modalities`` the active set; new or ``fresh`` ones get new aligners."""
        if not modalities:
            raise ValueError("modality set is empty")
        d = self.config.transformer.model_dim
        for mod in modalities:
            ecfg = self.config.encoder_config(mod)
            if mod not in self.aligners or mod in fresh:
                self.aligners[mod] = ModalityAligners(
                    mod, ecfg.enc_dim, d, ecfg.num_tokens, self.config.aligner_hidden,
                    kind or self.config.aligner_kind, seed=self.config.seed * 10 +
                    MODALITIES.index(mod) + 1, positional=self.config.positional,
                    dtype=self.dtype)
        self.active = tuple(modalities)

    def set_n(self, N: int) -> None:
        if N == self.plan.N:
            return
        fixed = self.plan.fixed_gates
        self.plan = self.plan.resize(N)
        self.plan.fixed_gates = fixed
        if self.config.reinit_gates:
            for w in self.plan.gates.weights.values():
                w.data = np.zeros_like(w.data)

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.model.params)
        for enc in self.encoders.values():
            out.update(enc.params)
        for mod in MODALITIES:
            if mod in self.aligners:
                out.update(self.aligners[mod].params)
        out.update({f"gate.w{j}": w for j, w in sorted(self.plan.gates.weights.items())})
        out.update(self.plan.adapter_params())
        out.update(self.extra)
        return out

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def set_trainable(self, names) -> dict[str, Tensor]:
        params = self.named_parameters()
        names = set(names)
        unknown = names - set(params)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        for n, p in params.items():
            p.requires_grad = n in names
        return {n: params[n] for n in sorted(names)}

    def frozen_digest(self, trainable) -> str:
        return _array_digest({n: p.data for n, p in self.named_parameters().items()
                              if n not in trainable})

    # -- phase trainables --------------------------------------------------------

    def offline_trainables(self, kv_projections: bool = True) -> list[str]:
        names = []
        for mod in self.active:
            names += list(self.aligners[mod].params)
        names += list(self.plan.gate_params())
        if kv_projections:
            names += self.model.kv_projection_names()
        return names

    def runtime_trainables(self, new_modalities: Sequence[str], lora: bool = True) -> list[str]:
        names = []
        for mod in new_modalities:
            names += list(self.aligners[mod].params)
        names += list(self.plan.gate_params())
        if lora:
            names += list(self.plan.adapter_params())
        return names

    # -- features ----------------------------------------------------------------

    def features(self, samples: Sequence[sd.QASample], modality: str, seed: int = 0) -> np.ndarray:
        """Encoder tokens ``(n, m, e)`` for ``samples``; cached per scene and regime."""
        key = lambda s: (modality, seed, s.scene_id, s.regime if modality == "camera" else "")
        missing, seen = [], set()
        for s in samples:
            k = key(s)
            if k not in self._features and k not in seen:
                missing.append(s)
                seen.add(k)
        if missing:
            toks = encode_modality(missing, self.encoders[modality], self.config.regime, seed)
            for s, t in zip(missing, toks):
                self._features[key(s)] = t
        return np.stack([self._features[key(s)] for s in samples])

    # -- forward -------------------------------------------------------------------

    def injections(self, feats: Mapping[str, np.ndarray]):
        kvs = [self.aligners[m](feats[m]) for m in self.active]
        mm = build_multimodal_kv(kvs, positional_for([self.aligners[m] for m in self.active]))
        return make_injections(mm, self.plan)

    def adapters(self, use_lora: bool = True):
        return {j: dict(a) for j, a in self.plan.adapters.items()} if use_lora else {}

    def logits(self, inputs, feats, use_lora: bool = True, stop: bool = False) -> Tensor:
        return self.model.forward(inputs, self.injections(feats), self.adapters(use_lora),
                                  stop_below=self.plan.boundary if stop else None)

    # -- serialization -------------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> Path:
        info = {"system": self.config.to_dict(), "active": list(self.active),
                "aligners": {m: a.key.kind for m, a in self.aligners.items()},
                "N": self.N, "fixed_gates": self.plan.fixed_gates,
                "dtype": self.dtype.str, "extra": sorted(self.extra)}
        if meta:
            info["run"] = meta
        return ckpt.save(path, self.named_parameters(), info)

    @classmethod
    def load(cls, path) -> "MPnPSystem":
        arrays, _, meta = ckpt.load(path)
        if not meta or "system" not in meta:
            raise ckpt.CheckpointError(f"{path}: checkpoint carries no system metadata")
        sysm = cls(SystemConfig.from_dict(meta["system"]), dtype=np.dtype(meta["dtype"]))
        sysm.set_n(meta["N"])
        sysm.plan.fixed_gates = meta["fixed_gates"]
        for mod, kind in meta["aligners"].items():
            sysm.mount([mod], fresh=[mod], kind=kind)
        sysm.active = tuple(meta["active"])
        for name in meta.get("extra", []):
            sysm.extra[name] = tc.parameter(arrays[name], name=name, region_tag="aligner",
                                            dtype=sysm.dtype)
        sysm.load_arrays(arrays)
        sysm.run_meta = meta.get("run", {})
        return sysm

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict and set(arrays) != set(params):
            diff = sorted(set(arrays) ^ set(params))
            raise ckpt.CheckpointError(f"checkpoint/system parameter mismatch: {diff[:6]}")
        for n, a in arrays.items():
            if n not in params:
                continue
            if params[n].shape != a.shape:
                raise ckpt.CheckpointError(f"{n}: shape {a.shape} != {params[n].shape}")
            params[n].data = np.array(a, dtype=params[n].dtype)


# --- training -------------------------------------------------------------------

def param_groups(names: Sequence[str], config: TrainConfig) -> dict[str, ParamGroup]:
    """Gates: ``lr_gates`` without decay; biases and norm gains: no decay."""
    groups = {}
    for n in names:
        leaf = n.rsplit(".", 1)[-1]
        if n.startswith("gate."):
            groups[n] = ParamGroup(config.lr_gates, 0.0)
        elif leaf in ("b", "b1", "b2", "g") or n.endswith(("pos_k", "pos_v")):
            groups[n] = ParamGroup(config.lr_main, 0.0)
        else:
            groups[n] = ParamGroup(config.lr_main, config.weight_decay)
    return groups


@dataclass
class StepRecord:
    phase: str
    modalities: list
    N: int
    step: int
    loss: float
    lr: float
    dy_flops: int
    dw_flops: int


@dataclass
class TrainStats:
    steps: int = 0
    losses: list = field(default_factory=list)
    log: list = field(default_factory=list)
    flops: tc.FlopsCounters = field(default_factory=lambda: tc.FlopsCounters({}))
    seconds: float = 0.0

    @property
    def final_loss(self) -> float:
        return float(np.mean(self.losses[-10:])) if self.losses else float("nan")


def train_step(forward_fn: Callable, batch: Sequence[sd.QASample], optimizer: AdamW,
               vocab: Vocab, checked: bool = False) -> tuple[float, float, tc.FlopsCounters]:
    """Forward, masked LM loss, backward and one optimizer update.

    Returns ``(loss, lr multiplier, FLOPs of this step)``.
    """
    if not batch:
        raise ValueError("train_step: empty batch")
    inputs, targets, mask = make_lm_batch(vocab, [s.question for s in batch],
                                          [s.answer for s in batch])
    with tc.Tape(checked=checked) as tape:
        logits = forward_fn(inputs, batch)
        loss = lm_loss(logits, targets, mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value}")
        tape.backward(loss)
    for name, p in optimizer.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient for {name}")
    mult = optimizer.step()
    optimizer.zero_grad()
    return value, mult, tape.flops_report()


def train(forward_fn: Callable, samples: Sequence[sd.QASample], trainable: Mapping[str, Tensor],
          config: TrainConfig, vocab: Vocab, tag: dict | None = None,
          log_path: str | Path | None = None) -> TrainStats:
    """Minibatch AdamW over ``samples`` for ``config.epochs`` epochs."""
    if not samples:
        raise ValueError("train: empty dataset")
    B = config.batch_size
    steps_per_epoch = -(-len(samples) // B)
    total = steps_per_epoch * config.epochs
    opt = AdamW(trainable, param_groups(list(trainable), config), total_steps=total)
    rng = np.random.default_rng([config.seed, 77])
    stats = TrainStats()
    tag = tag or {}
    t0 = time.perf_counter()
    flops = tc.FlopsCounters({})
    logf = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for _ in range(config.epochs):
            order = rng.permutation(len(samples))
            for k in range(steps_per_epoch):
                batch = [samples[i] for i in order[k * B:(k + 1) * B]]
                loss, mult, step_flops = train_step(forward_fn, batch, opt, vocab, config.checked)
                flops = flops + step_flops
                stats.losses.append(loss)
                stats.steps += 1
                if stats.steps % config.log_every == 0 or stats.steps == total:
                    rec = StepRecord(tag.get("phase", config.phase), list(tag.get("modalities", [])),
                                     tag.get("N", 0), stats.steps, loss,
                                     config.lr_main * mult, step_flops.backward_dy,
                                     step_flops.backward_dw)
                    stats.log.append(asdict(rec))
                    if logf:
                        logf.write(json.dumps(asdict(rec)) + "\n")
    finally:
        if logf:
            logf.close()
    stats.flops = flops
    stats.seconds = time.perf_counter() - t0
    return stats


# --- evaluation -----------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_qtype: dict
    n: int
    predictions: list = field(default_factory=list, repr=False)

    def subset_accuracy(self, qtypes: Sequence[str]) -> float:
        hits = tot = 0
        for q in qtypes:
            if q in self.per_qtype:
                acc, n = self.per_qtype[q]
                hits += round(acc * n)
                tot += n
        return hits / tot if tot else float("nan")


def exact_match(samples: Sequence[sd.QASample], decode_fn: Callable, vocab: Vocab,
                batch: int = 256) -> EvalResult:
    """Greedy-decode each prompt and compare the answer string to gold."""
    if not samples:
        raise ValueError("exact_match: empty split")
    by_len: dict[int, list[int]] = {}
    prompts = [vocab.prompt_ids(s.question) for s in samples]
    for i, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(i)
    preds = [""] * len(samples)
    for _, idx in sorted(by_len.items()):
        for k in range(0, len(idx), batch):
            chunk = idx[k:k + batch]
            ids = np.array([prompts[i] for i in chunk], dtype=np.int64)
            outs = decode_fn(ids, [samples[i] for i in chunk])
            for i, o in zip(chunk, outs):
                preds[i] = vocab.decode(o)
    hits = np.array([p == s.answer for p, s in zip(preds, samples)])
    per = {}
    for q in sd.QTYPES:
        sel = np.array([s.qtype == q for s in samples])
        if sel.any():
            per[q] = (float(hits[sel].mean()), int(sel.sum()))
    return EvalResult(float(hits.mean()), per, len(samples), preds)


def _mpnp_decoder(system: MPnPSystem, seed: int, use_lora: bool = True) -> Callable:
    def decode(ids, batch):
        feats = {m: system.features(batch, m, seed) for m in system.active}
        return greedy_decode(system.model, ids, system.injections(feats), max_new=3,
                             eos_id=system.vocab.eos_id, adapters=system.adapters(use_lora))
    return decode


def exact_match_eval(system: MPnPSystem, samples: Sequence[sd.QASample], data_seed: int = 0,
                     use_lora: bool = True) -> EvalResult:
    return exact_match(samples, _mpnp_decoder(system, data_seed, use_lora), system.vocab)


# --- phases -----------------------------------------------------------------------

@dataclass
class AdaptationResult:
    phase: str
    modalities: list
    N: int
    accuracy_before: float
    accuracy_after: float
    per_qtype_before: dict
    per_qtype_after: dict
    trainable_params: int
    total_params: int
    steps: int
    final_loss: float
    backward_dy: int
    backward_dw: int
    cost_report: cm.CostReport | None = None
    checkpoint: str | None = None
    seconds: float = 0.0
    log: list = field(default_factory=list, repr=False)

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("log", "cost_report")}
        if self.cost_report is not None:
            r = self.cost_report
            d["cost"] = {"analytic": r.analytic_backprop, "measured": r.measured_backprop,
                         "gap": r.gap, "flagged": r.flagged, "lora_dw": r.lora_dw}
        return d


def text_corpus(num_scenes: int = 1500, seed: int = 10_007) -> list[sd.QASample]:
    """Question/answer text with no scene access, for base-model pretraining."""
    ds = sd.generate_dataset(num_scenes=num_scenes, seed=seed)
    return [s for k in sd.SPLITS for s in ds[k]]


def pretrain_base(system: MPnPSystem, corpus: Sequence[sd.QASample], config: TrainConfig,
                  log_path=None) -> TrainStats:
    """Text-only LM training of every base-model weight (stands in for pretraining)."""
    trainable = system.set_trainable(system.model.params)
    fwd = lambda inputs, batch: system.model.forward(inputs)
    cfg = replace(config, phase="pretrain")
    return train(fwd, corpus, trainable, cfg, system.vocab, {"phase": "pretrain"}, log_path)


def offline_prepare(system: MPnPSystem, dataset: sd.Dataset, config: TrainConfig,
                    modalities: Sequence[str] = ("camera",), kv_projections: bool = True,
                    checkpoint_path=None, log_path=None) -> AdaptationResult:
    """Connect the initial modalities and train aligners, gates and all K/V projections."""
    train_set, test_set = dataset["day-train"], dataset["day-test"]
    if not train_set:
        raise ValueError("offline_prepare: empty day-train split")
    system.mount(modalities, fresh=modalities)
    seed = dataset.seed
    before = exact_match_eval(system, test_set, seed, use_lora=False)
    names = system.offline_trainables(kv_projections)
    trainable = system.set_trainable(names)
    feats_fn = lambda batch: {m: system.features(batch, m, seed) for m in system.active}
    fwd = lambda inputs, batch: system.logits(inputs, feats_fn(batch), use_lora=False)
    cfg = replace(config, phase="offline")
    tag = {"phase": "offline", "modalities": list(modalities), "N": system.N}
    stats = train(fwd, train_set, trainable, cfg, system.vocab, tag, log_path)
    system.set_trainable([])
    after = exact_match_eval(system, test_set, seed, use_lora=False)
    path = None
    if checkpoint_path is not None:
        path = str(system.save(checkpoint_path, {"phase": "offline", "data_seed": seed}))
    return AdaptationResult("offline", list(modalities), system.N, before.accuracy,
                            after.accuracy, before.per_qtype, after.per_qtype,
                            int(sum(p.size for p in trainable.values())),
                            system.num_parameters(), stats.steps, stats.final_loss,
                            stats.flops.backward_dy, stats.flops.backward_dw, None, path,
                            stats.seconds, stats.log)


def probe_batch(samples: Sequence[sd.QASample], size: int = 16) -> list[sd.QASample]:
    """A fixed, shape-stable batch: the first ``size`` samples by id."""
    return sorted(samples, key=lambda s: s.id)[:size]


def measure_step(system: MPnPSystem, batch: Sequence[sd.QASample], trainable_names,
                 data_seed: int = 0, use_lora: bool = True, pad_to: int | None = None
                 ) -> tc.FlopsCounters:
    """FLOPs of one adaptation-mode forward/backward (no parameter update)."""
    trainable = system.set_trainable(trainable_names)
    inputs, targets, mask = make_lm_batch(system.vocab, [s.question for s in batch],
                                          [s.answer for s in batch])
    if pad_to is not None and pad_to > inputs.shape[1]:
        extra = pad_to - inputs.shape[1]
        inputs = np.pad(inputs, ((0, 0), (0, extra)), constant_values=system.vocab.pad_id)
        targets = np.pad(targets, ((0, 0), (0, extra)), constant_values=system.vocab.pad_id)
        mask = np.pad(mask, ((0, 0), (0, extra)))
    feats = {m: system.features(batch, m, data_seed) for m in system.active}
    with tc.Tape() as tape:
        loss = lm_loss(system.logits(inputs, feats, use_lora, stop=True), targets, mask)
        tape.backward(loss)
    tc.zero_grads(trainable.values())
    system.set_trainable([])
    return tape.flops_report()


def cost_reconciliation(system: MPnPSystem, batch, new_modalities, data_seed: int = 0,
                        use_lora: bool = True, tolerance: float = 0.05) -> cm.CostReport:
    """Measured step at the current N against the model calibrated at N = L."""
    N = system.N
    names = lambda: system.runtime_trainables(new_modalities, use_lora)
    measured = measure_step(system, batch, names(), data_seed, use_lora)
    saved = system.plan
    system.plan = saved.resize(system.L)
    system.plan.fixed_gates = saved.fixed_gates
    try:
        reference = measure_step(system, batch, names(), data_seed, use_lora)
    finally:
        system.plan = saved
    return cm.reconcile(measured, cm.calibrate(reference, system.L, N), tolerance)


def runtime_adapt(system: MPnPSystem, dataset: sd.Dataset, new_modalities: Sequence[str],
                  config: TrainConfig, n: int | None = None, keep: Sequence[str] = (),
                  lora: bool = True, aligner_kind: str | None = None,
                  checkpoint_path=None, log_path=None) -> AdaptationResult:
    """Mount ``new_modalities`` (plus frozen ``keep`` modalities) and adapt on night-train.

    Trainables: the new modalities' aligners and positional rows, the gates,
    and LoRA on the connected blocks' K/V projections.  Gradients stop below
    block ``L - N + 1``.  Every other parameter is checked bit-identical
    afterwards.
    """
    if not new_modalities:
        raise ValueError("runtime_adapt: modality set is empty")
    if not system.active:
        raise ValueError("runtime_adapt: no offline-prepared modalities (load a checkpoint)")
    train_set, test_set = dataset["night-train"], dataset["night-test"]
    if not train_set:
        raise ValueError("runtime_adapt: empty night-train split")
    seed = dataset.seed
    lora = lora and system.config.lora
    before = exact_match_eval(system, test_set, seed, use_lora=lora)
    if n is not None:
        system.set_n(n)
    system.mount([*keep, *new_modalities], fresh=new_modalities, kind=aligner_kind)
    names = system.runtime_trainables(new_modalities, lora)
    report = cost_reconciliation(system, probe_batch(train_set), new_modalities, seed, lora)
    trainable = system.set_trainable(names)
    frozen_before = system.frozen_digest(trainable)
    feats_fn = lambda batch: {m: system.features(batch, m, seed) for m in system.active}
    fwd = lambda inputs, batch: system.logits(inputs, feats_fn(batch), lora, stop=True)
    cfg = replace(config, phase="runtime")
    tag = {"phase": "runtime", "modalities": list(system.active), "N": system.N}
    stats = train(fwd, train_set, trainable, cfg, system.vocab, tag, log_path)
    system.set_trainable([])
    if system.frozen_digest(trainable) != frozen_before:
        raise FreezeViolation("a frozen parameter changed during runtime adaptation")
    after = exact_match_eval(system, test_set, seed, use_lora=lora)
    path = None
    if checkpoint_path is not None:
        path = str(system.save(checkpoint_path, {"phase": "runtime", "data_seed": seed}))
    return AdaptationResult("runtime", list(system.active), system.N, before.accuracy,
                            after.accuracy, before.per_qtype, after.per_qtype,
                            int(sum(p.size for p in trainable.values())),
                            system.num_parameters(), stats.steps, stats.final_loss,
                            stats.flops.backward_dy, stats.flops.backward_dw, report, path,
                            stats.seconds, stats.log)


# --- input-layer baselines ----------------------------------------------------------

class InputLayerBaseline:
    """Aligner outputs (and an optional soft prompt) prepended to the text embeddings."""

    def __init__(self, system: MPnPSystem, modalities: Sequence[str], variant: str = "prompt-tune",
                 soft_prompt_len: int = 4, seed: int = 0):
        if variant not in ("prompt-tune", "full-finetune"):
            raise ValueError(f"unknown baseline variant {variant!r}")
        if not modalities:
            raise ValueError("baseline needs at least one modality")
        self.system, self.variant, self.modalities = system, variant, tuple(modalities)
        d = system.config.transformer.model_dim
        self.model = copy.deepcopy(system.model) if variant == "full-finetune" else system.model
        self.aligners = {}
        for mod in modalities:
            ecfg = system.config.encoder_config(mod)
            self.aligners[mod] = Aligner(ecfg.enc_dim, d, system.config.aligner_hidden,
                                         system.config.aligner_kind, seed=seed * 10 + 7,
                                         name=f"baseline.{mod}.aligner", dtype=system.dtype)
        self.soft_prompt = None
        if variant == "prompt-tune":
            rng = np.random.default_rng([seed, 606])
            self.soft_prompt = tc.parameter(rng.standard_normal((soft_prompt_len, d)) * 0.02,
                                            name="baseline.soft_prompt", region_tag="aligner",
                                            dtype=system.dtype)

    @property
    def params(self) -> dict[str, Tensor]:
        out = {}
        for a in self.aligners.values():
            out.update(a.params)
        if self.soft_prompt is not None:
            out[self.soft_prompt.name] = self.soft_prompt
        if self.variant == "full-finetune":
            out.update({f"baseline.llm.{k}": v for k, v in self.model.params.items()})
        return out

    @property
    def prefix_len(self) -> int:
        n = sum(self.system.config.encoder_config(m).num_tokens for m in self.modalities)
        return n + (0 if self.soft_prompt is None else self.soft_prompt.shape[0])

    def prefix(self, feats) -> Tensor:
        parts = [self.aligners[m](feats[m]) for m in self.modalities]
        if self.soft_prompt is not None:
            B = parts[0].shape[0]
            with tc.region("aligner"):
                soft = tc.add(self.soft_prompt, np.zeros((B, *self.soft_prompt.shape),
                                                         dtype=self.system.dtype))
            parts = [soft, *parts]
        if len(parts) == 1:
            return parts[0]
        with tc.region("aligner"):
            return tc.concat(parts, axis=1)

    def logits(self, inputs, feats) -> Tensor:
        return self.model.forward(inputs, prefix=self.prefix(feats))

    def set_trainable(self) -> dict[str, Tensor]:
        self.system.set_trainable([])
        for p in self.model.params.values():
            p.requires_grad = self.variant == "full-finetune"
        for p in self.params.values():
            p.requires_grad = True
        return self.params

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
        self.system.set_trainable([])

    def decoder(self, seed: int) -> Callable:
        def decode(ids, batch):
            feats = {m: self.system.features(batch, m, seed) for m in self.modalities}
            return greedy_decode(self.model, ids, max_new=3, eos_id=self.system.vocab.eos_id,
                                 prefix=self.prefix(feats))
        return decode

    def measure_step(self, batch, data_seed: int = 0) -> tc.FlopsCounters:
        trainable = self.set_trainable()
        inputs, targets, mask = make_lm_batch(self.system.vocab, [s.question for s in batch],
                                              [s.answer for s in batch])
        feats = {m: self.system.features(batch, m, data_seed) for m in self.modalities}
        with tc.Tape() as tape:
            loss = lm_loss(self.logits(inputs, feats), targets, mask)
            tape.backward(loss)
        tc.zero_grads(trainable.values())
        self.freeze()
        return tape.flops_report()


def baseline_input_layer(system: MPnPSystem, dataset: sd.Dataset, config: TrainConfig,
                         variant: str = "prompt-tune", modalities: Sequence[str] = ("range",),
                         soft_prompt_len: int = 4, log_path=None) -> AdaptationResult:
    """Train an input-layer baseline on night-train and evaluate on night-test.

    The full-finetune variant trains a copy of the base model, so ``system``
    is left untouched either way.
    """
    train_set, test_set = dataset["night-train"], dataset["night-test"]
    if not train_set:
        raise ValueError("baseline: empty night-train split")
    seed = dataset.seed
    base = InputLayerBaseline(system, modalities, variant, soft_prompt_len, config.seed)
    before = exact_match(test_set, base.decoder(seed), system.vocab)
    trainable = base.set_trainable()
    feats_fn = lambda batch: {m: system.features(batch, m, seed) for m in modalities}
    fwd = lambda inputs, batch: base.logits(inputs, feats_fn(batch))
    cfg = replace(config, phase="baseline")
    tag = {"phase": f"baseline-{variant}", "modalities": list(modalities), "N": system.L}
    stats = train(fwd, train_set, trainable, cfg, system.vocab, tag, log_path)
    base.freeze()
    after = exact_match(test_set, base.decoder(seed), system.vocab)
    total = system.num_parameters() + sum(p.size for a in base.aligners.values()
                                          for p in a.params.values())
    return AdaptationResult(f"baseline-{variant}", list(modalities), system.L, before.accuracy,
                            after.accuracy, before.per_qtype, after.per_qtype,
                            int(sum(p.size for p in trainable.values())), int(total),
                            stats.steps, stats.final_loss, stats.flops.backward_dy,
                            stats.flops.backward_dw, None, None, stats.seconds, stats.log)


def block_dy_comparison(system: MPnPSystem, batch, modalities: Sequence[str] = ("range",),
                        n: int | None = None, soft_prompt_len: int = 4,
                        data_seed: int = 0) -> dict:
    """Per-step dy-FLOPs through the LLM blocks: prompt-tune baseline vs mPnP.

    Both runs see the same ``(B, S)`` token-tensor shape: the mPnP text is
    right-padded by the baseline's prefix length.
    """
    base = InputLayerBaseline(system, modalities, "prompt-tune", soft_prompt_len)
    b_flops = base.measure_step(batch, data_seed)
    saved_plan, saved_active = system.plan, system.active
    try:
        if n is not None:
            system.plan = saved_plan.resize(n)
            system.plan.fixed_gates = saved_plan.fixed_gates
        system.mount(modalities)
        inputs, _, _ = make_lm_batch(system.vocab, [s.question for s in batch],
                                     [s.answer for s in batch])
        m_flops = measure_step(system, batch, system.runtime_trainables(modalities),
                               data_seed, pad_to=inputs.shape[1] + base.prefix_len)
    finally:
        system.plan, system.active = saved_plan, saved_active
    dy = lambda f: sum(r.backward_dy for r in f.blocks().values())
    return {"baseline_dy": dy(b_flops), "mpnp_dy": dy(m_flops),
            "ratio": dy(b_flops) / dy(m_flops), "N": n or system.N, "L": system.L}


# --- full pipeline and ablations ------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    system: SystemConfig = SystemConfig()
    pretrain: TrainConfig = TrainConfig(epochs=1, lr_main=3e-3, phase="pretrain", batch_size=32)
    offline: TrainConfig = TrainConfig(epochs=30, lr_main=5e-3, weight_decay=0.5, phase="offline")
    runtime: TrainConfig = TrainConfig(epochs=30, lr_main=5e-3, weight_decay=0.5, phase="runtime")
    pretrain_scenes: int = 1500
    offline_modalities: tuple = ("camera",)
    runtime_modalities: tuple = ("range",)
    keep_modalities: tuple = ()


def pretrained_system(pcfg: PipelineConfig, log_path=None) -> tuple[MPnPSystem, TrainStats]:
    system = MPnPSystem(pcfg.system)
    corpus = text_corpus(pcfg.pretrain_scenes, seed=pcfg.system.seed + 10_007)
    stats = pretrain_base(system, corpus, pcfg.pretrain, log_path)
    system.set_trainable([])
    return system, stats


def offline_system(pcfg: PipelineConfig, dataset: sd.Dataset, base_state=None,
                   ablation: str | None = None, checkpoint_path=None, log_path=None):
    """Pretrain (or reuse ``base_state`` arrays) and run the offline phase."""
    scfg = pcfg.system
    if ablation == "linear_aligner":
        scfg = replace(scfg, aligner_kind="linear")
    elif ablation == "fixed_gates":
        scfg = replace(scfg, fixed_gates=True)
    system = MPnPSystem(scfg)
    if base_state is None:
        corpus = text_corpus(pcfg.pretrain_scenes, seed=pcfg.system.seed + 10_007)
        pretrain_base(system, corpus, pcfg.pretrain, log_path)
        system.set_trainable([])
    else:
        system.load_arrays(base_state, strict=False)
    off = offline_prepare(system, dataset, pcfg.offline, pcfg.offline_modalities,
                          kv_projections=ablation != "no_offline_kv",
                          checkpoint_path=checkpoint_path, log_path=log_path)
    return system, off


def base_state(system: MPnPSystem) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in system.model.params.items()}


def ablation_suite(pcfg: PipelineConfig, dataset: sd.Dataset,
                   flags: Sequence[str | None] = (None, *ABLATIONS),
                   reference_state: Mapping[str, np.ndarray] | None = None) -> list[dict]:
    """One row per flag (``None`` is the unablated reference): offline + runtime.

    ``linear_aligner`` and ``fixed_gates`` apply to both phases, ``no_lora``
    to the runtime phase, ``no_offline_kv`` to the offline phase.
    """
    for f in flags:
        if f is not None and f not in ABLATIONS:
            raise ValueError(f"unknown ablation flag {f!r}")
    if reference_state is None:
        ref, _ = pretrained_system(pcfg)
        reference_state = base_state(ref)
    rows = []
    ref_acc = None
    for f in flags:
        system, off = offline_system(pcfg, dataset, reference_state, f)
        res = runtime_adapt(system, dataset, pcfg.runtime_modalities, pcfg.runtime,
                            keep=pcfg.keep_modalities, lora=f != "no_lora")
        acc = res.accuracy_after
        sub = EvalResult(acc, res.per_qtype_after, 0).subset_accuracy(EVAL_QTYPES)
        if f is None:
            ref_acc = acc
        rows.append({"ablation": f or "none", "offline_day_acc": off.accuracy_after,
                     "night_acc_before": res.accuracy_before, "night_acc": acc,
                     "night_acc_exists_count_side": sub,
                     "delta": None if ref_acc is None else acc - ref_acc,
                     "trainable_params": res.trainable_params,
                     "backward_dy": res.backward_dy, "backward_dw": res.backward_dw})
    return rows


def run_pipeline(pcfg: PipelineConfig, dataset: sd.Dataset, base: Mapping | None = None,
                 out_dir=None) -> dict:
    """Pretrain, offline on day-camera, evaluate night camera-only, adapt at runtime."""
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log = out / "metrics.jsonl" if out else None
    t0 = time.perf_counter()
    system, off = offline_system(pcfg, dataset, base,
                                 checkpoint_path=out / "offline.ckpt" if out else None,
                                 log_path=log)
    night_cam = exact_match_eval(system, dataset["night-test"], dataset.seed, use_lora=False)
    res = runtime_adapt(system, dataset, pcfg.runtime_modalities, pcfg.runtime,
                        keep=pcfg.keep_modalities,
                        checkpoint_path=out / "runtime.ckpt" if out else None, log_path=log)
    return {"system": system, "offline": off, "night_camera": night_cam, "runtime": res,
            "seconds": time.perf_counter() - t0}
