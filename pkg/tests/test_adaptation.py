import numpy as np
import pytest
from conftest import tiny_system
from hypothesis import given, settings, strategies as st

from mpnplab import adaptation as ad
from mpnplab import synthdata as sd
from mpnplab import tensorcore as tc
from mpnplab.optim import AdamW, ParamGroup, linear_decay
from mpnplab.vocab import Vocab, make_lm_batch

FAST = ad.TrainConfig(batch_size=8, epochs=1, lr_main=5e-3)


@pytest.fixture(scope="module")
def data():
    return sd.generate_dataset(num_scenes=24, seed=4)


def _offline(data, **kw):
    s = tiny_system(**kw)
    ad.offline_prepare(s, data, FAST)
    return s


# --- optimizer ---------------------------------------------------------------------

def test_linear_decay_schedule():
    assert [linear_decay(k, 4) for k in range(5)] == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert linear_decay(3, 0) == 1.0


def test_zero_lr_leaves_parameters_unchanged():
    p = tc.parameter(np.arange(6.0).reshape(2, 3), name="p")
    opt = AdamW({"p": p}, {"p": ParamGroup(0.0, 0.5)})
    before = p.data.copy()
    p.grad = np.ones_like(p.data)
    opt.step()
    assert p.data.tobytes() == before.tobytes()


def test_decoupled_decay_with_zero_gradient():
    p = tc.parameter(np.full(4, 2.0), name="p")
    opt = AdamW({"p": p}, {"p": ParamGroup(0.1, 0.5)})
    p.grad = np.zeros(4)
    opt.step()
    np.testing.assert_allclose(p.data, 2.0 * (1 - 0.1 * 0.5), rtol=1e-6)


def test_optimizer_converges_on_a_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = tc.parameter(np.zeros(3), name="p")
    opt = AdamW({"p": p}, {"p": ParamGroup(0.1, 0.0)})
    for _ in range(100):
        with tc.Tape() as tape:
            d = tc.add(p, -target)
            tape.backward(tc.sum(tc.mul(d, d)))
        opt.step()
        opt.zero_grad()
    np.testing.assert_allclose(p.data, target, atol=0.05)


def test_optimizer_rejects_bad_groups():
    p = tc.parameter(np.zeros(2), name="p")
    with pytest.raises(ValueError):
        AdamW({"p": p}, {})
    with pytest.raises(ValueError):
        AdamW({"p": p}, {"p": ParamGroup(-1.0, 0.0)})


def test_param_groups_exempt_gates_and_biases():
    cfg = ad.TrainConfig(lr_main=1e-3, lr_gates=0.1, weight_decay=0.2)
    g = ad.param_groups(["gate.w3", "block1.attn.wq", "block1.attn.b", "range.aligner.pos_k"],
                        cfg)
    assert g["gate.w3"] == ParamGroup(0.1, 0.0)
    assert g["block1.attn.wq"] == ParamGroup(1e-3, 0.2)
    assert g["block1.attn.b"].weight_decay == 0.0
    assert g["range.aligner.pos_k"].weight_decay == 0.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        ad.TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        ad.TrainConfig(lr_main=0.0)
    with pytest.raises(ValueError):
        ad.TrainConfig(schedule="cosine")


# --- vocabulary and batches --------------------------------------------------------

def test_prompt_layout_and_mask():
    v = Vocab()
    q = sd.question_text("exists", "circle")
    ids = v.full_ids(q, "yes")
    assert v.decode(ids) == f"question: {q} </s> answer: yes </s>"
    inputs, targets, mask = make_lm_batch(v, [q, sd.question_text("color", "square")],
                                          ["yes", "red"])
    assert inputs.shape == targets.shape == mask.shape
    assert v.decode(targets[0][mask[0]]) == "yes </s>"
    assert mask.sum() == 4
    with pytest.raises(ValueError):
        v.encode(["zebra"])


# --- exact match -------------------------------------------------------------------

def test_exact_match_examples(data):
    v = Vocab()
    samples = data["day-test"][:6]
    gold = lambda ids, batch: [v.encode(s.answer.split()) for s in batch]
    res = ad.exact_match(samples, gold, v)
    assert res.accuracy == 1.0 and res.n == 6
    wrong = lambda ids, batch: [v.encode(["no" if s.answer != "no" else "yes"]) for s in batch]
    assert ad.exact_match(samples, wrong, v).accuracy == 0.0
    with pytest.raises(ValueError):
        ad.exact_match([], gold, v)


def test_subset_accuracy_pools_counts():
    r = ad.EvalResult(0.0, {"exists": (0.5, 4), "count": (1.0, 2), "color": (0.0, 10)}, 16)
    assert r.subset_accuracy(ad.EVAL_QTYPES) == pytest.approx(4 / 6)


# --- phases ------------------------------------------------------------------------

def test_zero_epochs_change_nothing(data):
    s = tiny_system()
    s.mount(["camera"], fresh=["camera"])
    before = ad._array_digest({k: p.data for k, p in s.named_parameters().items()})
    trainable = s.set_trainable(s.offline_trainables())
    fwd = lambda inputs, batch: s.logits(inputs, {"camera": s.features(batch, "camera")})
    stats = ad.train(fwd, data["day-train"], trainable, ad.TrainConfig(epochs=0), s.vocab)
    assert stats.steps == 0
    assert ad._array_digest({k: p.data for k, p in s.named_parameters().items()}) == before


def test_train_step_rejects_empty_batch(data):
    s = tiny_system()
    opt = AdamW({}, {})
    with pytest.raises(ValueError):
        ad.train_step(lambda i, b: None, [], opt, s.vocab)


def test_offline_trains_only_its_parameters(data):
    s = tiny_system()
    s.mount(["camera"], fresh=["camera"])
    names = set(s.offline_trainables())
    ref = {k: p.data.copy() for k, p in s.named_parameters().items()}
    res = ad.offline_prepare(s, data, FAST)
    changed = {k for k, p in s.named_parameters().items()
               if p.data.tobytes() != ref.get(k, np.empty(0)).tobytes()}
    assert changed and changed <= names | {k for k in changed if k not in ref}
    assert not any(k.startswith("camera.enc") for k in changed)
    assert res.steps == -(-len(data["day-train"]) // 8)


def test_runtime_freeze_soundness(data):
    s = _offline(data)
    ref = {k: p.data.copy() for k, p in s.named_parameters().items()}
    res = ad.runtime_adapt(s, data, ["range"], FAST, n=2)
    trainable = set(s.runtime_trainables(["range"]))
    for k, p in s.named_parameters().items():
        if k not in trainable and k in ref:
            assert p.data.tobytes() == ref[k].tobytes(), k
    assert res.N == 2 and res.trainable_fraction < 0.5
    assert res.cost_report is not None and res.cost_report.gap <= 0.05


def test_runtime_requires_prepared_system(data):
    with pytest.raises(ValueError):
        ad.runtime_adapt(tiny_system(), data, ["range"], FAST)
    with pytest.raises(ValueError):
        ad.runtime_adapt(_offline(data), data, [], FAST)


def test_boundary_soundness_and_monotone_cost(data):
    s = _offline(data)
    s.mount(["range"], fresh=["range"])
    batch = ad.probe_batch(data["night-train"], 8)
    totals = []
    for n in range(1, s.L + 1):
        s.set_n(n)
        f = ad.measure_step(s, batch, s.runtime_trainables(["range"]), data.seed)
        blocks = f.blocks()
        for j in range(1, s.L - n + 1):
            r = f.region(f"block[{j}]")
            assert r.backward_dy == 0 and r.backward_dw == 0
        totals.append(f.backward_dy + f.backward_dw)
    assert all(a < b for a, b in zip(totals, totals[1:]))


@pytest.mark.parametrize("n", [1, 3])
def test_no_lora_census(n):
    s = tiny_system(n_connect=n, lora_rank=2)
    s.mount(["camera"])
    s.mount(["range"], fresh=["range"])
    params = s.named_parameters()
    count = lambda names: sum(params[x].size for x in names)
    diff = count(s.runtime_trainables(["range"])) - \
        count(s.runtime_trainables(["range"], lora=False))
    assert diff == 4 * n * 16 * 2


def test_baseline_trainable_counts(data):
    s = _offline(data)
    pt = ad.InputLayerBaseline(s, ["range"], "prompt-tune")
    ff = ad.InputLayerBaseline(s, ["range"], "full-finetune")
    n_pt = sum(p.size for p in pt.params.values())
    n_ff = sum(p.size for p in ff.params.values())
    assert n_ff > 10 * n_pt
    assert pt.prefix_len == s.config.range.num_tokens + 4
    with pytest.raises(ValueError):
        ad.InputLayerBaseline(s, ["range"], "lora-everywhere")
    res = ad.baseline_input_layer(s, data, FAST, "full-finetune")
    assert res.trainable_params == n_ff
    assert s.model.params is not ff.model.params


def test_block_dy_parity_at_full_connection(data):
    s = ad.MPnPSystem(ad.SystemConfig())
    s.mount(["camera"], fresh=["camera"])
    batch = ad.probe_batch(data["night-train"])
    out = ad.block_dy_comparison(s, batch, n=s.L, data_seed=data.seed)
    assert out["ratio"] == pytest.approx(1.0, rel=0.05)
    half = ad.block_dy_comparison(s, batch, n=s.L // 2, data_seed=data.seed)
    assert 1.7 <= half["ratio"] <= 2.2


def test_ablation_suite_rejects_unknown_flag(data):
    with pytest.raises(ValueError):
        ad.ablation_suite(ad.PipelineConfig(), data, flags=["no_such_thing"])


def test_system_save_load_roundtrip(data, tmp_path):
    s = _offline(data)
    s.mount(["range"], fresh=["range"])
    s.set_n(2)
    p = s.save(tmp_path / "a.ckpt", {"phase": "test"})
    t = ad.MPnPSystem.load(p)
    assert t.N == 2 and t.active == ("range",)
    assert t.run_meta == {"phase": "test"}
    t.save(tmp_path / "b.ckpt", {"phase": "test"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    batch = data["night-test"][:4]
    inputs, _, _ = make_lm_batch(s.vocab, [b.question for b in batch], [b.answer for b in batch])
    feats = lambda sys_: {"range": sys_.features(batch, "range", data.seed)}
    assert s.logits(inputs, feats(s)).data.tobytes() == t.logits(inputs, feats(t)).data.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4))
def test_trainable_count_grows_with_n(a, b):
    counts = {}
    for n in {a, b}:
        s = tiny_system(n_connect=n)
        s.mount(["camera"])
        s.mount(["range"], fresh=["range"])
        params = s.named_parameters()
        counts[n] = sum(params[x].size for x in s.runtime_trainables(["range"]))
    if a < b:
        assert counts[a] < counts[b]
