import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from mpnplab import tensorcore as tc
from mpnplab.adaptation import MPnPSystem, SystemConfig
from mpnplab.mpnp import (Aligner, GateSet, LoRAAdapter, ModalityAligners, PositionalKV,
                          aligner_forward, build_multimodal_kv, gate_alpha, gate_alphas,
                          lora_kv_project, make_injections, plan_connections)
from mpnplab.transformer import DecoderLM, InjectedKV, TransformerConfig, lm_loss
from conftest import check_grads


# --- aligners -------------------------------------------------------------------

def test_aligner_killed_second_layer_outputs_bias():
    al = Aligner(5, 3, hidden=4, seed=0)
    al.params["aligner.w2"].data[:] = 0
    al.params["aligner.b2"].data[:] = [1.0, -2.0, 0.5]
    out = al(np.random.default_rng(0).normal(size=(6, 5))).data
    np.testing.assert_allclose(out, np.tile([1.0, -2.0, 0.5], (6, 1)))


def test_aligner_identity_weights_map_zero_to_zero():
    al = Aligner(4, 4, hidden=4)
    al.params["aligner.w1"].data[:] = np.eye(4)
    al.params["aligner.w2"].data[:] = np.eye(4)
    assert not al(np.zeros((3, 4))).data.any()


def test_linear_aligner_is_affine_and_mlp_is_not():
    rng = np.random.default_rng(1)
    x1, x2 = rng.normal(size=(2, 6)), rng.normal(size=(2, 6))
    lin = Aligner(6, 8, kind="linear", seed=2)
    lin.params["aligner.b"].data[:] = 0
    np.testing.assert_allclose(lin(x1 + x2).data, lin(x1).data + lin(x2).data, rtol=1e-5,
                               atol=1e-6)
    assert set(lin.params) == {"aligner.w", "aligner.b"}
    mlp = Aligner(6, 8, seed=2)
    mlp.params["aligner.b1"].data[:] = 0.1
    assert not np.allclose(mlp(x1 + x2).data, mlp(x1).data + mlp(x2).data, atol=1e-3)


def test_aligner_errors_and_region():
    with pytest.raises(ValueError):
        Aligner(3, 3, kind="conv")
    al = Aligner(4, 2)
    with pytest.raises(tc.ShapeError):
        al(np.ones((2, 5)))
    with tc.Tape() as tape:
        aligner_forward(np.ones((2, 4)), al)
    assert set(tape.flops_report().by_region) == {"aligner"}


# --- multimodal K/V ---------------------------------------------------------------

def _kv(rng, m, d=4):
    return tc.constant(rng.normal(size=(m, d))), tc.constant(rng.normal(size=(m, d)))


def test_single_modality_without_positions_is_identity():
    rng = np.random.default_rng(2)
    k, v = _kv(rng, 3)
    mm = build_multimodal_kv([(k, v)], PositionalKV(None, None, enabled=False))
    assert mm.keys.data.tobytes() == k.data.tobytes()
    assert mm.values.data.tobytes() == v.data.tobytes()


def test_two_modalities_concatenate_in_order():
    rng = np.random.default_rng(3)
    (k1, v1), (k2, v2) = _kv(rng, 4), _kv(rng, 4)
    mm = build_multimodal_kv([(k1, v1), (k2, v2)])
    assert mm.num_tokens == 8 and mm.sizes == (4, 4)
    np.testing.assert_array_equal(mm.keys.data[:4], k1.data)
    np.testing.assert_array_equal(mm.values.data[4:], v2.data)


def test_positional_rows_are_added_and_checked():
    rng = np.random.default_rng(4)
    k, v = _kv(rng, 3)
    pk, pv = tc.constant(np.ones((3, 4))), tc.constant(2 * np.ones((3, 4)))
    mm = build_multimodal_kv([(k, v)], PositionalKV(pk, pv))
    np.testing.assert_allclose(mm.keys.data, k.data + 1)
    np.testing.assert_allclose(mm.values.data, v.data + 2)
    with pytest.raises(tc.ShapeError):
        build_multimodal_kv([(k, v)], PositionalKV(tc.constant(np.ones((2, 4))), pv))
    with pytest.raises(tc.ShapeError):
        build_multimodal_kv([(k, v), _kv(rng, 2, d=5)])
    with pytest.raises(ValueError):
        build_multimodal_kv([])


# --- gates ----------------------------------------------------------------------------

def test_gate_alpha_values():
    assert float(gate_alpha(tc.constant(0.0), 3.0).data) == pytest.approx(0.5)
    with tc.precision(64):
        a = float(gate_alpha(tc.constant(1.0, dtype=np.float64), 1.0).data)
    assert a == pytest.approx(0.7310585786300049, abs=1e-12)
    assert float(gate_alpha(tc.constant(1.0), 1e-3).data) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        gate_alpha(tc.constant(1.0), 0.0)
    with pytest.raises(ValueError):
        GateSet({}, temperature=-1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(0.05, 10))
def test_gate_range(w, T):
    # float64 sigmoid rounds to exactly 1.0 beyond |w / T| ~ 37
    assume(abs(w / T) <= 30)
    with tc.precision(64):
        a = float(gate_alpha(tc.constant(w, dtype=np.float64), T).data)
    assert 0.0 < a < 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.01, 2), st.floats(0.2, 3), st.floats(0.2, 3))
def test_gate_monotonicity(w, dw, T1, T2):
    with tc.precision(64):
        f = lambda w_, T: float(gate_alpha(tc.constant(w_, dtype=np.float64), T).data)
        assert f(w + dw, T1) > f(w, T1)
        assume(abs(w) > 1e-3 and abs(T1 - T2) > 1e-3)
        lo, hi = sorted((T1, T2))
        assert abs(f(w, lo) - 0.5) > abs(f(w, hi) - 0.5)


# --- LoRA ---------------------------------------------------------------------------------

def test_fresh_lora_is_bit_identical_to_base():
    rng = np.random.default_rng(5)
    h = tc.constant(rng.normal(size=(2, 3, 8)))
    w = tc.constant(rng.normal(size=(8, 8)))
    ad = LoRAAdapter(8, rank=2, seed=1)
    assert not ad.up.data.any()
    assert lora_kv_project(h, w, ad).data.tobytes() == tc.matmul(h, w).data.tobytes()


def test_full_rank_lora_reduces_to_updated_weight(f64):
    rng = np.random.default_rng(6)
    d = 5
    h = tc.constant(rng.normal(size=(3, d)))
    w = tc.constant(rng.normal(size=(d, d)))
    delta = rng.normal(size=(d, d))
    ad = LoRAAdapter(d, rank=d)
    ad.down.data[:] = np.eye(d)
    ad.up.data[:] = delta
    np.testing.assert_allclose(lora_kv_project(h, w, ad).data, h.data @ (w.data + delta),
                               rtol=1e-12)


def test_lora_rank_validation_and_dw_only_on_adapter():
    with pytest.raises(ValueError):
        LoRAAdapter(4, rank=5)
    rng = np.random.default_rng(7)
    w = tc.constant(rng.normal(size=(6, 6)))
    ad = LoRAAdapter(6, rank=2, region="block[1]")
    h = tc.constant(rng.normal(size=(2, 6)))
    with tc.Tape() as tape, tc.region("block[1]"):
        tape.backward(tc.sum(lora_kv_project(h, w, ad)))
    assert w.grad is None
    assert ad.up.grad is not None and ad.down.grad is not None
    assert tape.flops_report().region("block[1]").backward_dw > 0


# --- connection plans ---------------------------------------------------------------------

def test_plan_connected_sets():
    assert plan_connections(24, 24, d_model=8).connected == list(range(1, 25))
    p = plan_connections(24, 13, d_model=8)
    assert p.connected == list(range(12, 25)) and p.boundary == 12
    with pytest.raises(ValueError):
        plan_connections(6, 0, d_model=8)
    with pytest.raises(ValueError):
        plan_connections(6, 7, d_model=8)


def test_plan_resize_retention():
    p16 = plan_connections(24, 16, d_model=8, rank=2)
    for j, w in p16.gates.weights.items():
        w.data = np.asarray(float(j))
    p13 = p16.resize(13)
    assert set(p13.adapters) == set(range(12, 25))
    p16b = p13.resize(16)
    for j in range(12, 25):
        assert p16b.gates.weights[j] is p16.gates.weights[j]
        assert p16b.adapters[j] is p16.adapters[j]
    for j in (9, 10, 11):
        assert float(p16b.gates.weights[j].data) == 0.0
        assert p16b.adapters[j]["k"] is not p16.adapters[j]["k"]
        assert not p16b.adapters[j]["v"].up.data.any()


def test_make_injections_gates():
    rng = np.random.default_rng(8)
    plan = plan_connections(6, 3, d_model=4)
    mm = build_multimodal_kv([_kv(rng, 2)])
    inj = make_injections(mm, plan)
    assert sorted(inj) == [4, 5, 6]
    assert all(float(i.gate.data) == 0.5 for i in inj.values())
    assert sorted(gate_alphas(plan.gates)) == [4, 5, 6]
    plan.fixed_gates = True
    fixed = make_injections(mm, plan)
    assert all(i.gate == 1.0 for i in fixed.values())
    assert plan.gate_params() == {}


def test_gradient_into_shared_kv_is_sum_of_block_paths(f64):
    rng = np.random.default_rng(9)
    cfg = TransformerConfig(num_blocks=4, model_dim=8, num_heads=2, vocab_size=11,
                            max_text_len=10, ffn_hidden=12)
    model = DecoderLM(cfg, seed=1, dtype=np.float64)
    model.freeze()
    ids = rng.integers(0, 11, size=(2, 5))
    kd, vd = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    blocks = (2, 3, 4)

    def grads(shared):
        if shared:
            k = tc.parameter(kd.copy(), name="k", dtype=np.float64)
            v = tc.parameter(vd.copy(), name="v", dtype=np.float64)
            ks, vs = [k] * 3, [v] * 3
        else:
            ks = [tc.parameter(kd.copy(), name=f"k{j}", dtype=np.float64) for j in blocks]
            vs = [tc.parameter(vd.copy(), name=f"v{j}", dtype=np.float64) for j in blocks]
        inj = {j: InjectedKV(ks[i], vs[i], 0.3 + 0.2 * i) for i, j in enumerate(blocks)}
        with tc.Tape() as tape:
            tape.backward(lm_loss(model.forward(ids, inj), ids, np.ones_like(ids)))
        if shared:
            return ks[0].grad, vs[0].grad
        return sum(k.grad for k in ks), sum(v.grad for v in vs)

    gk, gv = grads(True)
    sk, sv = grads(False)
    np.testing.assert_allclose(gk, sk, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(gv, sv, rtol=1e-10, atol=1e-14)

    k = tc.parameter(kd.copy(), name="k", dtype=np.float64)
    fn = lambda: lm_loss(model.forward(ids, {j: InjectedKV(k, tc.constant(vd), 0.5)
                                              for j in blocks}), ids, np.ones_like(ids))
    assert check_grads(fn, [k], coords_per_param=8, seed=3) <= 1e-5


# --- system-level properties --------------------------------------------------------------

def _tiny_system(**kw):
    tcfg = TransformerConfig(num_blocks=4, model_dim=16, num_heads=2, max_text_len=32,
                             ffn_hidden=32)
    from mpnplab.encoders import EncoderConfig
    cam = EncoderConfig("camera", enc_dim=8, enc_blocks=2, levels=2, tokens_per_level=2,
                        num_heads=2)
    rng_ = EncoderConfig("range", enc_dim=8, enc_blocks=2, levels=2, tokens_per_level=1,
                         num_heads=2)
    return MPnPSystem(SystemConfig(transformer=tcfg, camera=cam, range=rng_, **kw))


@pytest.mark.parametrize("n", [1, 2, 4])
def test_runtime_trainable_census(n):
    s = _tiny_system(n_connect=n, lora_rank=3)
    s.mount(["camera"])
    s.mount(["range"], fresh=["range"])
    names = s.runtime_trainables(["range"])
    params = s.named_parameters()
    count = sum(params[x].size for x in names)
    al = s.aligners["range"]
    aligner = sum(p.size for k, p in al.params.items() if "pos_" not in k)
    pos = al.pos_k.size + al.pos_v.size
    d, r = 16, 3
    assert count == aligner + n + pos + 2 * n * (2 * d * r)
    assert not any(x.startswith(("block", "tok_emb", "camera.", "range.enc")) and "lora" not in x
                   for x in names)


def test_lora_zero_init_logits_bit_identical():
    s = _tiny_system(n_connect=3)
    s.mount(["camera"])
    from mpnplab import synthdata as sd
    from mpnplab.vocab import make_lm_batch
    ds = sd.generate_dataset(num_scenes=8, seed=3)
    batch = ds["night-train"][:4]
    inputs, _, _ = make_lm_batch(s.vocab, [b.question for b in batch], [b.answer for b in batch])
    feats = {"camera": s.features(batch, "camera")}
    a = s.logits(inputs, feats, use_lora=True).data
    b = s.logits(inputs, feats, use_lora=False).data
    assert a.tobytes() == b.tobytes()
