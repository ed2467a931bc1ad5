import numpy as np
import pytest

import tprd3.checkpoint as ckpt
import tprd3.d3 as d3
import tprd3.fwm as fwm
import tprd3.sar as sar
import tprd3.tensor as T
from tprd3.errors import ConfigError, DivergenceError
from fd import model_gradcheck
from tprd3.rng import STREAM_TRAIN, make_rng


def small_vocab(V=4, seed=0):
    return sar.make_vocab(V, make_rng(seed, 0))


def small_model(variant="fwm-d3-woF", V=4, seed=0, **kw):
    vocab = small_vocab(V, seed)
    d3cfg = None
    if variant != "fwm-baseline":
        d3cfg = d3.D3Config(d_code=8, n_code=6, top_k=2, d_component=8,
                            p_dropout=0.1, apply_to_filler=(variant == "fwm-d3-wF"))
    return fwm.make_model(vocab, variant, seed=seed, d3_config=d3cfg,
                          d_lstm=12, d_fwm=8)


class StubGen:
    """Emits a fixed component schedule; no parameters."""

    variant = "stub"
    d3_layer = None

    def __init__(self, schedule):
        self.schedule = schedule
        self.t = 0

    def params(self):
        return {}

    def begin_episode(self, mode, rng=None, usage=None):
        self.t = 0

    def step(self, h, record=None):
        comps = {k: T.constant(np.asarray(v)[None, :]) for k, v in self.schedule[self.t].items()}
        self.t += 1
        return comps

    def step_single(self, h, mode, rng=None, record=None):
        return self.step(h, record)


def stub_model(schedule, d_fwm=4, beta_logit=1000.0, V=2, seed=0):
    vocab = small_vocab(V, seed)
    model = fwm.make_model(vocab, "fwm-baseline", seed=seed, d_lstm=8, d_fwm=d_fwm)
    model.gen = StubGen(schedule)
    model.beta_w.array[:] = 0.0
    model.beta_b.array[:] = beta_logit  # sigmoid -> 1.0 exactly in f64
    return model


def unit(d, i):
    v = np.zeros(d)
    v[i] = 1.0
    return v


def comp(r1, r2, filler, u1, u2):
    return {"role1": r1, "role2": r2, "filler": filler, "unbind1": u1, "unbind2": u2}


def step_input(model, item, phase, start):
    return sar.encode_step(model.vocab, item, phase, start, model.flag_mode)


def test_single_write_round_trip():
    d = 4
    filler = np.array([0.3, -1.2, 0.5, 2.0])
    sched = [comp(unit(d, 0), unit(d, 1), filler, unit(d, 0), unit(d, 1))]
    model = stub_model(sched, d_fwm=d)
    state = model.init_state()
    state2, _ = fwm.fwm_step(model, state, step_input(model, (0, 0), "discovery", True), "eval")
    got = T.contract3(state2.F, T.constant(unit(d, 0)), T.constant(unit(d, 1))).array
    assert np.abs(got - filler).max() < 1e-12


def test_rebind_same_filler_is_noop():
    d = 4
    filler = np.array([1.0, 2.0, -0.5, 0.25])
    sched = [comp(unit(d, 0), unit(d, 1), filler, unit(d, 2), unit(d, 3))] * 2
    model = stub_model(sched, d_fwm=d)
    state = model.init_state()
    s1, _ = fwm.fwm_step(model, state, step_input(model, (0, 0), "discovery", True), "eval")
    f_before = s1.F.array.copy()
    s2, _ = fwm.fwm_step(model, s1, step_input(model, (1, 1), "discovery", False), "eval")
    assert np.abs(s2.F.array - f_before).max() < 1e-12


def test_rebind_new_filler_overwrites():
    d = 4
    old = np.array([1.0, 0.0, 2.0, -1.0])
    new = np.array([-3.0, 0.5, 0.0, 1.0])
    sched = [comp(unit(d, 0), unit(d, 1), old, unit(d, 0), unit(d, 1)),
             comp(unit(d, 0), unit(d, 1), new, unit(d, 0), unit(d, 1))]
    model = stub_model(sched, d_fwm=d)
    state = model.init_state()
    s1, _ = fwm.fwm_step(model, state, step_input(model, (0, 0), "discovery", True), "eval")
    s2, _ = fwm.fwm_step(model, s1, step_input(model, (1, 1), "discovery", False), "eval")
    got = T.contract3(s2.F, T.constant(unit(d, 0)), T.constant(unit(d, 1))).array
    assert np.abs(got - new).max() < 1e-10


def test_two_orthonormal_bindings_superpose():
    d = 4
    fa = np.array([1.0, -1.0, 0.5, 2.0])
    fb = np.array([0.2, 0.4, -0.6, 0.8])
    sched = [comp(unit(d, 0), unit(d, 1), fa, unit(d, 0), unit(d, 1)),
             comp(unit(d, 2), unit(d, 3), fb, unit(d, 2), unit(d, 3))]
    model = stub_model(sched, d_fwm=d)
    state = model.init_state()
    s1, _ = fwm.fwm_step(model, state, step_input(model, (0, 0), "discovery", True), "eval")
    s2, _ = fwm.fwm_step(model, s1, step_input(model, (1, 1), "discovery", False), "eval")
    ra = T.contract3(s2.F, T.constant(unit(d, 0)), T.constant(unit(d, 1))).array
    rb = T.contract3(s2.F, T.constant(unit(d, 2)), T.constant(unit(d, 3))).array
    assert np.abs(ra - fa).max() < 1e-10
    assert np.abs(rb - fb).max() < 1e-10


def test_factor_memory_matches_dense():
    rng = np.random.default_rng(3)
    B, d = 3, 5
    mem = fwm.FactorMemory(6, B, d)
    for _ in range(6):
        mem.append(T.constant(rng.standard_normal((B, d))),
                   T.constant(rng.standard_normal((B, d))),
                   T.constant(rng.standard_normal((B, d))))
    u1 = rng.standard_normal((B, d))
    u2 = rng.standard_normal((B, d))
    got = mem.read(T.constant(u1), T.constant(u2)).array
    dense = T.contract3(T.constant(mem.dense()), T.constant(u1), T.constant(u2)).array
    assert np.abs(got - dense).max() < 1e-12


def test_run_episodes_matches_fwm_step_loop():
    for variant in fwm.VARIANTS:
        model = small_model(variant, V=4, seed=2)
        ep = sar.gen_train_episode(model.vocab, make_rng(5, STREAM_TRAIN, 0), 3)
        loss_b, preds_b = fwm.run_episodes(model, [ep], "eval")

        state = model.init_state()
        logits = []
        for t, item in enumerate(ep.discovery):
            state, lg = fwm.fwm_step(model, state, step_input(model, item, "discovery", t == 0), "eval")
        for t, x in enumerate(ep.inference):
            state, lg = fwm.fwm_step(model, state, step_input(model, x, "inference", t == 0), "eval")
            logits.append(lg.array)
        losses = [float(T.cross_entropy(T.constant(l), y).array) for l, y in zip(logits, ep.targets)]
        loss_s = np.mean(losses)
        preds_s = [int(np.argmax(l)) for l in logits]
        assert abs(float(loss_b.array) - loss_s) < 1e-10, variant
        assert preds_b[0].tolist() == preds_s, variant


def test_untrained_loss_near_log_c():
    vocab = sar.make_vocab(20, make_rng(0, 0))
    model = fwm.make_model(vocab, "fwm-d3-woF", seed=0)
    eps = [sar.gen_train_episode(vocab, make_rng(0, STREAM_TRAIN, i), 20) for i in range(4)]
    loss, _ = fwm.run_episodes(model, eps, "eval")
    target = np.log(40.0)
    assert abs(float(loss.array) - target) < 0.1 * target


def test_parameter_coverage_all_variants():
    for variant in fwm.VARIANTS:
        model = small_model(variant, V=4, seed=3)
        eps = [sar.gen_train_episode(model.vocab, make_rng(1, STREAM_TRAIN, i), 4) for i in range(2)]
        with T.Tape() as tape:
            loss, _ = fwm.run_episodes(model, eps, "train", make_rng(1, 1))
        tape.backward(loss)
        for name, p in model.params().items():
            assert p.grad is not None, f"{variant}: no gradient for {name}"
            assert np.isfinite(p.grad).all(), f"{variant}: non-finite gradient for {name}"


def test_eval_deterministic():
    model = small_model("fwm-d3-woF", V=4, seed=4)
    ep = sar.gen_train_episode(model.vocab, make_rng(2, STREAM_TRAIN, 0), 4)
    l1, p1 = fwm.run_episodes(model, [ep], "eval")
    l2, p2 = fwm.run_episodes(model, [ep], "eval")
    assert float(l1.array) == float(l2.array)
    assert np.array_equal(p1, p2)


def test_three_step_fd_through_recurrence():
    model = small_model("fwm-d3-woF", V=3, seed=5)
    eps = [sar.gen_train_episode(model.vocab, make_rng(3, STREAM_TRAIN, i), 2) for i in range(2)]

    def loss_fn():
        loss, _ = fwm.run_episodes(model, eps, "eval")
        return loss

    err = model_gradcheck(model.params(), loss_fn, np.random.default_rng(6), n_per_param=6)
    assert err < 1e-3, f"fd error through recurrence {err:.3e}"


def test_component_shapes_identical_across_generators():
    shapes = {}
    for variant in fwm.VARIANTS:
        model = small_model(variant, V=4, seed=6)
        model.gen.begin_episode("eval")
        h = T.constant(np.random.default_rng(7).standard_normal((3, 12)))
        comps = model.gen.step(h)
        shapes[variant] = {k: v.shape for k, v in sorted(comps.items())}
    assert shapes["fwm-baseline"] == shapes["fwm-d3-woF"] == shapes["fwm-d3-wF"]


def test_divergence_reports_timestep():
    d = 4
    huge = np.full(d, 1e200)
    sched = [comp(unit(d, 0), unit(d, 1), huge, unit(d, 0), unit(d, 1)),
             comp(huge, huge, huge, unit(d, 0), unit(d, 1)),
             comp(huge, huge, huge, unit(d, 0), unit(d, 1))]
    model = stub_model(sched, d_fwm=d)
    ep = sar.SarEpisode(discovery=[(0, 0)], inference=[0], targets=[0])
    # single huge write is finite; the second read of a huge^3 product overflows
    with pytest.raises(DivergenceError) as exc:
        state = model.init_state()
        for t in range(3):
            state, _ = fwm.fwm_step(model, state, step_input(model, (0, 0), "discovery", t == 0),
                                    "eval", timestep=t)
    assert exc.value.timestep >= 1


def test_divergence_in_batched_runner():
    d = 4
    huge = np.full(d, 1e200)
    sched = [comp(huge, huge, huge, unit(d, 0), unit(d, 1)) for _ in range(8)]
    model = stub_model(sched, d_fwm=d, V=4)
    ep = sar.gen_train_episode(model.vocab, make_rng(4, STREAM_TRAIN, 0), 4)
    with pytest.raises(DivergenceError) as exc:
        fwm.run_episodes(model, [ep], "eval")
    assert 0 <= exc.value.timestep < 8


def test_checkpoint_round_trip_preserves_behavior(tmp_path):
    model = small_model("fwm-d3-wF", V=4, seed=8)
    ep = sar.gen_train_episode(model.vocab, make_rng(5, STREAM_TRAIN, 1), 4)
    loss1, preds1 = fwm.run_episodes(model, [ep], "eval")
    path = tmp_path / "m.ckpt"
    ckpt.save(path, model.params())

    clone = small_model("fwm-d3-wF", V=4, seed=9)  # different init
    clone.load_arrays(ckpt.load(path))
    loss2, preds2 = fwm.run_episodes(clone, [ep], "eval")
    assert float(loss1.array) == float(loss2.array)
    assert np.array_equal(preds1, preds2)


def test_load_arrays_validates():
    model = small_model("fwm-baseline", V=4, seed=10)
    good = {k: v.array.copy() for k, v in model.params().items()}
    bad = dict(good)
    del bad["fwm.out.w"]
    with pytest.raises(ConfigError):
        model.load_arrays(bad)
    bad2 = dict(good)
    bad2["fwm.out.b"] = np.zeros(3)
    with pytest.raises(ConfigError):
        model.load_arrays(bad2)


def test_make_model_validation():
    vocab = small_vocab(4)
    with pytest.raises(ConfigError):
        fwm.make_model(vocab, "fwm-d4")
    with pytest.raises(ConfigError):
        fwm.FwmConfig(n_reads=3)
    cfg = d3.D3Config(d_code=8, n_code=4, top_k=2, d_component=8, apply_to_filler=True)
    with pytest.raises(ConfigError):
        fwm.make_model(vocab, "fwm-d3-woF", d3_config=cfg, d_fwm=8)
    cfg2 = d3.D3Config(d_code=8, n_code=4, top_k=2, d_component=8)
    with pytest.raises(ConfigError):
        fwm.make_model(vocab, "fwm-d3-woF", d3_config=cfg2, d_fwm=16)  # d_component mismatch


def test_usage_accumulates_during_run():
    model = small_model("fwm-d3-woF", V=4, seed=11)
    usage = {g: np.zeros(6, dtype=np.int64) for g in range(2)}
    ep = sar.gen_train_episode(model.vocab, make_rng(6, STREAM_TRAIN, 0), 4)
    fwm.run_episodes(model, [ep], "eval", usage=usage)
    total = sum(int(u.sum()) for u in usage.values())
    # top_k=2, 1 episode * 8 steps, 4 d3 components
    assert total == 2 * 8 * 4


def test_record_captures_named_components():
    model = small_model("fwm-d3-woF", V=4, seed=12)
    ep = sar.gen_train_episode(model.vocab, make_rng(7, STREAM_TRAIN, 0), 4)
    record = []
    fwm.run_episodes(model, [ep], "eval", record=record)
    assert len(record) == 8
    assert set(record[0]["component"]) == {"role1", "role2", "filler", "unbind1", "unbind2"}
    assert set(record[0]["query"]) == {"role1", "role2", "unbind1", "unbind2"}
    assert record[0]["component"]["role1"].shape == (1, 8)
