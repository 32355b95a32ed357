import numpy as np
import pytest

from symran.conceptizer import (
    AuxiliaryHead,
    ConceptSpec,
    ConceptTemplate,
    Conceptizer,
    ConceptizerTraining,
    IgConfig,
    audit_support_mask,
    fidelity_loss_and_grad,
    handover_default_template,
    ig_attribution,
    ig_completeness_gap,
    slicing_default_template,
    train_conceptizer,
)
from symran.env import EnvConfig, make_env
from symran.errors import ConfigError
from symran.kpm import KpmState
from symran.nets import finite_diff_check
from symran.teacher import ScriptedTeacher, TraceBuffer, TraceRecord, collect_traces


def synthetic_state(u, seed=0, n_embb=2, n_urllc=2, n_mmtc=2, t=0):
    """Slicing state whose scoped KPM columns directly encode the four
    latent concept values in u (noise-free, fixed roster)."""
    rng = np.random.default_rng(seed)
    tags = ["eMBB"] * n_embb + ["URLLC"] * n_urllc + ["mMTC"] * n_mmtc
    g = len(tags)
    values = np.zeros((g, 12))
    values[:, 0] = 1.0 + 14.0 * u[3]  # CQI drives channel quality
    values[:, 1] = rng.uniform(0, 5, g)  # out-of-scope noise column
    values[:, 4] = 50.0 * u[0]  # eMBB thp column encodes demand
    values[:, 8] = 25.0 * u[0]
    values[:, 6] = 400.0 * u[1]  # delay encodes stress
    values[:, 9] = u[2] / 3.0
    values[:, 10] = u[2] / 3.0
    values[:, 11] = u[2] / 3.0
    return KpmState(task="slicing", values=values, entity_tags=tuple(tags), t=t)


def synthetic_buffer(n=400, seed=0, d_z=3):
    # z exactly linear in the latent concepts, concepts recoverable from
    # their scoped KPMs: the fidelity loss can reach ~0
    rng = np.random.default_rng(seed)
    a_true = rng.normal(0.0, 0.5, size=(d_z, 4))
    b_true = rng.normal(0.0, 0.2, size=d_z)
    buf = []
    for t in range(n):
        u = rng.uniform(0.1, 0.9, size=4)
        state = synthetic_state(u, seed=seed + t, t=t)
        z = a_true @ u + b_true
        buf.append(TraceRecord(t=t, state=state, z=z, a=np.array([1, 0, 0.0]),
                               r=0.0, v_thp=0.0, v_dly=0.0))
    return buf


def env_buffer(task="slicing", steps=150, seed=0):
    env = make_env(EnvConfig(seed=seed, task=task, expose_true_concepts=True))
    teacher = ScriptedTeacher(task, sigma_z=0.02, noise_seed=seed)
    buf = TraceBuffer(10_000)
    collect_traces(env, teacher, steps, buf)
    return buf


def test_template_validation():
    with pytest.raises(ConfigError):
        ConceptTemplate(task="slicing", concepts=())
    with pytest.raises(ConfigError):
        ConceptTemplate(task="slicing",
                        concepts=(ConceptSpec("bad", "all", ()),))
    with pytest.raises(ConfigError):
        ConceptTemplate(task="slicing",
                        concepts=(ConceptSpec("bad", "all", (13,)),))  # handover id


def test_zero_head_outputs_half():
    template = slicing_default_template()
    model = Conceptizer(template, seed=0)
    for head in model.heads:
        head.layers[0].weight[:] = 0.0
        head.layers[0].bias[:] = 0.0
    state = synthetic_state(np.array([0.2, 0.8, 0.1, 0.5]))
    c = model.conceptize(state)
    assert np.array_equal(c, np.full(4, 0.5))


def test_permutation_invariance_within_scope():
    template = slicing_default_template()
    model = Conceptizer(template, seed=1)
    u = np.array([0.3, 0.6, 0.4, 0.7])
    state = synthetic_state(u, n_embb=3)
    rng = np.random.default_rng(2)
    state.values[:3, 4] = rng.uniform(0, 50, 3)  # distinct eMBB rows
    base = model.conceptize(state)
    perm = state.copy()
    perm.values[[0, 1, 2]] = perm.values[[2, 0, 1]]
    assert np.allclose(model.conceptize(perm), base, atol=1e-12)


def test_single_entity_scope_reduces_to_direct_head():
    template = handover_default_template()
    model = Conceptizer(template, seed=3)
    env = make_env(EnvConfig(seed=0, task="handover", expose_true_concepts=True))
    state = env.reset()
    xn = model.normalize(state)
    c = model.conceptize(state)
    # concept 0 scopes only the serving cell row
    cols = model._columns[0]
    emb = model.encoders[0].forward(xn[0, cols])
    direct = float(model.heads[0].forward(emb)[0])
    assert c[0] == pytest.approx(direct, abs=1e-12)


def test_out_of_scope_change_leaves_concept_alone():
    template = slicing_default_template()
    model = Conceptizer(template, seed=4)
    state = synthetic_state(np.array([0.5, 0.5, 0.5, 0.5]))
    before = model.conceptize(state)
    bumped = state.copy()
    bumped.values[:, 1] += 3.0  # SNR column is outside every scope
    after = model.conceptize(bumped)
    # channel quality (c3) scopes CQI only; SNR touches nothing
    assert np.array_equal(before, after)


def test_empty_scope_pins_concept_and_flags():
    template = slicing_default_template()
    model = Conceptizer(template, seed=5)
    state = synthetic_state(np.array([0.5, 0.5, 0.5, 0.5]), n_urllc=0)
    c, stale = model.conceptize_full(state)
    assert c[1] == 0.0
    assert stale[1] == 1.0
    assert stale[[0, 2, 3]].tolist() == [0.0, 0.0, 0.0]


def test_linear_recovery_reaches_small_fidelity_loss():
    buf = synthetic_buffer(n=400, seed=0)
    template = slicing_default_template()
    model, aux, history = train_conceptizer(
        template, buf, ConceptizerTraining(max_epochs=300, patience=100, lr=0.02,
                                           seed=0)
    )
    assert history[-1] <= 1e-3
    assert model.frozen


def test_zero_epochs_returns_initialization():
    buf = synthetic_buffer(n=50, seed=1)
    template = slicing_default_template()
    model, _, history = train_conceptizer(
        template, buf, ConceptizerTraining(max_epochs=0, seed=7)
    )
    fresh = Conceptizer(template, seed=7)
    fresh.fit_normalizer(buf)
    state = buf[0].state
    assert np.array_equal(model.conceptize(state), fresh.conceptize(state))
    assert history == []


def test_constant_z_absorbed_by_bias():
    buf = synthetic_buffer(n=200, seed=2)
    for rec in buf:
        rec.z = np.array([0.7, -0.3, 0.1])
    template = slicing_default_template()
    model, aux, history = train_conceptizer(
        template, buf, ConceptizerTraining(max_epochs=120, patience=30, seed=1)
    )
    assert history[-1] < 1e-3


def test_epoch_history_is_monotone_in_moving_average():
    buf = synthetic_buffer(n=300, seed=3)
    template = slicing_default_template()
    _, _, history = train_conceptizer(
        template, buf, ConceptizerTraining(max_epochs=80, patience=80, seed=0)
    )
    window = 50
    ma = np.convolve(history, np.ones(window) / window, mode="valid")
    assert np.all(np.diff(ma) <= 1e-9)


def test_fidelity_gradient_matches_finite_differences():
    buf = synthetic_buffer(n=12, seed=4)
    template = slicing_default_template()
    model = Conceptizer(template, seed=0)
    model.fit_normalizer(buf)
    rng = np.random.default_rng(0)
    d_z = 3
    aux = AuxiliaryHead(a=rng.normal(size=(d_z, 4)), b=rng.normal(size=d_z))
    z = np.stack([r.z for r in buf])

    def f(p):
        n = model.param_count
        model.frozen = False
        model.set_params(p[:n])
        aux.a = p[n : n + aux.a.size].reshape(aux.a.shape)
        aux.b = p[n + aux.a.size :]
        loss, _ = fidelity_loss_and_grad(model, aux, buf, z)
        return loss

    for trial in range(3):
        p0 = np.concatenate([
            rng.normal(0.0, 0.4, model.param_count),
            rng.normal(0.0, 0.4, aux.a.size + aux.b.size),
        ])
        f(p0)
        _, grad = fidelity_loss_and_grad(model, aux, buf, z)
        assert finite_diff_check(f, p0, grad) < 1e-4


def test_frozen_conceptizer_rejects_mutation():
    buf = synthetic_buffer(n=60, seed=5)
    template = slicing_default_template()
    model, _, _ = train_conceptizer(template, buf,
                                    ConceptizerTraining(max_epochs=2, seed=0))
    with pytest.raises(RuntimeError):
        model.set_params(np.zeros(model.param_count))


def test_serialization_round_trip_preserves_outputs():
    buf = synthetic_buffer(n=60, seed=6)
    template = slicing_default_template()
    model, _, _ = train_conceptizer(template, buf,
                                    ConceptizerTraining(max_epochs=3, seed=0))
    restored = Conceptizer.from_dict(model.to_dict())
    state = buf[5].state
    assert np.array_equal(model.conceptize(state), restored.conceptize(state))


# -- integrated gradients ------------------------------------------------------


def trained_model(seed=0):
    buf = synthetic_buffer(n=250, seed=seed)
    template = slicing_default_template()
    model, _, _ = train_conceptizer(
        template, buf, ConceptizerTraining(max_epochs=40, patience=15, seed=seed)
    )
    return model, buf


def test_ig_zero_at_baseline_state():
    model, buf = trained_model()
    state = buf[0].state
    attr = ig_attribution(model, 0, state, IgConfig(steps=32, baseline_state=state))
    assert np.array_equal(attr, np.zeros_like(state.values))


def test_ig_exact_for_linear_concept():
    # a concept that is exactly 2 * its single scoped input
    template = ConceptTemplate(
        task="slicing", concepts=(ConceptSpec("lin", "slice:eMBB", (0,)),)
    )
    model = Conceptizer(template, d_h=1, hidden=1, seed=0)
    # force h = identity chain and an unsquashed head: sigma is replaced by
    # identity activation to make the map exactly linear
    from symran.nets import FeedForwardNet, Layer

    model.encoders[0] = FeedForwardNet([Layer(np.array([[2.0]]), np.zeros(1),
                                              "identity")])
    model.heads[0] = FeedForwardNet([Layer(np.array([[1.0]]), np.zeros(1),
                                           "identity")])
    state = synthetic_state(np.array([0.0, 0.0, 0.0, 0.0]), n_embb=1)
    state.values[0, 0] = 4.0  # raw CQI
    model.norm_lo = np.zeros(12)
    model.norm_hi = np.ones(12) * 1.0
    model.norm_hi[0] = 8.0  # normalized CQI = 0.5
    model.baseline = np.zeros(12)
    attr = ig_attribution(model, 0, state, IgConfig(steps=16))
    c = model.conceptize(state)[0]
    assert attr[0, 0] == pytest.approx(c, abs=1e-12)  # delta = c - 0
    assert attr[0, 0] == pytest.approx(1.0, abs=1e-12)  # 2 * 0.5


def test_ig_off_support_exactly_zero():
    model, buf = trained_model(seed=1)
    template = model.template
    for state in (buf[3].state, buf[57].state):
        for k, spec in enumerate(template.concepts):
            attr = ig_attribution(model, k, state, IgConfig(steps=24))
            mask = np.zeros_like(attr, dtype=bool)
            rows = state.rows_for(spec.entity_selector)
            mask[np.ix_(rows, model._columns[k])] = True
            assert np.all(attr[~mask] == 0.0)


def test_ig_completeness_within_tolerance():
    model, buf = trained_model(seed=2)
    for i in range(8):
        k = i % model.template.k
        gap, delta = ig_completeness_gap(model, k, buf[i * 7].state,
                                         IgConfig(steps=256))
        assert gap <= 1e-3 * max(1.0, delta)


def test_untrained_model_also_masks():
    template = slicing_default_template()
    model = Conceptizer(template, seed=9)
    buf = synthetic_buffer(n=5, seed=9)
    model.fit_normalizer(buf)
    report = audit_support_mask(model, [r.state for r in buf])
    assert report.off_support_max == 0.0


def test_audit_report_shape_and_result():
    model, buf = trained_model(seed=3)
    probes = [buf[i].state for i in range(6)]
    report = audit_support_mask(model, probes)
    assert report.off_support_max == 0.0
    expected_rows = sum(len(s.kpm_ids) for s in model.template.concepts)
    assert len(report.rows) == expected_rows
    with pytest.raises(ValueError):
        audit_support_mask(model, [])


def test_ig_config_validation():
    with pytest.raises(ConfigError):
        IgConfig(steps=8)
