from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ventalloc.errors import CapabilityError, ConfigurationError, ContractError, NumericError, ParseError, ShapeError
from ventalloc.mdp import NORMAL
from ventalloc.qnet import (
    ClassicalConfig,
    ClassicalQNet,
    LearnedProtocol,
    QNetConfig,
    TransformerQNet,
    action_table,
    brute_force_argmax,
    cached_floats,
    grad_check,
    huber,
    load_model,
    matrix_batch,
    save_model,
)
from ventalloc.simulator import SimConfig, Simulator
from ventalloc.trajectory import SyntheticCohortConfig, generate_cohort

SMALL = QNetConfig(embed_dim=16, num_heads=2, hidden_dim=24, num_layers=1, k=6, n_groups=2)


@pytest.fixture(scope="module")
def net():
    m = TransformerQNet(SMALL)
    return m, m.init_params(3)


def tokens(rng, m, cfg=SMALL, locked=None):
    x = rng.random((m, cfg.token_dim))
    x[:, cfg.k] = 0.0 if locked is None else locked
    return x


# -- forward ----------------------------------------------------------------------


def test_single_token_shape(net):
    m, p = net
    assert m.forward(p, tokens(np.random.default_rng(0), 1)).shape == (1, 2)


def test_shape_and_value_errors(net):
    m, p = net
    with pytest.raises(ShapeError):
        m.forward(p, np.zeros((3, SMALL.token_dim + 1)))
    bad = tokens(np.random.default_rng(0), 3)
    bad[1, 2] = np.nan
    with pytest.raises(NumericError):
        m.forward(p, bad)
    with pytest.raises(ShapeError):
        m.forward(p[:-1], tokens(np.random.default_rng(0), 3))
    with pytest.raises(ShapeError):
        TransformerQNet(QNetConfig(embed_dim=16, num_heads=2, max_tokens=2, k=6, n_groups=2)).forward(
            p, tokens(np.random.default_rng(0), 3))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        QNetConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigurationError):
        QNetConfig(max_tokens=0)
    assert QNetConfig().token_dim == 38 + 1 + 8
    assert QNetConfig(fairness_features_on=False).token_dim == 39
    assert QNetConfig().full_scale().embed_dim == 1024


def test_permutation_equivariance(net):
    m, p = net
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 15))
        x = tokens(rng, n)
        perm = rng.permutation(n)
        out = m.forward(p, x)
        outp = m.forward(p, x[perm])
        np.testing.assert_allclose(outp, out[perm], rtol=1e-5, atol=1e-12)
        cap = int(rng.integers(0, n + 1))
        a = m.select(out[None], matrix_batch(x), cap, True)[0]
        ap = m.select(outp[None], matrix_batch(x[perm]), cap, True)[0]
        assert np.array_equal(ap, a[perm])


def test_duplicate_rows_identical(net):
    m, p = net
    x = tokens(np.random.default_rng(2), 5)
    x[3] = x[1]
    out = m.forward(p, x)
    np.testing.assert_allclose(out[3], out[1], atol=1e-6, rtol=0)


def test_attention_mixes_tokens_unless_disabled():
    rng = np.random.default_rng(4)
    x = tokens(rng, 4)
    y = x.copy()
    y[3] = rng.random(SMALL.token_dim)
    for attention, changed in ((True, True), (False, False)):
        m = TransformerQNet(QNetConfig(**{**SMALL.__dict__, "attention": attention}))
        p = m.init_params(0)
        diff = np.abs(m.forward(p, x)[0] - m.forward(p, y)[0]).max()
        assert bool(diff > 1e-9) is changed


def test_padding_does_not_leak(net):
    m, p = net
    rng = np.random.default_rng(5)
    x = tokens(rng, 3)
    padded = np.concatenate([x, rng.random((2, SMALL.token_dim))])[None]
    mask = np.array([[True, True, True, False, False]])
    np.testing.assert_allclose(m.forward(p, padded, mask)[0, :3], m.forward(p, x), atol=1e-12)


def test_float32_matches_float64():
    rng = np.random.default_rng(6)
    x = tokens(rng, 7)
    m64 = TransformerQNet(SMALL)
    m32 = TransformerQNet(QNetConfig(**{**SMALL.__dict__, "precision": "float32"}))
    p = m64.init_params(1)
    np.testing.assert_allclose(m32.forward(p, x), m64.forward(p, x), atol=1e-4)
    with pytest.raises(ConfigurationError):
        QNetConfig(precision="float16")


# -- joint Q and selection ---------------------------------------------------------


class FixedNet(TransformerQNet):
    def __init__(self, out):
        super().__init__(SMALL)
        self.out = np.asarray(out, dtype=float)

    def forward(self, params, x, mask=None):
        return self.out


def test_joint_q_examples():
    f = FixedNet([[1, 3], [2, 5]])
    x = np.zeros((2, SMALL.token_dim))
    assert f.joint_q(None, x, [1, 0]) == 5
    assert f.joint_q(None, x, [0, 0]) == 3
    with pytest.raises(ShapeError):
        f.joint_q(None, x, [1, 0, 1])


@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5)), min_size=1, max_size=8), st.data())
def test_joint_q_additivity(rows, data):
    f = FixedNet(rows)
    x = np.zeros((len(rows), SMALL.token_dim))
    a = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(rows), max_size=len(rows))))
    b = np.array(data.draw(st.lists(st.integers(0, 1), min_size=len(rows), max_size=len(rows))))
    t = np.asarray(rows)
    expected = sum(t[i, a[i]] - t[i, b[i]] for i in range(len(rows)) if a[i] != b[i])
    assert f.joint_q(None, x, a) - f.joint_q(None, x, b) == pytest.approx(expected, abs=1e-9)


def select_from(t, locked, cap, force=False):
    m = TransformerQNet(SMALL)
    t = np.asarray(t, dtype=float)
    return m.select(t[None], matrix_batch(np.zeros((len(t), SMALL.token_dim)), locked), cap, True, force)[0]


def test_select_examples():
    assert select_from([[0, 0.9], [0, -0.2], [0, 0.5]], [0, 0, 0], 2).tolist() == [1, 0, 1]
    assert select_from([[0, 0.9], [0, -7.0], [0, 0.5]], [0, 1, 0], 2).tolist() == [1, 1, 0]
    # negative improvements are skipped unless filling is forced
    assert select_from([[0, 0.9], [0, -0.2], [0, 0.5]], [0, 0, 0], 3).tolist() == [1, 0, 1]
    assert select_from([[0, 0.9], [0, -0.2], [0, 0.5]], [0, 0, 0], 3, force=True).tolist() == [1, 1, 1]
    with pytest.raises(ContractError):
        select_from([[0, 1], [0, 1]], [1, 1], 1)


def test_greedy_matches_brute_force(net):
    m, p = net
    rng = np.random.default_rng(7)
    for _ in range(300):
        n = int(rng.integers(1, 13))
        locked = rng.random(n) < 0.25
        cap = int(locked.sum()) + int(rng.integers(0, n - locked.sum() + 1))
        x = tokens(rng, n, locked=locked.astype(float))
        out = m.forward(p, x)
        got = m.select(out[None], matrix_batch(x, locked), cap, True)[0]
        best, value = brute_force_argmax(out, locked, cap, True)
        assert np.array_equal(got, best)
        assert m.joint_q(p, x, got) == pytest.approx(value, abs=1e-12)


def test_greedy_action_on_ward_state():
    ds = generate_cohort(SyntheticCohortConfig(n_patients=80, seed=1))
    sim = Simulator(SimConfig(capacity=5, bed_count=12, arrival_rate=6), ds)
    s = sim.reset(0)
    m = TransformerQNet(QNetConfig(embed_dim=16, num_heads=2, hidden_dim=16, num_layers=1))
    p = m.init_params(0)
    a = m.greedy_action(p, s, 5, True)
    assert a.shape == (12,) and a.sum() <= 5 and np.all(a[s.status != NORMAL] == 0)
    x = m.state_matrix(s)
    assert x.shape == (int((s.status == NORMAL).sum()), m.config.token_dim)
    proto = LearnedProtocol(m, p)
    assert np.array_equal(proto.act(s, 5, True, None), a)


# -- gradient check ----------------------------------------------------------------


def small_problem(seed, m_tokens=4):
    rng = np.random.default_rng(seed)
    x = tokens(rng, m_tokens)
    enc = matrix_batch(x)
    a = (rng.random((1, m_tokens)) < 0.5).astype(np.uint8)
    return enc, a, rng


def test_huber_pieces():
    loss, grad = huber(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]))
    assert loss.tolist() == [2.5, 0.125, 0.0, 0.125, 2.5]
    assert grad.tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]


def test_gradient_matches_finite_differences():
    cfg = QNetConfig(embed_dim=16, num_heads=2, hidden_dim=16, num_layers=1, k=4, n_groups=2)
    m = TransformerQNet(cfg)
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = m.init_params(seed)
        x = rng.random((3, cfg.token_dim))
        enc = matrix_batch(x)
        a = (rng.random((1, 3)) < 0.5).astype(np.uint8)
        target = rng.normal(0, 2, 1)
        worst = max(worst, grad_check(m, p, enc, a, target))
    assert worst < 1e-3


def test_zero_loss_has_zero_gradient(net):
    m, p = net
    enc, a, _ = small_problem(1)
    q = m.joint(m.q_out(p, enc), enc, a)
    _, grad, _ = m.loss_grad(p, enc, a, q)
    assert np.abs(grad).max() < 1e-6


def test_corrupted_gradient_detected():
    cfg = QNetConfig(embed_dim=8, num_heads=2, hidden_dim=8, num_layers=1, k=3, n_groups=1)
    m = TransformerQNet(cfg)
    p = m.init_params(2)
    rng = np.random.default_rng(2)
    enc = matrix_batch(rng.random((3, cfg.token_dim)))
    a = np.array([[1, 0, 1]], np.uint8)
    y = np.array([4.0])

    def corrupted(params):
        g = m.loss_grad(params, enc, a, y)[1]
        m.views(g)["l0.w1"][...] *= 1.5
        return g

    assert grad_check(m, p, enc, a, y) < 1e-3
    assert grad_check(m, p, enc, a, y, grad_fn=corrupted) > 1e-1


def test_classical_gradient():
    m = ClassicalQNet(ClassicalConfig(n_beds=3, capacity=2, hidden=(8,), k=2, n_groups=2))
    p = m.init_params(0)
    rng = np.random.default_rng(0)
    from ventalloc.qnet import ClassicalBatch

    enc = ClassicalBatch(rng.random((2, m.config.input_dim)), np.ones((2, 3), bool), np.zeros((2, 3), bool))
    a = np.array([[1, 0, 1], [0, 1, 0]], np.uint8)
    assert grad_check(m, p, enc, a, np.array([1.0, -2.0])) < 1e-3


# -- classical head ----------------------------------------------------------------


def test_classical_capability_limit():
    ClassicalConfig(n_beds=6, capacity=4)
    ClassicalConfig(n_beds=18, capacity=2)
    with pytest.raises(CapabilityError):
        ClassicalConfig(n_beds=20, capacity=10)


def test_action_table():
    masks, lookup = action_table(4, 2)
    assert len(masks) == 1 + 4 + 6
    assert all(bin(int(mk)).count("1") <= 2 for mk in masks)
    assert lookup[0b1100] >= 0 and lookup[0b0111] == -1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 1000), st.booleans())
def test_classical_selection_feasible(n, seed, w):
    rng = np.random.default_rng(seed)
    cap = int(rng.integers(0, n + 1))
    m = ClassicalQNet(ClassicalConfig(n_beds=n, capacity=cap, hidden=(8,), k=2, n_groups=2))
    from ventalloc.qnet import ClassicalBatch

    normal = rng.random((3, n)) < 0.7
    locked = normal & (rng.random((3, n)) < 0.3)
    for r in range(3):
        extra = np.flatnonzero(locked[r])[cap:]
        locked[r, extra] = False
    enc = ClassicalBatch(rng.random((3, m.config.input_dim)), normal, locked)
    acts = m.select(m.q_out(m.init_params(seed), enc), enc, cap, w)
    for r in range(3):
        a = acts[r]
        assert a.sum() <= cap and np.all(a[~normal[r]] == 0)
        if w:
            assert np.all(a[locked[r]] == 1)


def test_classical_on_ward():
    ds = generate_cohort(SyntheticCohortConfig(n_patients=60, seed=2))
    sim = Simulator(SimConfig(capacity=4, bed_count=6, arrival_rate=1), ds)
    s = sim.reset(3)
    m = ClassicalQNet(ClassicalConfig(n_beds=6, capacity=4, hidden=(16,)))
    a = m.greedy_action(m.init_params(0), s, 4, True)
    assert a.shape == (6,) and a.sum() <= 4


# -- scaling closed forms ------------------------------------------------------------


def transformer_params(c):
    d, f, h = c.embed_dim, c.token_dim, c.hidden_dim
    per_layer = 2 * d + (d * h + h) + (h * d + d)
    if c.attention:
        per_layer += 2 * d + 4 * (d * d + d)
    return f * d + d + c.num_layers * per_layer + 2 * d + 2 * d + 2


@pytest.mark.parametrize("attention", [True, False])
def test_parameter_and_activation_counts(attention):
    cfg = QNetConfig(embed_dim=16, num_heads=4, hidden_dim=32, num_layers=2, attention=attention)
    m = TransformerQNet(cfg)
    p = m.init_params(0)
    assert m.n_params == transformer_params(cfg)
    rng = np.random.default_rng(0)
    for n in range(6, 19):
        _, cache = m.forward_cached(p, rng.random((1, n, cfg.token_dim)))
        measured = cached_floats({k: v for k, v in cache.items() if k != "mask"})
        assert m.activation_count(n) == measured
    # attention probabilities make the count quadratic in the token count, everything else is linear
    second_diff = m.activation_count(8) - 2 * m.activation_count(7) + m.activation_count(6)
    assert second_diff == (2 * cfg.num_layers * cfg.num_heads if attention else 0)


def test_classical_width_is_exponential():
    widths = []
    for n in range(6, 19):
        c = n // 2
        m = ClassicalQNet(ClassicalConfig(n_beds=n, capacity=c, hidden=(8,), k=2, n_groups=2))
        assert m.n_actions == sum(comb(n, j) for j in range(c + 1))
        assert m.n_params == (m.config.input_dim * 8 + 8) + (8 * m.n_actions + m.n_actions)
        widths.append(m.n_actions)
    assert all(b > a for a, b in zip(widths, widths[1:])) and widths[-1] > 1000 * widths[0]
    transformer = TransformerQNet(QNetConfig(embed_dim=16, num_heads=4, hidden_dim=32))
    assert transformer.activation_count(18) < 18 * 18 * 200


# -- serialization -----------------------------------------------------------------


def test_model_round_trip(net, tmp_path):
    m, p = net
    path = save_model(tmp_path / "m.json", m, p, {"seed": 3, "lambda": 1000.0})
    m2, p2, meta = load_model(path)
    assert p2.tobytes() == p.tobytes()
    assert m2.config == m.config and meta["lambda"] == 1000.0
    save_model(tmp_path / "m2.json", m2, p2, meta)
    assert (tmp_path / "m2.json").read_bytes() == path.read_bytes()


def test_classical_round_trip(tmp_path):
    m = ClassicalQNet(ClassicalConfig(n_beds=6, capacity=4, hidden=(8,)))
    p = m.init_params(5)
    m2, p2, _ = load_model(save_model(tmp_path / "c.json", m, p))
    assert isinstance(m2, ClassicalQNet) and np.array_equal(p, p2)


def test_load_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{}")
    with pytest.raises(ParseError):
        load_model(bad)
    with pytest.raises(ParseError):
        load_model(tmp_path / "missing.json")


def test_init_is_seeded_and_scaled():
    m = TransformerQNet(SMALL)
    a, b = m.init_params(1), m.init_params(1)
    assert np.array_equal(a, b) and not np.array_equal(a, m.init_params(2))
    v = m.views(a)
    assert np.abs(v["w_in"]).max() <= 1 / np.sqrt(SMALL.token_dim)
    assert np.all(v["lnf_g"] == 1) and np.all(v["b_out"] == 0)
