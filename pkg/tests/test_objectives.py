import math

import numpy as np
import pytest

from tcri import diff_core as dc
from tcri.kernels_ci import conditional_cross_cov, conditional_hsic
from tcri.models import ArchConfig, forward_domain, forward_general, init_model
from tcri.objectives import (
    LossBreakdown,
    TcriHyperParams,
    erm_preset,
    irm_preset,
    loss_ci,
    loss_irm,
    loss_phi,
    loss_phi_psi,
    make_batch,
    risk,
    tcri_preset,
    tcri_total,
)
from tcri.scm_data import ContinuousScmSpec, DomainDataset, sample_continuous_scm

from conftest import FrozenBandwidths, param_grad_error

ALL_PARAMS = ["F.0.w", "F.0.b", "phi.w", "phi.b", "psi.w", "psi.b", "theta_c.w", "theta_c.b", "theta_e.0.w"]


def _setup(task, seed, featurizer="mlp"):
    r = np.random.default_rng(seed)
    arch = ArchConfig(3, 1, phi_dim=2, psi_dim=2, featurizer=featurizer, hidden_dim=4, task=task)
    m = init_model(arch, seed)
    x = r.standard_normal((16, 3))
    y = r.integers(0, 2, 16).astype(float) if task == "binary" else r.standard_normal(16)
    y[:2] = [0.0, 1.0] if task == "binary" else y[:2]
    return m, make_batch(DomainDataset(x, y, "d"), 0, task, 2)


def test_presets():
    assert (erm_preset().alpha, erm_preset().beta, erm_preset().lam) == (1.0, 0.0, 0.0)
    assert (irm_preset().alpha, irm_preset().beta, irm_preset().lam) == (1.0, 0.0, 0.1)
    assert (tcri_preset().alpha, tcri_preset().beta, tcri_preset().lam) == (0.75, 10.0, 0.1)
    with pytest.raises(ValueError):
        TcriHyperParams(alpha=1.5)
    with pytest.raises(ValueError):
        TcriHyperParams(beta=-1.0)
    with pytest.raises(ValueError):
        TcriHyperParams(penalty="mmd")


def test_risk_values():
    assert risk([1.0, 2.0], [1.0, 2.0], "regression") == 0.0
    assert risk(np.zeros(5), [0, 1, 1, 0, 1], "binary") == pytest.approx(math.log(2), abs=1e-15)
    r = np.random.default_rng(0)
    s, y = r.standard_normal(30), r.integers(0, 2, 30).astype(float)
    ref = np.mean(-y * np.log(1 / (1 + np.exp(-s))) - (1 - y) * np.log(1 - 1 / (1 + np.exp(-s))))
    assert risk(s, y, "binary") == pytest.approx(ref, abs=1e-12)
    t = r.standard_normal(30)
    assert risk(s, t, "regression") == pytest.approx(np.mean((s - t) ** 2), abs=1e-12)
    with pytest.raises(ValueError):
        risk([1.0], [1.0, 2.0], "regression")


def test_loss_phi_ignores_specific_head():
    m, b = _setup("regression", 1)
    before = float(loss_phi(m, b).value)
    m.set_value("psi.w", np.zeros_like(m.params["psi.w"].value))
    assert float(loss_phi(m, b).value) == before


def test_loss_phi_psi_definition_and_zero_head():
    m, b = _setup("regression", 2)
    ref = risk(forward_domain(m, b.x, 0).value, b.y, "regression")
    assert float(loss_phi_psi(m, b).value) == ref
    m.set_value("theta_e.0.w", np.zeros((4, 1)))
    m.set_value("theta_e.0.b", np.zeros(1))
    assert float(loss_phi_psi(m, b).value) == pytest.approx(np.mean(b.y**2), abs=1e-15)


def test_irm_closed_form_regression():
    m, b = _setup("regression", 3, featurizer="linear")
    z = m.phi(m.featurize(b.x)).value
    s = forward_general(m, b.x).value
    r = 2 * (s - b.y)
    g = np.concatenate([z.T @ r / len(b), [r.mean()]])
    assert float(loss_irm(m, b).value) == pytest.approx(np.linalg.norm(g), rel=1e-10)
    assert float(loss_irm(m, b, squared=True).value) == pytest.approx(g @ g, rel=1e-10)


def test_irm_matches_generic_gradient_norm():
    for task in ("regression", "binary"):
        m, b = _setup(task, 4)
        z = m.phi(m.featurize(b.x))

        def domain_risk(theta):
            w = dc.reshape(dc.slice_cols(dc.reshape(theta, (1, -1)), 0, 2), (2, 1))
            bias = dc.reshape(dc.slice_cols(dc.reshape(theta, (1, -1)), 2, 3), (1,))
            s = dc.reshape(dc.add(dc.matmul(dc.Tensor(z.value), w), bias), (-1,))
            if task == "regression":
                return dc.mean(dc.square(dc.sub(s, b.y)))
            return dc.mean(dc.sub(dc.softplus(s), dc.mul(s, b.y)))

        theta = np.concatenate([m.params["theta_c.w"].value.ravel(), m.params["theta_c.b"].value])
        val, _ = dc.grad_of_grad_norm(domain_risk, dc.Tensor(theta), [])
        assert float(loss_irm(m, b).value) == pytest.approx(val, rel=1e-10)


def test_irm_zero_at_domain_minimiser():
    ds = sample_continuous_scm(ContinuousScmSpec(1.0, 1.0, 200, seed=0))
    m = init_model(ArchConfig(2, 1, bias=False), 0)
    b = make_batch(ds, 0, "regression", 4)
    z = m.phi(m.featurize(b.x)).value
    m.set_value("theta_c.w", np.linalg.lstsq(z, b.y, rcond=None)[0][:, None])
    assert float(loss_irm(m, b).value) < 1e-10
    m.set_value("phi.w", np.zeros((2, 1)))
    assert float(loss_irm(m, b).value) == 0.0


def test_loss_ci_consistency_and_zero_head():
    for penalty, ref in (("hsic", conditional_hsic), ("cov", conditional_cross_cov)):
        m, b = _setup("binary", 5)
        hp = TcriHyperParams(penalty=penalty)
        h = m.featurize(b.x)
        expect = ref(m.phi(h).value, m.psi(h).value, b.cond_labels, 2)
        assert float(loss_ci(m, b, hp).value) == pytest.approx(expect, abs=1e-12)
        m.set_value("psi.w", np.zeros_like(m.params["psi.w"].value))
        assert float(loss_ci(m, b, hp).value) == pytest.approx(0.0, abs=1e-15)


def test_loss_ci_shrinks_when_heads_use_independent_inputs():
    r = np.random.default_rng(6)
    x = r.standard_normal((300, 2))
    y = r.integers(0, 2, 300).astype(float)
    b = make_batch(DomainDataset(x, y, "d"), 0, "binary", 2)
    m = init_model(ArchConfig(2, 1, task="binary", bias=False), 0)
    m.set_value("phi.w", np.array([[1.0], [0.0]]))
    m.set_value("psi.w", np.array([[1.0], [0.0]]))
    same = float(loss_ci(m, b, tcri_preset()).value)
    m.set_value("psi.w", np.array([[0.0], [1.0]]))
    apart = float(loss_ci(m, b, tcri_preset()).value)
    assert same > 0 and apart < same / 5


@pytest.mark.parametrize("task", ["regression", "binary"])
def test_loss_term_gradients(task, monkeypatch):
    for rep in range(20):
        m, b = _setup(task, 100 + rep)
        assert param_grad_error(lambda mm: loss_phi(mm, b), m, ALL_PARAMS) < 1e-5
        assert param_grad_error(lambda mm: loss_phi_psi(mm, b), m, ALL_PARAMS) < 1e-5
        assert param_grad_error(lambda mm: loss_irm(mm, b), m, ALL_PARAMS) < 1e-4
        assert param_grad_error(lambda mm: loss_ci(mm, b, TcriHyperParams(penalty="cov")), m, ALL_PARAMS) < 1e-5
    frozen = FrozenBandwidths(monkeypatch)
    for rep in range(20):
        m, b = _setup(task, 200 + rep)
        frozen.recorded.clear()
        frozen.replay = False
        loss_ci(m, b, tcri_preset())
        frozen.freeze()
        assert param_grad_error(lambda mm: loss_ci(mm, b, tcri_preset()), m, ALL_PARAMS) < 1e-5


def _two_domains():
    r = np.random.default_rng(8)
    out = []
    for i in range(2):
        x = r.standard_normal((6, 2))
        y = np.array([0, 1, 0, 1, 1, 0], dtype=float)
        out.append(make_batch(DomainDataset(x, y, f"d{i}"), i, "binary", 2))
    return out


def test_total_presets_reduce():
    bs = _two_domains()
    m = init_model(ArchConfig(2, 2, task="binary"), 1)
    tot, bd = tcri_total(m, bs, erm_preset())
    assert float(tot.value) == pytest.approx(np.mean([float(loss_phi(m, b).value) for b in bs]), abs=1e-15)
    tot, _ = tcri_total(m, bs, irm_preset())
    lp = np.mean([float(loss_phi(m, b).value) for b in bs])
    li = np.mean([float(loss_irm(m, b).value) for b in bs])
    assert float(tot.value) == pytest.approx(lp + 0.1 * li, abs=1e-14)


def test_total_hand_expansion():
    bs = _two_domains()
    m = init_model(ArchConfig(2, 2, task="binary"), 2)
    hp = TcriHyperParams(alpha=0.5, beta=2.0, lam=0.3)
    tot, bd = tcri_total(m, bs, hp)
    parts = []
    for b in bs:
        parts.append(
            0.5 * float(loss_phi(m, b).value)
            + 0.5 * float(loss_phi_psi(m, b).value)
            + 0.3 * float(loss_irm(m, b).value)
            + 2.0 * float(loss_ci(m, b, hp).value)
        )
    assert float(tot.value) == pytest.approx(sum(parts) / 2, abs=1e-12)
    assert isinstance(bd, LossBreakdown) and len(bd.per_domain) == 2
    assert bd.total == float(tot.value)
    for k in ("l_phi", "l_phi_psi", "l_irm", "l_ci"):
        assert getattr(bd, k) >= 0


def test_total_skips_inactive_terms():
    bs = _two_domains()
    m = init_model(ArchConfig(2, 2, task="binary"), 3)
    full = tcri_total(m, bs, erm_preset(), compute_inactive=True)[1]
    lean = tcri_total(m, bs, erm_preset(), compute_inactive=False)[1]
    assert lean.total == full.total
    assert lean.l_ci == 0.0 and full.l_ci > 0.0
    with pytest.raises(ValueError):
        tcri_total(m, [], erm_preset())


def test_phi_psi_can_beat_phi_on_spurious_only_data():
    # only the second block predicts y; the general head is masked away from it
    r = np.random.default_rng(1)
    y = r.integers(0, 2, 300).astype(float)
    x = np.column_stack([r.standard_normal((300, 2)), np.repeat((2 * y - 1)[:, None], 2, axis=1)])
    b = make_batch(DomainDataset(x, y, "d"), 0, "binary", 2)
    m = init_model(ArchConfig(4, 1, task="binary"), 0)
    mask = np.array([[1.0], [1.0], [0.0], [0.0]])
    m.set_value("phi.w", m.params["phi.w"].value * mask)
    hp = TcriHyperParams(alpha=0.5, beta=0.0, lam=0.0)
    for _ in range(300):
        with dc.Tape() as tape:
            tot, _ = tcri_total(m, [b], hp)
        gs = dc.backward(tot, tape, wrt=list(m.trainable().values()))
        for k, p in m.trainable().items():
            g = gs[p] * mask if k == "phi.w" else gs[p]
            p.value = p.value - 0.5 * g
    assert float(loss_phi_psi(m, b).value) < float(loss_phi(m, b).value) - 0.2
