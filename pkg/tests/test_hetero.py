from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from exitlab import fields
from exitlab.geometry import DomainSpec, contains_many
from exitlab.hetero import (AdmissibleSequence, ChainMismatchError,
                            HeteroNetwork, SaddleNode, classify_two_node,
                            compose_poincare, enumerate_admissible,
                            two_node_model)
from exitlab.sde import InitialLaw, SdeSystem, simulate_exit_batch


def test_classify_case_table_examples():
    r = classify_two_node(1.0, 2.0, 1.0, 2.0)
    assert r.case_id == 1
    assert r.p == (Fraction(1, 2), Fraction(1, 4), Fraction(1, 4))
    assert r.alpha0(1) == 1.0 and r.alpha0(2) == 1.0

    r = classify_two_node(1.0, 1.0, 1.0, 1.0)
    assert r.case_id == 4
    assert r.p[0] == Fraction(1, 2) and r.p[1] is None
    assert r.alpha0(1) == 1.0

    r = classify_two_node(2.0, 1.0, 1.0, 1.0)
    assert r.case_id == 6
    assert r.p == (Fraction(1, 2), Fraction(0, 1), Fraction(1, 2))
    assert r.alpha0(1) == 0.5 and r.alpha0(3) == 0.5


def test_classify_remaining_cases():
    r5 = classify_two_node(1.0, 1.0, 2.0, 1.0)
    assert r5.case_id == 5
    assert r5.alpha0(2) == 0.5
    r2 = classify_two_node(2.0, 2.0, 1.0, 3.0)  # mup*lp=2 < mum*lm=6, lp=lm
    assert r2.case_id == 2
    assert r2.flags  # printed sub-cases flagged as internally inconsistent
    r3 = classify_two_node(3.0, 1.0, 2.0, 1.0)  # 6 > 1, lp > lm
    assert r3.case_id == 3
    assert r3.alpha0(1) == pytest.approx(1.0 / 3)
    assert r3.alpha0(2) == pytest.approx(1.0 / 6)


def test_classify_unclassified_status():
    r = classify_two_node(2.0, 1.0, 1.0, 2.0)
    assert not r.classified and r.case_id is None


def test_classify_scale_invariance():
    gen = np.random.default_rng(4)
    for _ in range(25):
        rates = gen.uniform(0.5, 3.0, size=4)
        c = float(gen.uniform(0.1, 10.0))
        a = classify_two_node(*rates)
        b = classify_two_node(*(c * rates))
        assert a.case_id == b.case_id
        if a.classified:
            assert a.alpha0(1) == pytest.approx(b.alpha0(1))
            assert a.alpha0(2) == pytest.approx(b.alpha0(2))


def test_enumerate_depth_one_two_sequences():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    tree = enumerate_admissible(model.net, 0, depth=1)
    assert len(tree.leaves) == 2
    signs = {seq.steps[0][1] for seq in tree.leaves}
    assert signs == {+1, -1}


def test_enumerate_complete_set_probability_one():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    tree = enumerate_admissible(model.net, 0, depth=4)
    assert tree.is_free(tree.leaves)
    assert tree.is_complete(tree.leaves)
    assert tree.pi_total(tree.leaves) == Fraction(1, 1)  # exact arithmetic


def test_enumerate_free_subset_below_one():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    tree = enumerate_admissible(model.net, 0, depth=4)
    subset = tree.leaves[:-1]
    assert tree.is_free(subset)
    assert not tree.is_complete(subset)
    assert tree.pi_total(subset) < 1


def test_sequence_comparability():
    a = AdmissibleSequence(((0, 1),), (Fraction(1, 2),), None)
    b = AdmissibleSequence(((0, 1), (1, -1)), (Fraction(1, 2),) * 2, "y3")
    c = AdmissibleSequence(((0, -1),), (Fraction(1, 2),), None)
    assert b.extends(a) and not a.extends(b)
    assert a.comparable(b) and not a.comparable(c)
    assert b.pi == Fraction(1, 4)


def test_network_validates_edges():
    with pytest.raises(ValueError):
        HeteroNetwork(
            saddles=(SaddleNode(position=(0, 0), lp=1, lm=1, unstable_axis=0),),
            edges={(0, 1): ("exit", "y1")},  # missing (0, -1)
            domain=DomainSpec.square(1.0))


def test_two_node_model_geometry():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    f = model.field
    # saddle points of the catalog field
    assert np.allclose(f.drift_at([0.0, 0.0]), 0.0, atol=1e-14)
    assert np.allclose(f.drift_at([-1.0, 0.0]), 0.0, atol=1e-14)
    J0 = f.jac_at([0.0, 0.0])
    assert np.allclose(J0, np.diag([1.0, -2.0]), atol=1e-12)
    J1 = f.jac_at([-1.0, 0.0])
    assert np.allclose(np.sort(np.linalg.eigvals(J1).real), [-2.0, 1.0],
                       atol=1e-12)
    # the x axis and both vertical lines through the saddles are invariant
    for pt in ([0.5, 0.0], [-0.5, 0.0], [0.0, 0.3], [-1.0, 0.4]):
        b = f.drift_at(pt)
        if pt[1] == 0.0:
            assert b[1] == 0.0
        else:
            assert b[0] == 0.0


def test_compose_symmetric_frequencies():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    rep = compose_poincare(model, epsilon=1e-2, paths=1500, seed=5, dt=2e-3)
    assert rep.stray <= 15
    f1, f2, f3 = (rep.frequency(k) for k in ("y1", "y2", "y3"))
    assert abs(f1 - 0.5) < 3.2 * np.sqrt(0.25 / 1500)
    assert abs(f2 - 0.25) < 3.2 * np.sqrt(0.1875 / 1500)
    assert abs(f3 - 0.25) < 3.2 * np.sqrt(0.1875 / 1500)


def test_compose_hybrid_vs_raw_cross_check():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    hyb = compose_poincare(model, epsilon=1e-2, paths=1200, seed=7, dt=2e-3)
    dom = model.net.domain
    subs = [DomainSpec.box([-0.35, dom.lo[1]], [dom.hi[0], dom.hi[1]]),
            DomainSpec.box([dom.lo[0], dom.lo[1]], [-0.25, dom.hi[1]])]
    raw = compose_poincare(model, epsilon=1e-2, paths=1200, seed=8, dt=2e-3,
                           mode="raw", subdomains=subs)
    for label in ("y1", "y2", "y3"):
        diff = abs(hyb.frequency(label) - raw.frequency(label))
        assert diff < 4.0 * np.sqrt(0.25 * 2 / 1200), (label, diff)


def test_compose_single_domain_matches_direct_simulation():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    dom = model.net.domain
    raw = compose_poincare(model, epsilon=2e-2, paths=1200, seed=9, dt=2e-3,
                           mode="raw", subdomains=[dom])
    system = SdeSystem(field=model.field, sigma=np.eye(2),
                       initial=InitialLaw(x0=model.x0))
    direct = simulate_exit_batch(system, dom, 2e-2, 2e-3, seed=10,
                                 n_paths=1200)
    # identical labeling rule applied to the direct batch
    counts = {}
    for p in direct.exit_points:
        label = min(model.net.labels,
                    key=lambda L: float(np.linalg.norm(p - model.net.labels[L])))
        counts[label] = counts.get(label, 0) + 1
    for label in ("y1", "y2", "y3"):
        a = raw.frequency(label)
        b = counts.get(label, 0) / 1200
        assert abs(a - b) < 4.0 * np.sqrt(0.25 * 2 / 1200)
    # and the exit positions along the top face agree in distribution
    top_raw = raw.terminal_points["y2"][:, 0]
    top_dir = direct.exit_points[direct.face_ids == 3][:, 0]
    if top_raw.size > 80 and top_dir.size > 80:
        stat, p = stats.ks_2samp(top_raw, top_dir)
        assert p > 1e-2


def test_compose_chain_mismatch_error():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    bad = [DomainSpec.box([-0.35, -0.8], [0.6, 0.8]),
           DomainSpec.box([10.0, 10.0], [11.0, 11.0])]
    with pytest.raises(ChainMismatchError):
        compose_poincare(model, epsilon=1e-2, paths=300, seed=3, dt=2e-3,
                         mode="raw", subdomains=bad)


def test_network_json_round_trip():
    from exitlab.hetero import network_from_config, subdomains_from_config

    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    cfg = {
        "saddles": [{"position": [0.0, 0.0], "lp": 1.0, "lm": 2.0,
                     "unstable_axis": 0},
                    {"position": [-1.0, 0.0], "lp": 1.0, "lm": 2.0,
                     "unstable_axis": 1}],
        "edges": [{"saddle": 0, "sign": 1, "kind": "exit", "to": "y1"},
                  {"saddle": 0, "sign": -1, "kind": "saddle", "to": 1},
                  {"saddle": 1, "sign": 1, "kind": "exit", "to": "y2"},
                  {"saddle": 1, "sign": -1, "kind": "exit", "to": "y3"}],
        "domain": {"kind": "box", "lo": [-1.6, -0.8], "hi": [0.6, 0.8]},
        "labels": {"y1": [0.6, 0.0], "y2": [-1.0, 0.8], "y3": [-1.0, -0.8]},
    }
    net = network_from_config(cfg)
    assert net.edges == model.net.edges
    assert net.saddles[1].unstable_axis == 1
    subs = subdomains_from_config([{"lo": [-0.35, -0.8], "hi": [0.6, 0.8]}])
    assert subs[0].kind == "box"


def test_compose_deterministic_chain_point_mass():
    model = two_node_model(1.0, 2.0, 1.0, 2.0)
    dom = model.net.domain
    # start off the stable manifold so the noiseless flow exits at y1
    raw = compose_poincare(model, epsilon=0.0, paths=100, seed=1, dt=1e-3,
                           mode="raw", subdomains=[dom],
                           initial=[0.05, 0.25])
    assert raw.frequency("y1") == 1.0
    pts = raw.terminal_points["y1"]
    assert np.allclose(pts, pts[0])  # a single deterministic exit point
