import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from desknav.comm import (
    D_Q, D_V, CommLog, CommMemory, CommMode, Key, ValueMsg, aggregate, apply_cross_agent_softmax, gate,
    match_scores, run_round, store,
)
from desknav.policy import ArchConfig, QKVHeads

SMALL = ArchConfig(n_rays=4, digest_dim=6, emb_dim=5, hidden_dim=4, d_q=3, d_v=7, msg_dim=2)


def heads(arch=SMALL, seed=0):
    torch.manual_seed(seed)
    return QKVHeads(arch).double()


def np_layer(lin):
    return lin.weight.detach().numpy(), lin.bias.detach().numpy()


def reference_rounds(h, enc, dig, n_steps, memory):
    """Numpy re-derivation of the request/match/select/store rounds."""
    Wq, bq = np_layer(h.query)
    Wk, bk = np_layer(h.key)
    Wv, bv = np_layer(h.value)
    n = enc.shape[1]
    keys = [[] for _ in range(n)]
    vals = [[] for _ in range(n)]
    out = []
    for t in range(n_steps):
        x = [np.concatenate([enc[t, i], dig[t, i]]) for i in range(n)]
        k_now = [Wk @ xi + bk for xi in x]
        v_now = [Wv @ xi + bv for xi in x]
        pooled = [np.mean(vals[i], axis=0) if (memory and vals[i]) else np.zeros(len(bv)) for i in range(n)]
        q = [Wq @ np.concatenate([x[i], pooled[i]]) + bq for i in range(n)]
        hk = [np.array((keys[i] if memory else []) + [k_now[i]]) for i in range(n)]
        hv = [np.array((vals[i] if memory else []) + [v_now[i]]) for i in range(n)]
        msgs = []
        for r in range(n):
            logit, mixed = [], []
            for m in range(n):
                lt = hk[m] @ q[r] / np.sqrt(len(bk))
                w = np.exp(lt - lt.max())
                w /= w.sum()
                logit.append(lt.mean())
                mixed.append(w @ hv[m])
            s = np.exp(np.array(logit) - max(logit))
            s /= s.sum()
            g = np.where(s > 1.0 / n, s, 0.0)
            msgs.append(sum(g[m] * mixed[m] for m in range(n)) if g[r] > 0 else np.zeros(len(bv)))
        out.append(msgs)
        if memory:
            for i in range(n):
                keys[i].append(k_now[i])
                vals[i].append(v_now[i])
    return out


@pytest.mark.parametrize("mode", [CommMode.VANILLA, CommMode.MEMORY])
@pytest.mark.parametrize("n", [2, 3, 4])
def test_rounds_match_numpy_reference(mode, n):
    rng = np.random.default_rng(n)
    h = heads(seed=n)
    enc = rng.normal(size=(4, n, SMALL.emb_dim))
    dig = rng.normal(size=(4, n, SMALL.digest_dim))
    ref = reference_rounds(h, enc, dig, 4, mode is CommMode.MEMORY)
    mems = [CommMemory(i) for i in range(n)]
    with torch.no_grad():
        for t in range(4):
            rr = run_round(mode, list(torch.as_tensor(enc[t])), list(torch.as_tensor(dig[t])), mems, h, t)
            for i in range(n):
                np.testing.assert_allclose(rr.messages[i].vector.numpy(), ref[t][i], atol=1e-12)
    assert all(len(m) == (4 if mode is CommMode.MEMORY else 0) for m in mems)


def test_match_scores_mean_logit_and_weights():
    q = torch.tensor([1.0, 0.0, 2.0], dtype=torch.float64)
    keys = torch.tensor([[1.0, 1.0, 1.0], [0.0, 0.0, -1.0]], dtype=torch.float64)
    logit, w = match_scores(q, keys)
    per = torch.tensor([3.0, -2.0], dtype=torch.float64) / np.sqrt(3)
    assert float(logit) == pytest.approx(float(per.mean()))
    assert torch.allclose(w, torch.softmax(per, 0))
    with pytest.raises(ValueError):
        match_scores(q, [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6))
def test_scores_form_a_distribution_and_at_most_n_minus_1_survive(logits):
    s = apply_cross_agent_softmax(torch.tensor(logits, dtype=torch.float64), 0)
    assert float(s.sum()) == pytest.approx(1.0)
    kept = gate(s, 1.0 / len(logits))
    assert int((kept > 0).sum()) <= len(logits) - 1 or len(logits) == 1
    assert torch.all((kept == 0) | (kept == s))


def test_gate_is_strict():
    assert gate(0.5, 0.5) == 0.0
    assert gate(0.5000001, 0.5) == 0.5000001


def test_closed_self_gate_sends_nothing():
    v = torch.ones(3, dtype=torch.float64)
    msg = aggregate((0.2, v), [(0.8, 2 * v)], 0.5)
    assert not msg.communicated and not msg.vector.any()


def test_uniform_scores_gate_everything():
    for n in (2, 3, 5):
        s = apply_cross_agent_softmax(torch.zeros(n, dtype=torch.float64), 0)
        assert torch.allclose(s, torch.full((n,), 1.0 / n, dtype=torch.float64))
        assert not gate(s, 1.0 / n).any()


def test_no_com_mode_is_silent():
    h = heads()
    log = CommLog(SMALL.d_q, SMALL.d_v)
    enc = list(torch.randn(3, SMALL.emb_dim, dtype=torch.float64))
    dig = list(torch.randn(3, SMALL.digest_dim, dtype=torch.float64))
    rr = run_round(CommMode.NONE, enc, dig, [CommMemory(i) for i in range(3)], h, 0, log)
    assert log.total_scalars == 0 and all(not m.vector.any() for m in rr.messages)


def test_bandwidth_accounting():
    h = heads()
    log = CommLog(SMALL.d_q, SMALL.d_v)
    rng = np.random.default_rng(0)
    n = 3
    enc = list(torch.as_tensor(rng.normal(size=(n, SMALL.emb_dim))))
    dig = list(torch.as_tensor(rng.normal(size=(n, SMALL.digest_dim))))
    rr = run_round(CommMode.VANILLA, enc, dig, [CommMemory(i) for i in range(n)], h, 0, log)
    expect = sum((n - 1) * SMALL.d_q + len(p["supporters"]) * SMALL.d_v for p in rr.log_entry["per_requester"])
    assert log.total_scalars == expect


def test_store_rejects_out_of_order_steps():
    mem = CommMemory(0)
    k = lambda t: Key(torch.zeros(2), 0, t)
    v = lambda t: ValueMsg(torch.zeros(2), 0, t)
    store(mem, k(0), v(0))
    with pytest.raises(ValueError):
        store(mem, k(0), v(0))
    with pytest.raises(ValueError):
        store(mem, k(2), v(3))


def test_default_dimensions():
    assert D_V // D_Q == 8
