import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcalab import autodiff as ad
from mcalab.autodiff import Tensor
from mcalab.errors import ContractError, DegeneratePrototypeError, InvalidConfigError
from mcalab.model import EncoderConfig, ItemBatch, encode_array, init_params
from mcalab.objectives import (MCAConfig, TrainBatch, cl_loss, init_mixer, mcp_loss, mcr_loss, mix, similarity,
                               total_loss)
from mcalab.rng import Rng


def unit_with_cos(c, axis, dim=4):
    """Unit vector whose cosine with e0 is ``c``; the remainder lies along ``axis``."""
    v = np.zeros(dim)
    v[0] = c
    v[axis] = math.sqrt(1 - c * c)
    return v


def T(rows):
    return Tensor(np.atleast_2d(np.asarray(rows, dtype=np.float64)))


E0 = np.eye(4)[0]

# ---------------------------------------------------------------------------
# similarity


def test_similarity_examples():
    assert similarity(E0, E0, 0.02) == pytest.approx(50.0, abs=1e-12)
    assert similarity(E0, np.eye(4)[1], 0.02) == 0.0
    assert similarity([0.6, 0.8], [0.8, 0.6], 0.02) == pytest.approx(48.0, abs=1e-12)


def test_similarity_rejects_non_unit():
    with pytest.raises(ContractError):
        similarity([1.0, 1.0], E0[:2], 1.0)


def test_config_invariants():
    with pytest.raises(InvalidConfigError):
        MCAConfig(tau=0)
    with pytest.raises(InvalidConfigError):
        MCAConfig(mixer="attention")


# ---------------------------------------------------------------------------
# CL


def test_cl_uniform_is_ln_b():
    q = T([E0] * 4)
    d = T([E0] * 4)
    assert abs(cl_loss(q, d, [0, 1, 2, 3], 0.02).item() - math.log(4)) < 1e-9


def test_cl_saturated():
    q = T([E0])
    d = T([E0, np.eye(4)[1], np.eye(4)[2], np.eye(4)[3]])
    assert cl_loss(q, d, [0], 0.02).item() < 1e-20


def test_cl_scalar_recomputation():
    q = T([E0])
    d = T([E0, unit_with_cos(0.5, 1), unit_with_cos(0.2, 2)])
    expected = math.log(1 + math.exp(-0.5) + math.exp(-0.8))
    assert cl_loss(q, d, [0], 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.7207, abs=1e-4)


def test_cl_symmetric_averages_directions():
    rng = Rng(0)
    q = ad.l2_normalize_rows(T(rng.normal(12).reshape(3, 4)))
    d = ad.l2_normalize_rows(T(rng.normal(12).reshape(3, 4)))
    pos = [2, 0, 1]
    s = q.data @ d.data.T / 0.5
    fwd = -np.mean([s[i, pos[i]] - np.log(np.exp(s[i]).sum()) for i in range(3)])
    bwd = -np.mean([s[i, pos[i]] - np.log(np.exp(s[:, pos[i]]).sum()) for i in range(3)])
    assert cl_loss(q, d, pos, 0.5, symmetric=True).item() == pytest.approx((fwd + bwd) / 2, abs=1e-12)


def test_cl_contracts():
    q, d = T([E0, E0]), T([E0, E0])
    with pytest.raises(ContractError):
        cl_loss(q, d, [0, 0], 1.0)
    with pytest.raises(ContractError):
        cl_loss(T([E0]), T([E0]), [0], 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.sampled_from([0.02, 0.1, 1.0]))
def test_cl_positive(seed, tau):
    rng = Rng(seed)
    q = ad.l2_normalize_rows(T(rng.normal(20).reshape(5, 4)))
    d = ad.l2_normalize_rows(T(rng.normal(20).reshape(5, 4)))
    assert cl_loss(q, d, rng.permutation(5), tau).item() > 0


# ---------------------------------------------------------------------------
# MCP


def test_mcp_examples():
    t = T([E0])
    v = T([unit_with_cos(0.7, 1)])
    assert mcp_loss(v, [v, v], t, 0.02).item() == 0.0
    comp = T([unit_with_cos(0.9, 2)])
    p1, p2 = T([unit_with_cos(0.7, 1)]), T([unit_with_cos(0.7, 3)])
    assert mcp_loss(comp, [p1, p2], t, 0.02).item() == pytest.approx(-20.0, abs=1e-9)
    comp = T([unit_with_cos(0.5, 2)])
    p1, p2 = T([unit_with_cos(0.9, 1)]), T([unit_with_cos(0.1, 3)])
    assert mcp_loss(comp, [p1, p2], t, 0.1).item() == pytest.approx(0.0, abs=1e-12)


def test_mcp_accepts_vectors():
    t = Tensor(E0)
    v = Tensor(unit_with_cos(0.7, 1))
    assert mcp_loss(v, [v], t, 0.5).item() == 0.0


def test_mcp_empty_parts():
    with pytest.raises(ContractError):
        mcp_loss(T([E0]), [], T([E0]), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_mcp_monotone_in_composed_similarity(seed):
    rng = Rng(seed)
    parts = [ad.l2_normalize_rows(T(rng.normal(4))) for _ in range(2)]
    t = T([E0])
    cosines = np.linspace(-0.9, 0.9, 7)
    vals = [mcp_loss(T([unit_with_cos(c, 1)]), parts, t, 0.1).item() for c in cosines]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_mcp_margin_variant_clamps():
    t = T([E0])
    comp = T([unit_with_cos(0.9, 2)])
    p = T([unit_with_cos(0.7, 1)])
    assert mcp_loss(comp, [p], t, 0.02, margin=1.0).item() == 0.0
    assert mcp_loss(comp, [p], t, 0.02, margin=15.0).item() == pytest.approx(5.0, abs=1e-9)


# ---------------------------------------------------------------------------
# mixers


@pytest.mark.parametrize("mixer", ["mean_pool", "gated_fusion"])
def test_mixer_idempotent(mixer):
    h = ad.l2_normalize_rows(T(Rng(0).normal(8).reshape(2, 4)))
    out = mix(mixer, init_mixer(mixer, 4, 0), [h, h])
    assert np.allclose(out.data, h.data, atol=1e-15)


def test_gated_fusion_zero_init_is_mean_pool():
    rng = Rng(1)
    ht = ad.l2_normalize_rows(T(rng.normal(12).reshape(3, 4)))
    hv = ad.l2_normalize_rows(T(rng.normal(12).reshape(3, 4)))
    a = mix("gated_fusion", init_mixer("gated_fusion", 4, 0), [ht, hv]).data
    b = mix("mean_pool", {}, [ht, hv]).data
    assert np.allclose(a, b, atol=1e-15)


def test_mean_pool_symmetry():
    out = mix("mean_pool", {}, [T([[1.0, 0.0]]), T([[0.0, 1.0]])])
    assert np.allclose(out.data, [[2 ** -0.5, 2 ** -0.5]], atol=1e-15)


@pytest.mark.parametrize("mixer", ["mean_pool", "gated_fusion", "mfb"])
def test_mixer_outputs_unit_rows(mixer):
    rng = Rng(2)
    ht = ad.l2_normalize_rows(T(rng.normal(40).reshape(5, 8)))
    hv = ad.l2_normalize_rows(T(rng.normal(40).reshape(5, 8)))
    out = mix(mixer, init_mixer(mixer, 8, 3), [ht, hv]).data
    assert out.shape == (5, 8)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


def test_mfb_matches_direct_formula():
    rng = Rng(4)
    ht = ad.l2_normalize_rows(T(rng.normal(6)))
    hv = ad.l2_normalize_rows(T(rng.normal(6)))
    phi = init_mixer("mfb", 6, 0, factor=4)
    z = (ht.data @ phi["mfb.text"].data) * (hv.data @ phi["mfb.image"].data)
    z = z.reshape(1, 6, 4).sum(axis=2)
    z = np.sign(z) * np.sqrt(np.abs(z))
    assert np.allclose(mix("mfb", phi, [ht, hv], 4).data, z / np.linalg.norm(z), atol=1e-14)


def test_degenerate_prototype():
    with pytest.raises(DegeneratePrototypeError):
        mix("mean_pool", {}, [T([E0]), T([-E0])])
    with pytest.raises(ContractError):
        mix("mean_pool", {}, [T([E0])])


# ---------------------------------------------------------------------------
# MCR


def test_mcr_examples():
    eye = np.eye(4)
    assert mcr_loss(T(eye[:3]), T(eye[:3]), 0.02).item() < 1e-20
    assert mcr_loss(T(eye[:3]), T(eye[:3]), 1.0).item() == pytest.approx(math.log(1 + 2 * math.exp(-1)), abs=1e-12)
    # the closed form is 0.5514 (the 0.5435 sometimes quoted for this case is an arithmetic slip)
    assert mcr_loss(T(eye[:3]), T(eye[:3]), 1.0).item() == pytest.approx(0.5514, abs=1e-4)
    comp = ad.l2_normalize_rows(T(Rng(0).normal(20).reshape(5, 4)))
    assert mcr_loss(comp, T([E0] * 5), 0.02).item() == pytest.approx(math.log(5), abs=1e-9)


def test_mcr_contracts():
    assert mcr_loss(T([E0]), T([E0]), 1.0).item() == 0.0
    with pytest.raises(ContractError):
        mcr_loss(T([E0, E0]), T([E0]), 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 8), tau=st.sampled_from([0.02, 0.1, 1.0]))
def test_mcr_bounds(seed, n, tau):
    rng = Rng(seed)
    comp = ad.l2_normalize_rows(T(rng.normal(n * 4).reshape(n, 4)))
    protos = ad.l2_normalize_rows(T(rng.normal(n * 4).reshape(n, 4)))
    v = mcr_loss(comp, protos, tau).item()
    assert 0 < v <= math.log(n) + 2 / tau + 1e-9


# ---------------------------------------------------------------------------
# combined objective

ENC = EncoderConfig(d_model=16, d_out=8, n_hidden_layers=1, image_dim=6, text_vocab=4)


def make_batch(seed=0, n=6, composed=True):
    rng = Rng(seed, "tb")
    img = rng.child("q").normal(n * 6).reshape(n, 6)
    tok = rng.child("t").integers(n, 4) if composed else np.full(n, -1)
    q = ItemBatch(img, np.ones(n, dtype=bool), tok)
    d = ItemBatch(rng.child("d").normal(n * 6).reshape(n, 6), np.ones(n, dtype=bool), np.full(n, -1))
    return TrainBatch(q, d)


def test_vanilla_reduction_is_bit_exact():
    params = init_params(ENC, 0)
    batch = make_batch()
    cfg = MCAConfig(alpha=0.0, beta=0.0)
    total, parts = total_loss(batch, params, cfg, init_mixer(cfg.mixer, 8, 0))
    q = Tensor(encode_array(params, batch.queries))
    d = Tensor(encode_array(params, batch.docs))
    assert total.item() == cl_loss(q, d, np.arange(len(batch)), cfg.tau).item()
    assert parts.mcp != 0 and parts.mcr != 0  # raw values still reported


def test_no_composed_pairs_gives_zero_terms():
    params = init_params(ENC, 0)
    batch = make_batch(composed=False)
    total, parts = total_loss(batch, params, MCAConfig(alpha=1.0, beta=1.0), init_mixer("gated_fusion", 8, 0))
    assert parts.mcp == 0.0 and parts.mcr == 0.0 and parts.n_composed_pairs == 0
    assert total.item() == parts.cl


def test_total_matches_independent_recomputation():
    """Hand-built 2-pair batch, every term recomputed in plain numpy."""
    params = init_params(ENC, 1)
    rng = Rng(7)
    q = ItemBatch(rng.normal(12).reshape(2, 6), np.array([True, True]), np.array([1, 3]))
    d = ItemBatch(rng.normal(12).reshape(2, 6), np.array([True, True]), np.array([-1, -1]))
    cfg = MCAConfig(alpha=0.01, beta=0.01, mixer="mean_pool")
    total, parts = total_loss(TrainBatch(q, d), params, cfg, {})

    e = lambda b: encode_array(params, b)  # noqa: E731
    hq, hd, hv, ht = e(q), e(d), e(q.image_parts()), e(q.text_parts())
    tau = cfg.tau
    s = hq @ hd.T / tau
    cl = -np.mean([s[i, i] - np.log(np.exp(s[i] - s[i].max()).sum()) - s[i].max() for i in range(2)])
    tgt = np.sum(hq * hd, 1)
    mcp = np.mean((np.sum(hv * hd, 1) - tgt + np.sum(ht * hd, 1) - tgt) / tau)
    proto = hv + ht
    proto /= np.linalg.norm(proto, axis=1, keepdims=True)
    m = hq @ proto.T / tau
    mcr = -np.mean([m[i, i] - m[i].max() - np.log(np.exp(m[i] - m[i].max()).sum()) for i in range(2)])
    assert parts.cl == pytest.approx(cl, rel=1e-12)
    assert parts.mcp == pytest.approx(mcp, rel=1e-12)
    assert parts.mcr == pytest.approx(mcr, rel=1e-9, abs=1e-12)
    assert total.item() == pytest.approx(cl + 0.01 * mcp + 0.01 * mcr, rel=1e-12)


def test_mcp_counts_both_composed_sides():
    params = init_params(ENC, 2)
    rng = Rng(8)
    q = ItemBatch(rng.normal(18).reshape(3, 6), np.ones(3, dtype=bool), np.array([0, 1, -1]))
    d = ItemBatch(rng.normal(18).reshape(3, 6), np.ones(3, dtype=bool), np.array([2, -1, -1]))
    _, parts = total_loss(TrainBatch(q, d), params, MCAConfig(), init_mixer("gated_fusion", 8, 0))
    assert parts.n_composed_pairs == 2
    one_way = total_loss(TrainBatch(q, d), params, MCAConfig(mcp_bidirectional=False),
                         init_mixer("gated_fusion", 8, 0))[1]
    assert one_way.mcp != parts.mcp


def test_prototype_stop_gradient_keeps_mixer_trainable():
    batch = make_batch(n=4)
    grads = {}
    for sg in (False, True):
        params = init_params(ENC, 0)
        phi = init_mixer("gated_fusion", 8, 0)
        cfg = MCAConfig(alpha=0.0, beta=1.0, prototype_stop_gradient=sg, tau=0.5)
        ad.backward(total_loss(batch, params, cfg, phi)[0])
        grads[sg] = (params["text_embed.weight"].grad.copy(), phi["gate.weight"].grad)
    assert not np.allclose(grads[False][0], grads[True][0])
    assert grads[True][1] is not None and np.any(grads[True][1])
