import math

import numpy as np
import pytest
import torch

from moviekit import denoiser as D
from moviekit import synthdata as sd


def small(**kw):
    cfg = D.DenoiserConfig(base_channels=8, channel_multipliers=(1, 2), embed_dim=16, context_dim=64, groups=4, **kw)
    return D.build_denoiser(cfg, np.random.default_rng(0))


def conds(b=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    c_I = torch.randn(b, 4, 8, 8, generator=g)
    c_T = torch.from_numpy(sd.encode_instruction(3))[None].expand(b, -1, -1)
    return c_I, c_T


def test_sinusoidal_oracle():
    v, dim = 7.0, 8
    emb = D.sinusoidal_embed(torch.tensor(v, dtype=torch.float64), dim)
    half = dim // 2
    freqs = [math.exp(-math.log(10000.0) * k / (half - 1)) for k in range(half)]
    ref = [math.sin(v * f) for f in freqs] + [math.cos(v * f) for f in freqs]
    assert np.allclose(emb.numpy(), ref, atol=1e-12)
    with pytest.raises(ValueError):
        D.sinusoidal_embed(1.0, 7)


def test_attention_oracle():
    rng = np.random.default_rng(0)
    q, k, v = (torch.from_numpy(rng.standard_normal((5, 4))) for _ in range(3))
    s = q.numpy() @ k.numpy().T / 2.0
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    assert np.allclose(D.attention(q, k, v).numpy(), w @ v.numpy(), atol=1e-12)


def test_cross_frame_concatenates_anchors():
    rng = np.random.default_rng(1)
    q = torch.from_numpy(rng.standard_normal((3, 4)))
    a1 = tuple(torch.from_numpy(rng.standard_normal((2, 4))) for _ in range(2))
    a2 = tuple(torch.from_numpy(rng.standard_normal((5, 4))) for _ in range(2))
    both = D.cross_frame_attention(q, [a1, a2])
    ref = D.attention(q, torch.cat([a1[0], a2[0]]), torch.cat([a1[1], a2[1]]))
    assert torch.allclose(both, ref, atol=1e-12)
    with pytest.raises(ValueError):
        D.cross_frame_attention(q, [])
    with pytest.raises(ValueError):
        D.cross_frame_attention(q, [(torch.zeros(2, 3), torch.zeros(2, 3))])


def test_single_anchor_self_is_self_attention_bitwise():
    m = small()
    c_I, c_T = conds(1)
    x = torch.randn(1, 4, 8, 8)
    rec = {}
    out_self = D.forward(m, x, 500.0, D.Conditioning(c_I, c_T), D.AttentionContext(record=rec))
    out_cf = D.forward(m, x, 500.0, D.Conditioning(c_I, c_T), D.AttentionContext("cross-frame", [rec]))
    assert torch.equal(out_self, out_cf)
    assert torch.equal(out_self, D.forward(m, x, 500.0, D.Conditioning(c_I, c_T)))


def test_shapes_and_single_input():
    m = small()
    c_I, c_T = conds(3)
    x = torch.randn(3, 4, 8, 8)
    out = D.forward(m, x, torch.tensor([1.0, 2.0, 3.0]), D.Conditioning(c_I, c_T))
    assert out.shape == x.shape
    one = D.forward(m, x[0], 1.0, D.Conditioning(c_I[0], c_T[0]))
    assert one.shape == x[0].shape


def test_input_channels():
    assert D.DenoiserConfig().in_channels == 8
    assert D.DenoiserConfig(image_conditioning=False).in_channels == 4
    m = small()
    with pytest.raises(ValueError):
        D.forward(m, torch.zeros(1, 3, 8, 8), 0.0, D.Conditioning())


def test_config_validation():
    with pytest.raises(ValueError):
        D.DenoiserConfig(attention_levels={2})
    with pytest.raises(ValueError):
        D.DenoiserConfig(prediction="score")
    with pytest.raises(ValueError):
        D.DenoiserConfig(base_channels=12, groups=8)
    cfg = D.DenoiserConfig(attention_levels={1})
    assert D.DenoiserConfig.from_dict(cfg.to_dict()) == cfg


def test_scale_contract():
    m = small()
    g = small(guidance_conditioned=True)
    x = torch.zeros(1, 4, 8, 8)
    with pytest.raises(ValueError):
        D.forward(m, x, 0.0, D.Conditioning(s_I=1.0, s_T=1.0))
    with pytest.raises(ValueError):
        D.forward(g, x, 0.0, D.Conditioning(s_I=1.0))


def test_null_conditioning_is_zero_image_and_null_tokens():
    m = small()
    x = torch.randn(2, 4, 8, 8)
    null = D.forward(m, x, 10.0, D.Conditioning())
    explicit = D.forward(
        m, x, 10.0, D.Conditioning(torch.zeros(2, 4, 8, 8), torch.from_numpy(sd.encode_instruction(0))[None].expand(2, -1, -1))
    )
    assert torch.equal(null, explicit)


def test_guidance_student_starts_as_teacher():
    teacher = small()
    student = D.guidance_student_from(teacher)
    assert student.cfg.guidance_conditioned
    c_I, c_T = conds(2)
    x = torch.randn(2, 4, 8, 8)
    for s_I, s_T in ((1.0, 1.0), (2.5, 9.0)):
        a = D.forward(teacher, x, 300.0, D.Conditioning(c_I, c_T))
        b = D.forward(student, x, 300.0, D.Conditioning(c_I, c_T, s_I, s_T))
        assert torch.equal(a, b)


def test_prune_attention_removes_level():
    m = small()
    p = D.prune_attention(m, [0])
    assert p.cfg.attention_levels == frozenset({1})
    assert "0" not in p.down_attn and "0" not in p.up_attn
    assert D.count_parameters(p) < D.count_parameters(m)
    assert torch.equal(p.conv_in.weight, m.conv_in.weight)


def test_retarget_keeps_weights():
    m = small()
    r = D.retarget(m, "v")
    assert r.cfg.prediction == "v" and m.cfg.prediction == "epsilon"
    x = torch.randn(1, 4, 8, 8)
    assert torch.equal(D.forward(m, x, 5.0, D.Conditioning()), D.forward(r, x, 5.0, D.Conditioning()))


def test_seeded_build_reproducible():
    a, b = small(), small()
    for (na, pa), (nb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert na == nb and torch.equal(pa, pb)


def test_toy_parameter_count():
    m = D.build_denoiser(D.DenoiserConfig(), np.random.default_rng(0))
    assert D.count_parameters(m) == 393_700


def test_forward_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = small(guidance_conditioned=True).double()
    # nonzero guidance pathway so its gradient is exercised too
    with torch.no_grad():
        for n, p in m.named_parameters():
            if "s_T_proj" in n:
                p.normal_(0, 0.1)
    c_I, c_T = conds(1)
    c_I, c_T = c_I.double(), c_T.double()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)

    def f(inp):
        return (D.forward(m, inp, 123.0, D.Conditioning(c_I, c_T, 1.5, 6.0)) * w).sum()

    (g,) = torch.autograd.grad(f(x), x)
    h = 1e-6
    idx = [(0, 0, 0, 0), (0, 1, 3, 4), (0, 3, 7, 7), (0, 2, 5, 1)]
    for i in idx:
        e = torch.zeros_like(x)
        e[i] = h
        fd = (f(x + e) - f(x - e)) / (2 * h)
        assert abs(fd.item() - g[i].item()) <= 1e-3 * max(abs(fd.item()), 1e-8)

    # and with respect to a weight
    p = m.down_attn["0"].self_attn.to_q.weight
    (gp,) = torch.autograd.grad(f(x.detach()), p)
    with torch.no_grad():
        orig = p[1, 2].item()
        p[1, 2] = orig + h
        fp = f(x.detach()).item()
        p[1, 2] = orig - h
        fm = f(x.detach()).item()
        p[1, 2] = orig
    fd = (fp - fm) / (2 * h)
    assert abs(fd - gp[1, 2].item()) <= 1e-3 * max(abs(fd), 1e-8)


def test_attention_context_validation():
    with pytest.raises(ValueError):
        D.AttentionContext("cross-frame")
    with pytest.raises(ValueError):
        D.AttentionContext("self", [{}])
    with pytest.raises(ValueError):
        D.AttentionContext("global")
