import numpy as np
import pytest
import torch

from conftest import assert_grad_matches_fd
from reposer.correspondence import encode_heatmaps
from reposer.generator import (SCALE_CHANNELS, Discriminator, Generator, InjectionBlock, PoseEncoder, TextureEncoder,
                               generate, texture_inject, trgb_compose)


def identity_block(c):
    blk = InjectionBlock(c, c)
    with torch.no_grad():
        for seq in (blk.alpha, blk.beta):
            for p in seq.parameters():
                p.zero_()
        blk.alpha[-1].bias.fill_(1.0)
    return blk


def test_inject_identity():
    blk = identity_block(8)
    e_p, e_t = torch.randn(2, 8, 6, 6), torch.randn(2, 8, 6, 6)
    assert torch.allclose(texture_inject(e_p, e_t, blk, noise=0), e_p, atol=1e-6)


def test_inject_alpha_zero_gives_beta():
    blk = identity_block(4)
    with torch.no_grad():
        blk.alpha[-1].bias.zero_()
        blk.beta[-1].bias.copy_(torch.arange(4.0))
    out = texture_inject(torch.randn(1, 4, 5, 5), torch.randn(1, 4, 5, 5), blk, noise=0)
    assert torch.allclose(out, torch.arange(4.0).view(1, 4, 1, 1).expand_as(out))


def test_inject_noise_seeded():
    blk = InjectionBlock(4, 4)
    with torch.no_grad():
        blk.noise_weight.fill_(0.5)
    e_p, e_t = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
    a = texture_inject(e_p, e_t, blk, noise=7)
    b = texture_inject(e_p, e_t, blk, noise=7)
    c = texture_inject(e_p, e_t, blk, noise=8)
    assert torch.equal(a, b) and not torch.equal(a, c)
    # one noise map shared across channels, scaled per channel
    with torch.no_grad():
        blk.noise_weight.copy_(torch.tensor([0.0, 1.0, 2.0, 0.0]))
    alpha, beta = blk.modulation(e_t)
    d = texture_inject(e_p, e_t, blk, noise=3) - (alpha * e_p + beta)
    assert torch.allclose(d[:, 0], torch.zeros_like(d[:, 0]))
    assert torch.allclose(d[:, 2], 2 * d[:, 1], atol=1e-6)


def test_inject_misaligned():
    with pytest.raises(ValueError):
        texture_inject(torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 4, 4), InjectionBlock(4, 4))


def test_inject_gradient_matches_fd():
    torch.manual_seed(1)
    blk = InjectionBlock(3, 3).double()
    with torch.no_grad():
        blk.noise_weight.fill_(0.3)
    e_t = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    target = torch.randn(1, 3, 4, 4, dtype=torch.float64)

    def f(e_p):
        return ((texture_inject(e_p, e_t, blk, noise=5) - target) ** 2).sum()

    assert_grad_matches_fd(f, torch.randn(1, 3, 4, 4), n=20)

    # through the alpha / beta path, w.r.t. the texture features
    e_p = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert_grad_matches_fd(lambda t: ((texture_inject(e_p, t, blk, noise=5) - target) ** 2).sum(),
                           torch.randn(1, 3, 4, 4), n=20)


def test_trgb_compose_shapes_and_range():
    feats = [torch.randn(2, c, 4 * 2 ** i, 4 * 2 ** i) * 10 for i, c in enumerate(SCALE_CHANNELS)]
    heads = torch.nn.ModuleList([torch.nn.Conv2d(c, 3, 1) for c in SCALE_CHANNELS])
    out = trgb_compose(feats, heads).detach()
    assert out.shape == (2, 3, 32, 32)
    assert float(out.min()) >= 0 and float(out.max()) <= 1


def test_trgb_zero_heads_give_half_gray():
    feats = [torch.randn(1, c, 4 * 2 ** i, 4 * 2 ** i) for i, c in enumerate(SCALE_CHANNELS)]
    heads = torch.nn.ModuleList([torch.nn.Conv2d(c, 3, 1) for c in SCALE_CHANNELS])
    for h in heads:
        torch.nn.init.zeros_(h.weight)
        torch.nn.init.zeros_(h.bias)
    assert torch.equal(trgb_compose(feats, heads), torch.full((1, 3, 32, 32), 0.5))


def test_encoders_multiscale_shapes():
    heat = torch.rand(2, 5, 32, 32)
    e_p = PoseEncoder(5)(heat, heat)
    e_t = TextureEncoder()(torch.rand(2, 3, 32, 32))
    for i, (p, t, c) in enumerate(zip(e_p, e_t, SCALE_CHANNELS)):
        assert p.shape == t.shape == (2, c, 4 * 2 ** i, 4 * 2 ** i)
    with pytest.raises(ValueError):
        PoseEncoder(5)(heat, heat[:, :4])


def test_pose_encoder_order_matters():
    enc = PoseEncoder(3).eval()
    a, b = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    assert not torch.allclose(enc(a, b)[-1], enc(b, a)[-1])


@pytest.fixture(scope="module")
def gen_inputs():
    rng = np.random.default_rng(0)
    Pa, Pp = rng.uniform(2, 29, (6, 2)), rng.uniform(2, 29, (6, 2))
    return torch.rand(3, 32, 32), Pa, Pp


def test_generate_output_contract(gen_inputs):
    I, Pa, Pp = gen_inputs
    torch.manual_seed(0)
    g = Generator(6).eval()
    with torch.no_grad():
        out = generate(I, Pa, Pp, g, seed=0)
    assert out.shape == (3, 32, 32)
    assert torch.isfinite(out).all() and float(out.min()) >= 0 and float(out.max()) <= 1
    assert torch.equal(out, generate(I, Pa, Pp, g, seed=0))


def test_generator_sensitivity(gen_inputs):
    I, Pa, Pp = gen_inputs
    torch.manual_seed(0)
    g = Generator(6).eval()
    base = generate(I, Pa, Pp, g, seed=0)
    # changing the texture input changes the output
    assert not torch.allclose(base, generate(torch.rand(3, 32, 32), Pa, Pp, g, seed=0))
    # moving the target keypoints changes the output
    assert not torch.allclose(base, generate(I, Pa, np.clip(Pp + 3, 0, 31), g, seed=0))


def test_generator_gradients_reach_both_encoders(gen_inputs):
    I, Pa, Pp = gen_inputs
    g = Generator(6)
    out = generate(I, Pa, Pp, g, seed=0)
    out.mean().backward()
    for enc in (g.pose_encoder, g.texture_encoder):
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in enc.parameters())


def test_discriminator_patch_output():
    d = Discriminator(6)
    heat = encode_heatmaps(np.array([[3.0, 4.0]] * 6), 64, 64)
    assert d(torch.rand(3, 64, 64), heat).shape == (1, 4, 4)
    assert d(torch.rand(2, 3, 64, 64), heat.expand(2, -1, -1, -1)).shape == (2, 1, 4, 4)


def test_trgb_only_finest_head_active():
    feats = [torch.randn(1, c, 4 * 2 ** i, 4 * 2 ** i) for i, c in enumerate(SCALE_CHANNELS)]
    heads = torch.nn.ModuleList([torch.nn.Conv2d(c, 3, 1) for c in SCALE_CHANNELS])
    for h in heads[:-1]:
        torch.nn.init.zeros_(h.weight)
        torch.nn.init.zeros_(h.bias)
    with torch.no_grad():
        assert torch.allclose(trgb_compose(feats, heads), torch.sigmoid(heads[-1](feats[-1])))


def test_trgb_coarse_head_influences_its_support():
    feats = [torch.randn(1, c, 4 * 2 ** i, 4 * 2 ** i) for i, c in enumerate(SCALE_CHANNELS)]
    heads = torch.nn.ModuleList([torch.nn.Conv2d(c, 3, 1) for c in SCALE_CHANNELS])
    with torch.no_grad():
        base = trgb_compose(feats, heads)
        heads[0].weight.mul_(2)
        heads[0].bias.add_(0.5)  # keeps the doubled output nonzero everywhere
        changed = trgb_compose(feats, heads)
    assert bool((changed != base).all())


def test_texture_encoder_distinguishes_black_from_textured():
    enc = TextureEncoder().eval()
    black = torch.zeros(1, 3, 32, 32)
    textured = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        for a, b in zip(enc(black), enc(textured)):
            assert float((a - b).abs().max()) > 0
        assert all(torch.equal(a, b) for a, b in zip(enc(textured), enc(textured.clone())))


def test_pose_encoder_zero_heatmaps_finite():
    z = torch.zeros(1, 4, 32, 32)
    assert all(torch.isfinite(e).all() for e in PoseEncoder(4)(z, z))


def test_discriminator_sensitive_to_pose_channels():
    d = Discriminator(6).eval()
    img = torch.rand(1, 3, 32, 32)
    heat = encode_heatmaps(np.random.default_rng(0).uniform(0, 31, (6, 2)), 32, 32).unsqueeze(0)
    with torch.no_grad():
        a = d(img, heat)
        assert torch.equal(a, d(img, heat))
        assert not torch.equal(a, d(img, heat[:, torch.randperm(6)]))


def test_zero_noise_weights_make_generate_reproducible(gen_inputs):
    I, Pa, Pp = gen_inputs
    g = Generator(6).eval()
    with torch.no_grad():
        for blk in g.inject:
            blk.noise_weight.fill_(0.7)
        assert not torch.equal(generate(I, Pa, Pp, g, seed=1), generate(I, Pa, Pp, g, seed=2))
        for blk in g.inject:
            blk.noise_weight.zero_()
        assert torch.equal(generate(I, Pa, Pp, g), generate(I, Pa, Pp, g))


def test_output_bounded_for_extreme_parameters(gen_inputs):
    I, Pa, Pp = gen_inputs
    g = Generator(6)
    with torch.no_grad():
        for p in g.parameters():
            p.mul_(50)
        out = generate(I, Pa, Pp, g, seed=0)
    assert torch.isfinite(out).all() and float(out.min()) >= 0 and float(out.max()) <= 1


def test_every_parameter_group_receives_gradient(gen_inputs):
    I, Pa, Pp = gen_inputs
    g = Generator(6)
    with torch.no_grad():
        for blk in g.inject:
            blk.noise_weight.fill_(0.1)
    out = generate(I, Pa, Pp, g, seed=0)
    ((out - 0.3) ** 2).mean().backward()
    for name, mod in [("pose", g.pose_encoder), ("texture", g.texture_encoder), ("inject", g.inject),
                      ("trgb", g.trgb)]:
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in mod.parameters()), name
