import pytest
import torch

from conftest import audit_model_config, tiny_model_config
from oracles import param_count
from freqbooster.config import ModelConfig, preset
from freqbooster.model import (
    ConditioningContext,
    FrequencyBooster,
    InvalidClassError,
    TokenSequence,
    build_model,
    count_parameters,
    fuse,
    patchify,
    unpatchify,
)


def _rand(shape, seed=0, dtype=torch.float64):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype) * 2 - 1


def _ctx(model, batch, t=0.5, label=0):
    return model._context(t, label, batch, next(model.parameters()))


# -- patchify ----------------------------------------------------------------


@pytest.mark.parametrize("size,p,count,width", [(256, 16, 256, 768), (512, 32, 256, 3072)])
def test_patchify_token_counts(size, p, count, width):
    tokens = patchify(torch.zeros(size, size, 3), p)
    assert tokens.data.shape == (count, width)
    assert tokens.grid == (size // p, size // p)


def test_single_patch_is_flattened_image():
    img = _rand((4, 4, 3))
    tokens = patchify(img, 4)
    assert torch.equal(tokens.data[0], img.reshape(-1))


def test_patch_order_is_row_major():
    img = torch.zeros(4, 6, 1)
    img[0:2, 2:4] = 1.0  # row 0, col 1
    img[2:4, 0:2] = 2.0  # row 1, col 0
    tokens = patchify(img, 2)
    assert tokens.grid == (2, 3)
    assert torch.all(tokens.data[1] == 1) and torch.all(tokens.data[3] == 2)


def test_unpatchify_inverts_patchify():
    img = _rand((2, 64, 64, 3), seed=1)
    assert torch.equal(unpatchify(patchify(img, 8), 8), img)


def test_unpatchify_shapes():
    assert unpatchify(TokenSequence(torch.zeros(1, 48), (1, 1)), 4).shape == (4, 4, 3)
    assert unpatchify(TokenSequence(torch.zeros(16, 192), (4, 4)), 8).shape == (32, 32, 3)


def test_patchify_errors():
    with pytest.raises(ValueError):
        patchify(torch.zeros(10, 10, 3), 4)
    with pytest.raises(ValueError):
        unpatchify(TokenSequence(torch.zeros(4, 10), (2, 2)), 2)


# -- backbone ----------------------------------------------------------------


def test_init_identity_c_s_equals_embedding():
    cfg = tiny_model_config()
    model = build_model(cfg, seed=3, dtype=torch.float64).eval()
    z = _rand((2, 8, 8, 3), seed=2)
    tokens = patchify(z, cfg.patch_size)
    for t in (0.01, 0.5, 0.95):
        for label in (0, 1, cfg.null_class):
            c_s, tapped = model.dit_forward(tokens, _ctx(model, 2, t, label))
            expected = model.embed(tokens)
            assert torch.equal(c_s.data, expected)
            assert torch.equal(tapped.data, expected)


def test_in_context_tokens_extend_sequence_inside_blocks():
    cfg = tiny_model_config(dit_depth=3, in_context_start_block=1)
    model = build_model(cfg, dtype=torch.float64).eval()
    lengths = []
    hooks = [blk.register_forward_hook(lambda m, inp, out: lengths.append(out.shape[1]))
             for blk in model.dit_blocks]
    c_s, tapped = model.dit_forward(patchify(_rand((1, 8, 8, 3)), 2), _ctx(model, 1))
    for h in hooks:
        h.remove()
    L = cfg.seq_len
    assert lengths == [L, L + 32, L + 32]
    assert c_s.length == L and tapped.length == L


def test_tap_position(tiny_cfg):
    cfg = tiny_model_config(dit_depth=3, irepa_tap_block=2, in_context_start_block=0)
    model = build_model(cfg, dtype=torch.float64).eval()
    for p in model.parameters():
        torch.nn.init.normal_(p, std=0.2)
    outputs = []
    hooks = [blk.register_forward_hook(lambda m, i, o: outputs.append(o)) for blk in model.dit_blocks]
    _, tapped = model.dit_forward(patchify(_rand((1, 8, 8, 3)), 2), _ctx(model, 1))
    for h in hooks:
        h.remove()
    assert torch.equal(tapped.data, outputs[1][:, 32:])


def test_invalid_class_rejected(tiny_cfg):
    model = build_model(tiny_cfg)
    z = torch.zeros(1, 8, 8, 3)
    with pytest.raises(InvalidClassError):
        model(z, 0.5, 3)
    with pytest.raises(InvalidClassError):
        model(z, 0.5, -1)


def test_b_config_shapes_on_meta_device():
    cfg = preset("B", num_classes=1000)
    with torch.device("meta"):
        model = FrequencyBooster(cfg)
        feats = model.forward_features(torch.empty(1, 256, 256, 3), 0.5, 0)
    assert feats.c_s.data.shape == (1, 256, 768)
    assert feats.decoder_out.data.shape == (1, 256, 1536)
    assert feats.x_pred.shape == (1, 256, 256, 3)


# -- bridge, decoder, fusion -------------------------------------------------


def test_bridge_up_widths_and_bias():
    cfg = tiny_model_config()
    model = build_model(cfg, dtype=torch.float64)
    zero = TokenSequence(torch.zeros(2, cfg.seq_len, cfg.dit_dim, dtype=torch.float64), cfg.grid)
    up = model.bridge_up(zero)
    assert up.data.shape == (2, cfg.seq_len, cfg.dec_dim)
    torch.nn.init.normal_(model.bridge.bias)
    up = model.bridge_up(zero)
    assert torch.equal(up.data, model.bridge.bias.expand_as(up.data))
    with pytest.raises(ValueError):
        model.bridge_up(TokenSequence(torch.zeros(1, cfg.seq_len, 7), cfg.grid))


def test_bridge_identity_when_n_is_one():
    cfg = tiny_model_config(dec_dim=32)
    model = build_model(cfg, dtype=torch.float64)
    with torch.no_grad():
        model.bridge.weight.copy_(torch.eye(32))
        model.bridge.bias.zero_()
    c_s = TokenSequence(_rand((1, cfg.seq_len, 32)), cfg.grid)
    assert torch.equal(model.bridge_up(c_s).data, c_s.data)


def test_b_bridge_width():
    with torch.device("meta"):
        model = FrequencyBooster(preset("B"))
        up = model.bridge_up(TokenSequence(torch.empty(256, 768), (16, 16)))
    assert up.data.shape == (256, 1536)


def test_decoder_identity_at_init():
    cfg = tiny_model_config()
    model = build_model(cfg, dtype=torch.float64).eval()
    z = patchify(_rand((2, 8, 8, 3)), 2)
    c_s_up = TokenSequence(_rand((2, cfg.seq_len, cfg.dec_dim), seed=5), cfg.grid)
    out = model.decoder_forward(z, c_s_up, _ctx(model, 2))
    assert torch.equal(out.data, model.dec_in(z.data) + c_s_up.data)


def test_decoder_length_mismatch(tiny_cfg):
    model = build_model(tiny_cfg)
    z = patchify(torch.zeros(1, 8, 8, 3), 2)
    bad = TokenSequence(torch.zeros(1, 4, 64), (2, 2))
    with pytest.raises(ValueError):
        model.decoder_forward(z, bad, _ctx(model, 1))


def test_b_decoder_output_shape():
    cfg = preset("B")
    with torch.device("meta"):
        model = FrequencyBooster(cfg)
        z = patchify(torch.empty(1, 256, 256, 3), 16)
        up = TokenSequence(torch.empty(1, 256, 1536), (16, 16))
        out = model.decoder_forward(z, up, model._context(0.5, 0, 1, z.data))
    assert out.data.shape == (1, 256, 1536)


def test_attention_is_global_and_normalised():
    from freqbooster.model import Attention

    attn = Attention(8, 2).double()
    x = _rand((1, 4, 8))
    _, weights = attn(x, return_weights=True)
    assert weights.shape == (1, 2, 4, 4)
    assert torch.allclose(weights.sum(-1), torch.ones(1, 2, 4, dtype=torch.float64))
    assert bool((weights > 0).all())


def test_fusion():
    a = TokenSequence(_rand((3, 6), seed=1), (1, 3))
    b = TokenSequence(_rand((3, 6), seed=2), (1, 3))
    zero = TokenSequence(torch.zeros(3, 6, dtype=torch.float64), (1, 3))
    assert torch.equal(fuse(a, zero).data, a.data)
    assert torch.equal(fuse(a, b).data, fuse(b, a).data)
    with pytest.raises(ValueError):
        fuse(a, TokenSequence(torch.zeros(3, 5), (1, 3)))


def test_fuse_and_project_output_shape():
    cfg = preset("B")
    with torch.device("meta"):
        model = FrequencyBooster(cfg)
        x_r = TokenSequence(torch.empty(1, 256, 1536), (16, 16))
        img = model.fuse_and_project(x_r, x_r)
    assert img.shape == (1, 256, 256, 3)


# -- full pass ---------------------------------------------------------------


@pytest.mark.parametrize("cfg", [tiny_model_config(), audit_model_config(),
                                 tiny_model_config(image_size=16, patch_size=4)])
def test_forward_shape_and_determinism(cfg):
    model = build_model(cfg, seed=1, dtype=torch.float64).eval()
    for p in model.parameters():
        torch.nn.init.normal_(p, std=0.1, generator=torch.Generator().manual_seed(0))
    z = _rand((2, cfg.image_size, cfg.image_size, 3))
    a, _ = model(z, 0.3, torch.tensor([0, cfg.null_class]))
    b, _ = model(z, 0.3, torch.tensor([0, cfg.null_class]))
    assert a.shape == z.shape
    assert torch.equal(a, b)
    assert bool(torch.isfinite(a).all())


def test_null_class_path_is_differentiable(tiny_cfg):
    model = build_model(tiny_cfg, dtype=torch.float64)
    z = _rand((2, 8, 8, 3))
    x_pred, _ = model(z, 0.5, tiny_cfg.null_class)
    x_pred.pow(2).mean().backward()
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    assert grads and all(bool(torch.isfinite(g).all()) for g in grads)
    assert model.y_embed.weight.grad is not None


def test_dropout_only_in_training():
    cfg = tiny_model_config(dropout=0.2)
    model = build_model(cfg, dtype=torch.float64)
    for p in model.parameters():
        torch.nn.init.normal_(p, std=0.1, generator=torch.Generator().manual_seed(0))
    z = _rand((1, 8, 8, 3))
    model.eval()
    assert torch.equal(model(z, 0.5, 0)[0], model(z, 0.5, 0)[0])
    model.train()
    torch.manual_seed(0)
    a = model(z, 0.5, 0)[0]
    b = model(z, 0.5, 0)[0]
    assert not torch.equal(a, b)


@pytest.mark.parametrize("cfg", [
    ModelConfig(image_size=16, patch_size=4, dit_depth=2, dec_depth=1, dit_dim=32, dec_dim=64,
                heads=4, in_context_start_block=1, irepa_tap_block=1, num_classes=2,
                time_freq_dim=32),
    audit_model_config(),
    tiny_model_config(),
])
def test_parameter_count_matches_shape_oracle(cfg):
    expected = param_count.count(cfg.image_size, cfg.patch_size, cfg.channels, cfg.dit_depth,
                                 cfg.dec_depth, cfg.dit_dim, cfg.dec_dim, cfg.num_classes,
                                 cfg.n_class_tokens, cfg.time_freq_dim, cfg.mlp_ratio)
    assert count_parameters(build_model(cfg)) == expected


def test_b_parameter_count_matches_shape_oracle():
    cfg = preset("B")
    with torch.device("meta"):
        model = FrequencyBooster(cfg)
    # value printed by tests/oracles/param_count.py
    assert count_parameters(model) == 199_934_208


def test_build_model_seeded():
    cfg = tiny_model_config()
    a, b = build_model(cfg, seed=4), build_model(cfg, seed=4)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_gradients_match_finite_differences():
    from fdcheck import randomize, relative_errors

    cfg = audit_model_config()
    model = build_model(cfg, dtype=torch.float64)
    assert count_parameters(model) <= 10_000
    params = list(model.parameters())
    randomize(params, std=0.2, seed=1)
    z = _rand((2, 4, 4, 3), seed=3)
    labels = torch.tensor([0, cfg.null_class])

    def loss():
        return model(z, 0.4, labels)[0].pow(2).mean()

    errors = relative_errors(loss, params, n=150, h=1e-5, seed=2)
    assert max(errors) < 1e-3
