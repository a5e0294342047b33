import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import central_difference, relative_error, tiny_encoder
from segsr.encoder import (
    LoraLinear,
    convert_openai_clip_visual,
    encode,
    interpolate_positions,
    load_pretrained,
    lora_forward,
    save_weights,
    trainable_parameters,
)


# ---------------------------------------------------------------- lora_forward

def test_zero_b_gives_frozen_path_exactly():
    layer = LoraLinear(6, 5, rank=2)
    x = torch.randn(3, 6)
    assert torch.equal(lora_forward(layer, x), torch.nn.functional.linear(x, layer.weight, layer.bias))


def test_rank_one_algebra():
    layer = LoraLinear(4, 3, rank=1, bias=False)
    u, v, x = torch.randn(3), torch.randn(4), torch.randn(4)
    with torch.no_grad():
        layer.weight.zero_()
        layer.lora_a.copy_(u[:, None])
        layer.lora_b.copy_(v[:, None])
    torch.testing.assert_close(lora_forward(layer, x), u * (v @ x), rtol=0, atol=1e-6)


def test_matches_dense_materialization():
    g = torch.Generator().manual_seed(5)
    layer = LoraLinear(4, 4, rank=2, bias=False)
    w, a, b = (torch.randn(s, generator=g) for s in ((4, 4), (4, 2), (4, 2)))
    with torch.no_grad():
        layer.weight.copy_(w)
        layer.lora_a.copy_(a)
        layer.lora_b.copy_(b)
    x = torch.randn(4, generator=g)
    dense = (w + a @ b.T) @ x
    assert (lora_forward(layer, x) - dense).abs().max() < 1e-6


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError, match="trailing dimension"):
        lora_forward(LoraLinear(4, 4, rank=1), torch.randn(5))


@pytest.mark.parametrize("rank", [4, 5])
def test_rank_must_be_below_min_dim(rank):
    with pytest.raises(ValueError, match="rank"):
        LoraLinear(4, 8, rank=rank)


def test_only_factors_trainable():
    layer = LoraLinear(8, 8, rank=2)
    assert not layer.weight.requires_grad and not layer.bias.requires_grad
    assert layer.lora_a.requires_grad and layer.lora_b.requires_grad
    assert torch.count_nonzero(layer.lora_b) == 0
    assert 0.005 < layer.lora_a.std().item() < 0.05


# ---------------------------------------------------------------- positional grid

def test_interpolate_identity():
    table = torch.randn(4, 4, 3)
    assert interpolate_positions(table, (4, 4)) is table


def test_interpolate_constant():
    out = interpolate_positions(torch.full((3, 3, 2), 0.7), (5, 7))
    assert out.shape == (5, 7, 2)
    torch.testing.assert_close(out, torch.full((5, 7, 2), 0.7))


def test_interpolate_ramp_midpoints():
    table = torch.tensor([[0.0, 1.0], [2.0, 3.0]]).unsqueeze(-1)
    # hand-evaluated: sample positions 0, 0.5, 1 on each axis
    expected = torch.tensor([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]]).unsqueeze(-1)
    torch.testing.assert_close(interpolate_positions(table, (3, 3)), expected)


@pytest.mark.parametrize("target", [(0, 3), (2, -1)])
def test_interpolate_rejects_nonpositive(target):
    with pytest.raises(ValueError):
        interpolate_positions(torch.zeros(2, 2, 1), target)


# ---------------------------------------------------------------- encode

def test_published_grid_size():
    enc = tiny_encoder(patch_size=16, depth=1, grid=14)
    lr = torch.rand(1, 3, 64, 64)
    up = torch.nn.functional.interpolate(lr, scale_factor=4, mode="bilinear", align_corners=False)
    feats = encode(enc, up)
    assert feats.local_feat.shape == (1, 16, 16, 16)
    assert feats.global_feat.shape == (1, 16)


def test_deterministic(encoder):
    x = torch.rand(1, 3, 32, 32)
    a, b = encode(encoder, x), encode(encoder, x)
    assert torch.equal(a.global_feat, b.global_feat) and torch.equal(a.local_feat, b.local_feat)
    again = encode(tiny_encoder(), x)
    assert torch.equal(a.local_feat, again.local_feat)


def test_zero_init_adapters_match_adapter_free(encoder):
    plain = tiny_encoder(lora_targets="none")
    x = torch.rand(2, 3, 24, 40)
    a, b = encode(encoder, x), encode(plain, x)
    assert (a.global_feat - b.global_feat).abs().max() <= 1e-6
    assert (a.local_feat - b.local_feat).abs().max() <= 1e-6


def test_indivisible_size_names_dimension(encoder):
    with pytest.raises(ValueError, match="width 20"):
        encode(encoder, torch.rand(1, 3, 16, 20))
    with pytest.raises(ValueError, match="height 12"):
        encode(encoder, torch.rand(1, 3, 12, 16))


@settings(max_examples=15, deadline=None)
@given(hc=st.integers(1, 6), wc=st.integers(1, 6))
def test_shape_law(hc, wc):
    enc = tiny_encoder(depth=1)
    feats = encode(enc, torch.rand(1, 3, 8 * hc, 8 * wc))
    assert feats.local_feat.shape == (1, hc, wc, 16)
    assert feats.global_feat.shape[-1] == feats.local_feat.shape[-1]


# ---------------------------------------------------------------- trainable parameters

@pytest.mark.parametrize("targets,per_layer", [("attn", 3), ("attn+ffn", 5)])
def test_adapter_counts(targets, per_layer):
    enc = tiny_encoder(depth=3, lora_targets=targets)
    assert len(enc.adapters()) == per_layer * 3
    params = trainable_parameters(enc)
    assert len(params) == 2 * per_layer * 3
    expected = sum(m.rank * (m.in_features + m.out_features) for m in enc.adapters())
    assert sum(p.numel() for p in params) == expected
    # square attention projections contribute 2 r d each
    assert enc.blocks[0].attn.q_proj.lora_a.numel() + enc.blocks[0].attn.q_proj.lora_b.numel() == 2 * 4 * 16
    trainable = {id(p) for p in enc.parameters() if p.requires_grad}
    assert trainable == {id(p) for p in params}


def test_optimizer_step_leaves_frozen_weights(encoder):
    snapshot = {k: v.clone() for k, v in encoder.frozen_state().items()}
    opt = torch.optim.Adam(trainable_parameters(encoder), lr=1e-2)
    feats = encode(encoder, torch.rand(2, 3, 16, 16))
    (feats.global_feat.sum() + feats.local_feat.pow(2).mean()).backward()
    opt.step()
    for k, v in encoder.frozen_state().items():
        assert torch.equal(v, snapshot[k]), k
    assert any(torch.count_nonzero(m.lora_b) for m in encoder.adapters())


def test_gradient_partition(encoder):
    feats = encode(encoder, torch.rand(1, 3, 16, 24))
    (feats.global_feat.sin().sum() + feats.local_feat.cos().sum()).backward()
    for name, p in encoder.named_parameters():
        if "lora_" not in name:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, name
    assert any(p.grad is not None and torch.count_nonzero(p.grad) for p in trainable_parameters(encoder))


def test_finite_difference_wrt_factor_a():
    torch.manual_seed(1)
    enc = tiny_encoder(width=8, heads=2, patch_size=4, grid=2, lora_rank=2).double()
    with torch.no_grad():
        for m in enc.adapters():
            m.lora_b.normal_(0, 0.3)
            m.lora_a.normal_(0, 0.3)
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    wg = torch.randn(8, dtype=torch.float64)
    wl = torch.randn(2, 2, 8, dtype=torch.float64)

    def readout():
        f = enc(x)
        return (f.global_feat[0] * wg).sum() + (f.local_feat[0] * wl).sum()

    readout().backward()
    for m in enc.adapters():
        numeric = central_difference(readout, m.lora_a, step=1e-3)
        assert relative_error(m.lora_a.grad, numeric) <= 1e-4


# ---------------------------------------------------------------- weight container

def test_save_load_roundtrip(tmp_path):
    src = tiny_encoder(seed=11)
    path = tmp_path / "enc.safetensors"
    save_weights(src, path)
    dst = tiny_encoder(seed=22)
    x = torch.rand(1, 3, 16, 16)
    assert not torch.equal(src(x).local_feat, dst(x).local_feat)
    load_pretrained(dst, path)
    assert torch.equal(src(x).local_feat, dst(x).local_feat)
    assert all(torch.count_nonzero(m.lora_b) == 0 for m in dst.adapters())


def test_truncated_file_leaves_encoder_unchanged(tmp_path):
    path = tmp_path / "enc.safetensors"
    save_weights(tiny_encoder(seed=1), path)
    path.write_bytes(path.read_bytes()[:200])
    enc = tiny_encoder(seed=2)
    before = {k: v.clone() for k, v in enc.state_dict().items()}
    with pytest.raises(ValueError, match="cannot read"):
        load_pretrained(enc, path)
    assert all(torch.equal(before[k], v) for k, v in enc.state_dict().items())


def test_wrong_shape_names_tensor(tmp_path):
    from safetensors.torch import save_file

    tensors = {k: v.clone() for k, v in tiny_encoder().frozen_state().items()}
    tensors["blocks.1.mlp.fc1.weight"] = torch.zeros(3, 3)
    path = tmp_path / "bad.safetensors"
    save_file(tensors, str(path))
    with pytest.raises(ValueError, match=r"blocks\.1\.mlp\.fc1\.weight: expected \(64, 16\), found \(3, 3\)"):
        load_pretrained(tiny_encoder(), path)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_pretrained(tiny_encoder(), tmp_path / "nope.safetensors")


def test_openai_clip_conversion_roundtrip():
    src = tiny_encoder(seed=4, proj_dim=6)
    sd = src.state_dict()
    clip = {
        "visual.conv1.weight": sd["conv1.weight"],
        "visual.class_embedding": sd["class_embedding"],
        "visual.positional_embedding": sd["positional_embedding"],
        "visual.proj": sd["proj"],
    }
    for ln in ("ln_pre", "ln_post"):
        clip[f"visual.{ln}.weight"] = sd[f"{ln}.weight"]
        clip[f"visual.{ln}.bias"] = sd[f"{ln}.bias"]
    for i in range(2):
        s, d = f"blocks.{i}.", f"visual.transformer.resblocks.{i}."
        clip[d + "attn.in_proj_weight"] = torch.cat([sd[s + f"attn.{n}.weight"] for n in ("q_proj", "k_proj", "v_proj")])
        clip[d + "attn.in_proj_bias"] = torch.cat([sd[s + f"attn.{n}.bias"] for n in ("q_proj", "k_proj", "v_proj")])
        clip[d + "attn.out_proj.weight"] = sd[s + "attn.out_proj.weight"]
        clip[d + "attn.out_proj.bias"] = sd[s + "attn.out_proj.bias"]
        for ln in ("ln_1", "ln_2"):
            clip[d + f"{ln}.weight"] = sd[s + f"{ln}.weight"]
            clip[d + f"{ln}.bias"] = sd[s + f"{ln}.bias"]
        clip[d + "mlp.c_fc.weight"] = sd[s + "mlp.fc1.weight"]
        clip[d + "mlp.c_fc.bias"] = sd[s + "mlp.fc1.bias"]
        clip[d + "mlp.c_proj.weight"] = sd[s + "mlp.fc2.weight"]
        clip[d + "mlp.c_proj.bias"] = sd[s + "mlp.fc2.bias"]
    converted = convert_openai_clip_visual(clip)
    assert set(converted) == set(src.frozen_state())
    for k, v in converted.items():
        if not k.startswith("pixel_"):
            assert torch.equal(v, sd[k]), k
