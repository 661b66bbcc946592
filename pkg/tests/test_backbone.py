import numpy as np
import pytest
import torch
from scipy.special import erf

from oracles import central_difference, relative_error
from siblurry.backbone import (
    BackboneSpec,
    ContractError,
    FrozenViT,
    ModelState,
    classify,
    full_spec,
    load_pretrained,
    parameter_hash,
    toy_spec,
)


def np_forward(state, spec, x, prompts=None):
    """Straight-line numpy re-implementation of the prompted ViT forward pass."""
    W = {k: v.detach().numpy().astype(np.float64) for k, v in state.items()}
    D, H = spec.embed_dim, spec.num_heads
    dh = D // H

    def ln(t, pre):
        mu = t.mean(-1, keepdims=True)
        var = ((t - mu) ** 2).mean(-1, keepdims=True)
        return (t - mu) / np.sqrt(var + 1e-6) * W[pre + ".weight"] + W[pre + ".bias"]

    def lin(t, pre):
        return t @ W[pre + ".weight"].T + W[pre + ".bias"]

    outs = []
    for b in range(x.shape[0]):
        patches = x[b].reshape(-1, spec.patch_size)
        tok = np.concatenate([W["cls_token"][0], lin(patches, "patch_embed.proj")], 0) + W["pos_embed"][0]
        for i in range(spec.depth):
            pre = f"blocks.{i}"
            inserted = prompts is not None and i in spec.prompt_layers
            if inserted:
                p = prompts[b, spec.prompt_layers.index(i)]
                tok = np.concatenate([tok[:1], p, tok[1:]], 0)
            n = ln(tok, pre + ".norm1")
            qkv = lin(n, pre + ".attn.qkv")
            heads = []
            for h in range(H):
                q = qkv[:, h * dh:(h + 1) * dh]
                k = qkv[:, D + h * dh:D + (h + 1) * dh]
                v = qkv[:, 2 * D + h * dh:2 * D + (h + 1) * dh]
                s = q @ k.T / np.sqrt(dh)
                s = np.exp(s - s.max(1, keepdims=True))
                s /= s.sum(1, keepdims=True)
                heads.append(s @ v)
            tok = tok + lin(np.concatenate(heads, 1), pre + ".attn.proj")
            m = lin(ln(tok, pre + ".norm2"), pre + ".mlp.fc1")
            m = 0.5 * m * (1 + erf(m / np.sqrt(2)))
            tok = tok + lin(m, pre + ".mlp.fc2")
            if inserted:
                tok = np.concatenate([tok[:1], tok[1 + spec.prompt_length:]], 0)
        outs.append(ln(tok, "norm")[0])
    return np.stack(outs)


@pytest.fixture
def toy16():
    spec = toy_spec(input_dim=32, embed_dim=16, num_heads=2, patch_size=4)
    return FrozenViT(spec).double()


def test_query_matches_numpy_oracle(toy16):
    x = torch.randn(5, 32, dtype=torch.float64)
    q = toy16.extract_query(x)
    ref = np_forward(toy16.state_dict(), toy16.spec, x.numpy())
    np.testing.assert_allclose(q.numpy(), ref, atol=1e-5)


def test_prompted_matches_numpy_oracle(toy16):
    x = torch.randn(3, 32, dtype=torch.float64)
    p = torch.randn(3, *toy16.spec.prompt_shape, dtype=torch.float64)
    f = toy16.forward_with_prompts(x, p)
    ref = np_forward(toy16.state_dict(), toy16.spec, x.numpy(), p.numpy())
    np.testing.assert_allclose(f.detach().numpy(), ref, atol=1e-5)


def test_query_deterministic_and_shape(toy16):
    x = torch.randn(7, 32, dtype=torch.float64)
    a, b = toy16.extract_query(x), toy16.extract_query(x)
    assert a.shape == (7, 16)
    assert torch.equal(a, b)
    assert not a.requires_grad


def test_zero_length_prompt_is_identity():
    bb = FrozenViT(toy_spec(prompt_length=0))
    x = torch.randn(4, 64)
    assert torch.equal(bb.forward_with_prompts(x, None), bb.extract_query(x))
    bb2 = FrozenViT(toy_spec(prompt_layers=()))
    assert torch.equal(bb2.forward_with_prompts(x, None), bb2.extract_query(x))


def test_backbone_gets_no_gradient(toy16):
    x = torch.randn(4, 32, dtype=torch.float64)
    p = torch.randn(*toy16.spec.prompt_shape, dtype=torch.float64, requires_grad=True)
    v = torch.randn(16, dtype=torch.float64)
    (toy16.forward_with_prompts(x, p) @ v).sum().backward()
    assert p.grad is not None and p.grad.abs().sum() > 1e-6
    assert all(param.grad is None and not param.requires_grad for param in toy16.parameters())


def test_prompt_gradient_finite_difference():
    bb = FrozenViT(toy_spec()).double()
    x = torch.randn(3, 64, dtype=torch.float64)
    v = torch.randn(64, dtype=torch.float64)
    p = torch.randn(*bb.spec.prompt_shape, dtype=torch.float64, requires_grad=True)
    (bb.forward_with_prompts(x, p) @ v).sum().backward()
    coords = np.random.default_rng(0).choice(p.numel(), 200, replace=False)
    num = central_difference(lambda: (bb.forward_with_prompts(x, p) @ v).sum(), p, coords)
    ana = p.grad.flatten()[coords]
    assert relative_error(ana, num.flatten()[coords]) < 1e-4


def test_prompts_change_features(toy16):
    x = torch.randn(2, 32, dtype=torch.float64)
    p = torch.randn(*toy16.spec.prompt_shape, dtype=torch.float64)
    a = toy16.forward_with_prompts(x, p)
    p2 = p.clone()
    p2[-1] += torch.randn_like(p2[-1])
    assert not torch.allclose(a, toy16.forward_with_prompts(x, p2))


def test_prompt_shape_contract(toy16):
    x = torch.randn(2, 32, dtype=torch.float64)
    with pytest.raises(ContractError):
        toy16.forward_with_prompts(x, torch.zeros(3, 4, 16, dtype=torch.float64))
    with pytest.raises(ContractError):
        toy16.extract_query(torch.zeros(2, 31, dtype=torch.float64))


def test_spec_rejects_out_of_range_layers():
    with pytest.raises(ContractError):
        BackboneSpec(depth=2, prompt_layers=(0, 5))


def test_full_spec_geometry():
    spec = full_spec()
    assert spec.token_length == 197
    assert spec.prompt_shape == (5, 8, 768)


def test_image_input_path():
    spec = full_spec(depth=1, embed_dim=32, num_heads=2, image_size=32, patch_size=8, prompt_layers=(0,))
    bb = FrozenViT(spec)
    x = torch.randint(0, 256, (2, 3, 16, 16), dtype=torch.uint8)
    q = bb.extract_query(x)
    assert q.shape == (2, 32)
    f = bb.forward_with_prompts(x, torch.zeros(1, 8, 32))
    assert f.shape == (2, 32)


def test_classify_cases():
    h = torch.zeros(3, 4, dtype=torch.float64)
    W = torch.randn(4, 6, dtype=torch.float64)
    assert torch.equal(classify(h, W), torch.zeros(3, 6, dtype=torch.float64))
    h = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(classify(h, torch.eye(4, dtype=torch.float64)), h)


def test_classify_matches_triple_loop():
    rng = np.random.default_rng(1)
    h, W = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    ref = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(7):
                ref[i, j] += h[i, k] * W[k, j]
    np.testing.assert_allclose(classify(torch.tensor(h), torch.tensor(W)).numpy(), ref, atol=1e-6)


def test_classify_linear():
    W = torch.randn(8, 5, dtype=torch.float64)
    h1, h2 = torch.randn(4, 8, dtype=torch.float64), torch.randn(4, 8, dtype=torch.float64)
    torch.testing.assert_close(classify(2.5 * h1 - 0.5 * h2, W), 2.5 * classify(h1, W) - 0.5 * classify(h2, W),
                               atol=1e-6, rtol=0)


def test_pretrained_roundtrip(tmp_path):
    spec = toy_spec(init_seed=4)
    src = FrozenViT(spec)
    torch.save({**src.state_dict(), "head.weight": torch.zeros(3, 64)}, tmp_path / "vit.pth")
    dst = FrozenViT(toy_spec(init_seed=99))
    assert parameter_hash(dst) != parameter_hash(src)
    load_pretrained(dst, tmp_path / "vit.pth")
    assert parameter_hash(dst) == parameter_hash(src)


def test_pretrained_shape_mismatch(tmp_path):
    src = FrozenViT(toy_spec(embed_dim=32))
    torch.save(src.state_dict(), tmp_path / "vit.pth")
    with pytest.raises(ContractError):
        load_pretrained(FrozenViT(toy_spec()), tmp_path / "vit.pth")


def test_model_state_checkpoint(tmp_path):
    model = ModelState(FrozenViT(toy_spec()), num_classes=7, pool_size=4, seed=1)
    model.pool.counts += torch.tensor([1, 0, 2, 3])
    back = ModelState.load(model.save(tmp_path / "ckpt.pt"))
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k]), k
    assert back.backbone_hash() == model.backbone_hash()
