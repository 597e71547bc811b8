"""Central difference convolution, residual contextual prompts and the prompted forward."""

from dataclasses import replace

import pytest
import torch
import torch.nn.functional as F

from data_structures import MaskEvent, MaskKind, ModelConfig
from mmr import apply_masks, mmr_values, total_loss
from prompt_engine import (
    ContextPipeline, ResidualContextCarry, build_model, cdc2d, compose_residual_prompt, compute_cd_context, expand,
    prompted_forward, token_grid,
)
from validation import ConfigurationError


def _naive_cdc(x, weight, bias, theta):
    """Direct evaluation of sum w(pn) x(p0+pn) - theta x(p0) sum w(pn) + b with zero padding."""
    _, c_in, h, w = x.shape
    c_out, _, k, _ = weight.shape
    r = k // 2
    padded = F.pad(x, (r, r, r, r))
    out = torch.zeros(x.shape[0], c_out, h, w, dtype=x.dtype)
    for i in range(h):
        for j in range(w):
            window = padded[:, :, i:i + k, j:j + k]
            conv = torch.einsum("bchw,ochw->bo", window, weight)
            center = torch.einsum("bc,oc->bo", x[:, :, i, j], weight.sum(dim=(2, 3)))
            out[:, :, i, j] = conv - theta * center + bias
    return out


@pytest.mark.parametrize("theta", [0.0, 0.3, 0.7, 1.0])
def test_cdc_matches_direct_formula(theta):
    generator = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 5, 4, generator=generator, dtype=torch.float64)
    weight = torch.randn(2, 3, 3, 3, generator=generator, dtype=torch.float64)
    bias = torch.randn(2, generator=generator, dtype=torch.float64)
    assert torch.allclose(cdc2d(x, weight, bias, theta), _naive_cdc(x, weight, bias, theta), atol=1e-10)


def test_cdc_matches_direct_formula_on_random_instances():
    generator = torch.Generator().manual_seed(7)
    for _ in range(200):
        batch, c_in, c_out, h, w = (int(v) for v in torch.randint(1, 5, (5,), generator=generator))
        k = (1, 3, 5)[int(torch.randint(0, 3, (1,), generator=generator))]
        theta = float(torch.rand(1, generator=generator, dtype=torch.float64))
        x = torch.randn(batch, c_in, h, w, generator=generator, dtype=torch.float64)
        weight = torch.randn(c_out, c_in, k, k, generator=generator, dtype=torch.float64)
        bias = torch.randn(c_out, generator=generator, dtype=torch.float64)
        assert torch.allclose(cdc2d(x, weight, bias, theta), _naive_cdc(x, weight, bias, theta), atol=1e-10)


def test_cdc_is_affine_in_theta():
    generator = torch.Generator().manual_seed(3)
    x = torch.randn(2, 4, 6, 6, generator=generator, dtype=torch.float64)
    weight = torch.randn(3, 4, 3, 3, generator=generator, dtype=torch.float64)
    bias = torch.randn(3, generator=generator, dtype=torch.float64)
    y0, y1 = cdc2d(x, weight, bias, 0.0), cdc2d(x, weight, bias, 1.0)
    center = F.conv2d(x, weight.sum(dim=(2, 3), keepdim=True))
    assert torch.allclose(y0 - y1, center, atol=1e-12)
    for theta in (0.1, 0.25, 0.5, 0.9):
        assert torch.allclose(cdc2d(x, weight, bias, theta), y0 + theta * (y1 - y0), atol=1e-12)


def test_cdc_theta_zero_is_plain_convolution():
    x = torch.randn(1, 2, 4, 4)
    weight = torch.randn(3, 2, 3, 3)
    assert torch.equal(cdc2d(x, weight, None, 0.0), F.conv2d(x, weight, None, padding=1))


def test_cdc_theta_one_on_constant_interior_is_bias():
    x = torch.full((1, 2, 5, 5), 0.7, dtype=torch.float64)
    weight = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    bias = torch.tensor([0.25], dtype=torch.float64)
    out = cdc2d(x, weight, bias, 1.0)
    assert torch.allclose(out[0, 0, 1:-1, 1:-1], torch.full((3, 3), 0.25, dtype=torch.float64))


def test_cdc_argument_checks():
    with pytest.raises(ConfigurationError):
        cdc2d(torch.zeros(1, 2, 3, 3), torch.zeros(1, 3, 3, 3), None, 0.5)
    with pytest.raises(ConfigurationError):
        cdc2d(torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 3, 3), None, 1.5)


def test_token_grid_is_row_major():
    tokens = torch.arange(8, dtype=torch.float32).reshape(1, 4, 2)
    grid = token_grid(tokens)
    assert grid.shape == (1, 2, 2, 2)
    assert grid[0, 0, 0, 1].item() == tokens[0, 1, 0].item()
    assert grid[0, 1, 1, 0].item() == tokens[0, 2, 1].item()
    with pytest.raises(ConfigurationError):
        token_grid(torch.zeros(1, 3, 2))


def test_cd_context_per_sample_and_modality_order(tiny_model_cfg):
    torch.manual_seed(0)
    pipeline = ContextPipeline(tiny_model_cfg)
    blocks = [torch.randn(3, 4, tiny_model_cfg.embed_dim) for _ in range(3)]
    context = compute_cd_context(blocks, pipeline, tiny_model_cfg)
    assert context.shape == (3, tiny_model_cfg.embed_dim)
    first = compute_cd_context([b[:1] for b in blocks], pipeline, tiny_model_cfg)
    assert torch.allclose(first, context[:1], atol=1e-6)
    swapped = compute_cd_context([blocks[1], blocks[0], blocks[2]], pipeline, tiny_model_cfg)
    assert not torch.allclose(swapped, context)
    with pytest.raises(ConfigurationError):
        compute_cd_context(blocks[:2], pipeline, tiny_model_cfg)


def test_expand_replicates_rows():
    context = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    rows = expand(context, 3)
    assert rows.shape == (2, 3, 2)
    assert torch.equal(rows[1, 2], context[1])
    gain = torch.tensor([[1.0, 1.0], [2.0, 2.0], [0.0, 1.0]])
    assert torch.equal(expand(context, 3, gain)[0, 2], torch.tensor([0.0, 2.0]))
    with pytest.raises(ConfigurationError):
        expand(context, 0)


def test_compose_residual_prompt_carries_previous_layer():
    base = torch.ones(2, 3)
    context = torch.tensor([[0.5, 0.0, 1.0]])
    first = compose_residual_prompt(base, context, None, 1)
    assert torch.equal(first.prompts, base + context.unsqueeze(1))
    second = compose_residual_prompt(base, context, first, 2)
    assert second.layer == 2
    assert torch.equal(second.prompts, base + context.unsqueeze(1) + first.prompts)


def test_compose_residual_prompt_accumulates_over_layers():
    base = torch.tensor([[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]], dtype=torch.float64)
    context = torch.tensor([[0.25, 0.5, -1.0]], dtype=torch.float64)
    carry = None
    for layer in (1, 2, 3):
        carry = compose_residual_prompt(base, context, carry, layer)
    assert carry.layer == 3
    assert torch.allclose(carry.prompts, 3 * (base + expand(context, 2)))


def test_compose_residual_prompt_layer_rules():
    base, context = torch.zeros(2, 3), torch.zeros(1, 3)
    carry = ResidualContextCarry(torch.zeros(1, 2, 3), layer=1)
    with pytest.raises(ConfigurationError):
        compose_residual_prompt(base, context, carry, 1)
    with pytest.raises(ConfigurationError):
        compose_residual_prompt(base, context, None, 2)
    with pytest.raises(ConfigurationError):
        compose_residual_prompt(base, context, carry, 3)


def _inputs(cfg, batch=3, dtype=torch.float32):
    generator = torch.Generator().manual_seed(1)
    return torch.rand(batch, 3, 3, cfg.image_size, cfg.image_size, generator=generator).to(dtype)


def test_prompted_forward_shapes(tiny_model_cfg):
    model = build_model(tiny_model_cfg, seed=0)
    logits, cls = model(_inputs(tiny_model_cfg))
    assert logits.shape == (3, 2)
    assert cls.shape == (3, tiny_model_cfg.embed_dim)


@pytest.mark.parametrize("vanilla,contextual", [(True, True), (True, False), (False, True)])
def test_layers_see_content_plus_prompts(tiny_model_cfg, vanilla, contextual, monkeypatch):
    cfg = replace(tiny_model_cfg, use_vanilla_prompts=vanilla, use_contextual_prompts=contextual)
    model = build_model(cfg, seed=0)
    lengths = []
    original = model.backbone.encoder_layer_forward

    def recording(tokens, layer):
        lengths.append(tokens.shape[1])
        return original(tokens, layer)

    monkeypatch.setattr(model.backbone, "encoder_layer_forward", recording)
    model(_inputs(cfg))
    assert lengths == [cfg.num_prompted_tokens] * cfg.num_layers
    assert cfg.num_prompted_tokens == cfg.num_content_tokens + cfg.vanilla_count + cfg.contextual_count


def test_no_prompts_matches_backbone(tiny_model_cfg):
    cfg = replace(tiny_model_cfg, prompt_length=0)
    model = build_model(cfg, seed=0)
    inputs = _inputs(cfg)
    prompted, _ = model(inputs)
    plain, _ = model.backbone(inputs)
    assert torch.allclose(prompted, plain)


def test_residual_carry_changes_output(tiny_model_cfg):
    inputs = _inputs(tiny_model_cfg)
    residual = build_model(tiny_model_cfg, seed=0)
    plain = build_model(replace(tiny_model_cfg, residual_context=False), seed=0)
    _, cls_residual = residual(inputs)
    _, cls_plain = plain(inputs)
    assert not torch.allclose(cls_residual, cls_plain)


def test_learned_expand_gain_is_trainable(tiny_model_cfg):
    model = build_model(replace(tiny_model_cfg, expand_mode="learned"), seed=0)
    assert model.prompts.expand_gain.requires_grad
    assert torch.equal(model.prompts.expand_gain, torch.ones_like(model.prompts.expand_gain))


def test_gradients_reach_prompts_not_backbone(tiny_model_cfg):
    model = build_model(tiny_model_cfg, seed=0)
    with torch.no_grad():
        model.backbone.head.weight.normal_()
    logits, _ = model(_inputs(tiny_model_cfg))
    F.cross_entropy(logits, torch.tensor([0, 1, 1])).backward()
    for layer in range(tiny_model_cfg.num_layers):
        assert model.prompts.vanilla_prompts.grad[layer].abs().sum() > 0
        assert model.prompts.base_prompts.grad[layer].abs().sum() > 0
        assert model.prompts.context[layer].cdc.conv.weight.grad.abs().sum() > 0
    for name, param in model.backbone.named_parameters():
        if not name.startswith("head."):
            assert param.grad is None, name


def _vpt_deep_logits(backbone, vanilla, zero_count, inputs):
    """Deep prompting with fixed per-layer prompt rows and no contextual branch."""
    x = backbone.patch_embed(inputs).tokens
    n_content = x.shape[1]
    for layer in range(1, backbone.cfg.num_layers + 1):
        zeros = torch.zeros(zero_count, x.shape[-1], dtype=x.dtype)
        prompts = torch.cat([vanilla[layer - 1], zeros]).unsqueeze(0).expand(x.shape[0], -1, -1)
        x = backbone.encoder_layer_forward(torch.cat([x, prompts], dim=1), layer)[:, :n_content]
    return backbone.classify(backbone.encoder_norm(x)[:, 0])


def test_zero_context_and_bases_reduce_to_vpt_deep(tiny_model_cfg):
    model = build_model(tiny_model_cfg, seed=0)
    with torch.no_grad():
        model.backbone.head.weight.normal_(generator=torch.Generator().manual_seed(4))
        model.prompts.base_prompts.zero_()
        for param in model.prompts.context.parameters():
            param.zero_()
    inputs = _inputs(tiny_model_cfg)
    logits, _ = prompted_forward(inputs, model.backbone, model.prompts, tiny_model_cfg)
    reference = _vpt_deep_logits(model.backbone, model.prompts.vanilla_prompts,
                                 tiny_model_cfg.contextual_count, inputs)
    assert torch.equal(logits, reference)
    assert torch.equal(logits.argmax(dim=1), reference.argmax(dim=1))


def test_prompt_position_outputs_are_discarded(tiny_model_cfg, monkeypatch):
    model = build_model(tiny_model_cfg, seed=0)
    with torch.no_grad():
        model.backbone.head.weight.normal_(generator=torch.Generator().manual_seed(5))
    inputs = _inputs(tiny_model_cfg)
    reference, _ = model(inputs)
    n_content = tiny_model_cfg.num_content_tokens
    original = model.backbone.encoder_layer_forward

    def shifted(start, stop):
        def forward(tokens, layer):
            out = original(tokens, layer).clone()
            out[:, start:stop] += 100.0
            return out
        return forward

    monkeypatch.setattr(model.backbone, "encoder_layer_forward", shifted(n_content, None))
    logits, _ = model(inputs)
    assert torch.equal(logits, reference)

    monkeypatch.setattr(model.backbone, "encoder_layer_forward", shifted(1, n_content))
    logits, _ = model(inputs)
    assert not torch.allclose(logits, reference)


@pytest.mark.parametrize("stop_gradient", [True, False])
def test_total_loss_gradients_match_finite_differences(stop_gradient):
    cfg = ModelConfig(image_size=32, patch_size=8, num_layers=2, embed_dim=16, num_heads=2, mlp_ratio=2.0,
                      prompt_length=4, hidden_dim=4)
    model = build_model(cfg, seed=0).double()
    generator = torch.Generator().manual_seed(2)
    with torch.no_grad():
        model.backbone.head.weight.normal_(generator=generator)
        model.backbone.head.bias.normal_(generator=generator)
    inputs = _inputs(cfg, batch=3, dtype=torch.float64)
    labels = torch.tensor([0, 1, 1])
    events = [MaskEvent(MaskKind.MASK_D), MaskEvent(MaskKind.NONE), MaskEvent(MaskKind.MASK_D_IR)]
    masked, fired = apply_masks(inputs, events)
    with torch.no_grad():
        _, fixed_complete = model(inputs[fired])

    def loss_fn():
        logits, cls = model(masked)
        complete = fixed_complete if stop_gradient else model(inputs[fired])[1]
        mmr = mmr_values(cls[fired], complete, stop_gradient=stop_gradient)
        return total_loss(logits, labels, mmr, weight=0.7).total

    model.zero_grad()
    loss_fn().backward()
    trainable = {name: p for name, p in model.named_parameters() if p.requires_grad}
    assert {"backbone.head.weight", "backbone.head.bias", "prompts.vanilla_prompts", "prompts.base_prompts",
            "prompts.context.1.up.bias", "prompts.context.0.cdc.conv.weight"} <= set(trainable)

    h = 1e-6
    worst = 0.0
    with torch.no_grad():
        for name, param in trainable.items():
            assert param.grad is not None, name
            flat, grad = param.view(-1), param.grad.view(-1)
            for k in range(flat.numel()):
                original = flat[k].item()
                flat[k] = original + h
                plus = loss_fn().item()
                flat[k] = original - h
                minus = loss_fn().item()
                flat[k] = original
                numeric = (plus - minus) / (2 * h)
                analytic = grad[k].item()
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3))
    assert worst < 1e-4
