import numpy as np
import pytest
import torch

from muae.model import (
    ConditionNet,
    EarlyWarningNet,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    tafilm,
)

PROBE_CFG = dict(d_model=8, n_heads=2, n_layers=2, ff_mult=2, dropout=0.0,
                 n_classes=3, w=5, d=4, s=3, cond_hidden=6)


def perturbed_double_model(cfg: ModelConfig, seed: int = 0) -> EarlyWarningNet:
    """Float64 model with every parameter nudged off its init, so no
    structurally zero gradient can hide a backprop error."""
    torch.manual_seed(seed)
    model = EarlyWarningNet(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.2)
    model.eval()
    return model


def param_group(name: str) -> str:
    if name.startswith("cond"):
        return "condition"
    if name.startswith("embed"):
        return "embedding"
    if ".attn" in name or ".ln1" in name:
        return "attention"
    if ".ff" in name or ".ln2" in name:
        return "feed_forward"
    return "head"


def fd_param_check(model: EarlyWarningNet, x_d, x_s, h: float = 1e-5) -> dict:
    """Max relative error between autograd and central differences, per group.

    The denominator floor sits above the finite-difference noise floor
    (eps * |loss| / h ~ 1e-10): key-projection biases have exactly zero
    gradient by softmax shift invariance, and central differences can only
    resolve zero down to that noise.
    """
    v = torch.randn(model.cfg.n_classes, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(99))

    def scalar():
        return (model(x_d, x_s) * v).sum()

    model.zero_grad()
    scalar().backward()
    worst = {}
    for name, p in model.named_parameters():
        grad = p.grad.reshape(-1).numpy()
        flat = p.data.reshape(-1)
        numeric = np.empty_like(grad)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = scalar().item()
                flat[i] = orig - h
                down = scalar().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
        err = np.max(np.abs(grad - numeric)
                     / np.maximum(np.maximum(np.abs(grad), np.abs(numeric)), 1e-5))
        g = param_group(name)
        worst[g] = max(worst.get(g, 0.0), float(err))
    return worst


class TestTafilm:
    def test_identity_at_zero_conditioning_is_bit_exact(self):
        torch.manual_seed(0)
        cfg = ModelConfig()
        model = EarlyWarningNet(cfg)
        x_d = torch.randn(3, cfg.w, cfg.d)
        x_s = torch.randn(3, cfg.s)
        assert torch.equal(model.fuse(x_d, x_s), x_d)

    def test_unit_gamma_zero_beta_doubles(self):
        x = torch.randn(2, 15, 15)
        out = tafilm(x, torch.ones_like(x), torch.zeros_like(x))
        assert torch.equal(out, 2.0 * x)

    def test_condition_net_shapes(self):
        cfg = ModelConfig(**PROBE_CFG)
        net = ConditionNet(cfg)
        gamma, beta = net(torch.randn(7, cfg.s))
        assert gamma.shape == beta.shape == (7, cfg.w, cfg.d)

    def test_condition_weights_gradient_check(self):
        cfg = ModelConfig(**PROBE_CFG)
        torch.manual_seed(1)
        net = ConditionNet(cfg).double()
        with torch.no_grad():
            for p in net.parameters():
                p.add_(torch.randn_like(p) * 0.2)
        x_d = torch.randn(2, cfg.w, cfg.d, dtype=torch.float64)
        x_s = torch.randn(2, cfg.s, dtype=torch.float64)
        v = torch.randn(2, cfg.w, cfg.d, dtype=torch.float64)

        def scalar():
            gamma, beta = net(x_s)
            return (tafilm(x_d, gamma, beta) * v).sum()

        scalar().backward()
        h = 1e-5
        for p in net.parameters():
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for i in range(0, flat.numel(), max(1, flat.numel() // 40)):
                orig = flat[i].item()
                with torch.no_grad():
                    flat[i] = orig + h
                    up = scalar().item()
                    flat[i] = orig - h
                    down = scalar().item()
                    flat[i] = orig
                numeric = (up - down) / (2 * h)
                denom = max(abs(grad[i].item()), abs(numeric), 1e-6)
                assert abs(grad[i].item() - numeric) / denom < 1e-4


class TestEmbedding:
    def test_zero_input_zero_bias_zero_tokens(self):
        cfg = ModelConfig(**PROBE_CFG)
        model = EarlyWarningNet(cfg)
        with torch.no_grad():
            model.embed.proj.bias.zero_()
        tokens = model.embed(torch.zeros(2, cfg.w, cfg.d))
        assert torch.equal(tokens, torch.zeros(2, cfg.d, cfg.d_model))

    def test_default_config_has_fifteen_tokens(self):
        cfg = ModelConfig()
        model = EarlyWarningNet(cfg)
        tokens = model.embed(torch.randn(2, cfg.w, cfg.d))
        assert tokens.shape == (2, 15, cfg.d_model)

    def test_channel_permutation_permutes_tokens(self):
        cfg = ModelConfig(**PROBE_CFG)
        torch.manual_seed(2)
        model = EarlyWarningNet(cfg)
        x = torch.randn(2, cfg.w, cfg.d)
        perm = torch.randperm(cfg.d)
        assert torch.equal(model.embed(x[:, :, perm]), model.embed(x)[:, perm])

    def test_static_tokens_extend_token_count(self):
        cfg = ModelConfig(**dict(PROBE_CFG, static_tokens=True))
        model = EarlyWarningNet(cfg)
        tokens = model.embed(torch.randn(2, cfg.w, cfg.d), torch.randn(2, cfg.s))
        assert tokens.shape[1] == cfg.d + cfg.s
        logits = model(torch.randn(2, cfg.w, cfg.d), torch.randn(2, cfg.s))
        assert logits.shape == (2, cfg.n_classes)


class TestEncoder:
    def test_single_token_stays_finite(self):
        cfg = ModelConfig(**dict(PROBE_CFG, d=1))
        model = EarlyWarningNet(cfg).eval()
        logits = model(torch.randn(2, cfg.w, 1), torch.randn(2, cfg.s))
        assert torch.isfinite(logits).all()

    def test_attention_rows_sum_to_one(self):
        cfg = ModelConfig()
        torch.manual_seed(3)
        model = EarlyWarningNet(cfg).eval()
        x_d = torch.randn(4, cfg.w, cfg.d)
        x_s = torch.randn(4, cfg.s)
        _, attns = model(x_d, x_s, return_attn=True)
        assert len(attns) == cfg.n_layers
        for attn in attns:
            assert attn.shape == (4, cfg.n_heads, cfg.d, cfg.d)
            sums = attn.sum(dim=-1)
            assert torch.all((sums - 1.0).abs() < 1e-6)


class TestFullModel:
    def test_logit_shape_is_event_count(self):
        cfg = ModelConfig()
        model = EarlyWarningNet(cfg).eval()
        logits = model(torch.randn(5, cfg.w, cfg.d), torch.randn(5, cfg.s))
        assert logits.shape == (5, 6)

    def test_inference_is_deterministic_despite_dropout_config(self):
        cfg = ModelConfig(dropout=0.5)
        torch.manual_seed(4)
        model = EarlyWarningNet(cfg).eval()
        x_d, x_s = torch.randn(3, cfg.w, cfg.d), torch.randn(3, cfg.s)
        assert torch.equal(model(x_d, x_s), model(x_d, x_s))

    def test_gradient_check_all_parameter_groups(self):
        cfg = ModelConfig(**PROBE_CFG)
        model = perturbed_double_model(cfg, seed=5)
        x_d = torch.randn(2, cfg.w, cfg.d, dtype=torch.float64)
        x_s = torch.randn(2, cfg.s, dtype=torch.float64)
        worst = fd_param_check(model, x_d, x_s)
        assert set(worst) == {"condition", "embedding", "attention", "feed_forward", "head"}
        for group, err in worst.items():
            assert err < 1e-4, (group, err)

    def test_variable_permutation_with_head_slots_at_identity_modulation(self):
        # fresh condition net outputs zero, so modulation is channel-blind and
        # permuting channels + head slots must leave logits unchanged
        cfg = ModelConfig(**dict(PROBE_CFG, dropout=0.0))
        torch.manual_seed(6)
        model = EarlyWarningNet(cfg).eval()
        x_d = torch.randn(3, cfg.w, cfg.d)
        x_s = torch.randn(3, cfg.s)
        base = model(x_d, x_s)
        perm = torch.randperm(cfg.d)
        with torch.no_grad():
            w = model.head.weight.reshape(cfg.n_classes, cfg.d, cfg.d_model)
            model.head.weight.copy_(w[:, perm].reshape(cfg.n_classes, -1))
        permuted = model(x_d[:, :, perm], x_s)
        assert torch.allclose(permuted, base, atol=1e-5)

    def test_variable_permutation_with_condition_slots_after_training_drift(self):
        cfg = ModelConfig(**dict(PROBE_CFG, dropout=0.0))
        model = perturbed_double_model(cfg, seed=7)
        x_d = torch.randn(3, cfg.w, cfg.d, dtype=torch.float64)
        x_s = torch.randn(3, cfg.s, dtype=torch.float64)
        base = model(x_d, x_s)
        perm = torch.randperm(cfg.d)
        with torch.no_grad():
            w = model.head.weight.reshape(cfg.n_classes, cfg.d, cfg.d_model)
            model.head.weight.copy_(w[:, perm].reshape(cfg.n_classes, -1))
            cw = model.cond.fc2.weight.reshape(2, cfg.w, cfg.d, -1)
            model.cond.fc2.weight.copy_(cw[:, :, perm].reshape(2 * cfg.w * cfg.d, -1))
            cb = model.cond.fc2.bias.reshape(2, cfg.w, cfg.d)
            model.cond.fc2.bias.copy_(cb[:, :, perm].reshape(-1))
        permuted = model(x_d[:, :, perm], x_s)
        assert torch.allclose(permuted, base, atol=1e-10)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=10, n_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(dropout=1.0)


class TestCheckpoint:
    def test_roundtrip_preserves_logits_and_config(self, tmp_path):
        cfg = ModelConfig(**dict(PROBE_CFG, dropout=0.1))
        torch.manual_seed(8)
        model = EarlyWarningNet(cfg).eval()
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path)
        back = load_checkpoint(path).eval()
        assert back.cfg == cfg
        x_d, x_s = torch.randn(3, cfg.w, cfg.d), torch.randn(3, cfg.s)
        assert torch.equal(back(x_d, x_s), model(x_d, x_s))

    def test_header_is_json_with_named_shapes(self, tmp_path):
        import json

        cfg = ModelConfig(**PROBE_CFG)
        model = EarlyWarningNet(cfg)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        hlen = int(np.frombuffer(blob, "<u4", 1, 4)[0])
        header = json.loads(blob[8 : 8 + hlen])
        names = {t["name"] for t in header["tensors"]}
        assert "head.weight" in names and "cond.fc2.bias" in names
        total = sum(int(np.prod(t["shape"])) for t in header["tensors"])
        assert len(blob) == 8 + hlen + 4 * total

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError):
            load_checkpoint(path)
