import numpy as np
import pytest
import torch

from maskfill import nnet
from maskfill.checks import gradient_suite, shift_invariance_suite
from maskfill.nnet import (
    AdamState,
    ConvNetSpec,
    adam_step,
    forward,
    forward_batch,
    init_adam,
    init_params,
    input_grad,
    load_params,
    param_grad,
    save_params,
    simplex_project,
)

SPEC = ConvNetSpec(in_channels=2, hidden_channels=6, out_channels=2, n_blocks=2, output_head="softmax-over-channels")
LINEAR_SPEC = ConvNetSpec(in_channels=2, hidden_channels=6, out_channels=1, n_blocks=2, output_head="linear")


def rand_input(gen, spec, h=5, w=5):
    return torch.from_numpy(gen.standard_normal((spec.in_channels, h, w)))


class TestForward:
    def test_softmax_head_sums_to_one(self):
        gen = np.random.default_rng(0)
        params = init_params(SPEC, 1)
        out = forward(params, rand_input(gen, SPEC), 0.3)
        sums = out.sum(dim=0)
        assert torch.all((sums - 1.0).abs() <= 1e-12)

    def test_zero_final_layer_gives_uniform(self):
        gen = np.random.default_rng(1)
        params = init_params(SPEC, 2)  # final layer zero-initialised
        out = forward(params, rand_input(gen, SPEC), 0.0)
        assert torch.allclose(out, torch.full_like(out, 0.5), atol=0.0)

    def test_deterministic_across_runs(self):
        gen = np.random.default_rng(2)
        x = rand_input(gen, SPEC)
        a = forward(init_params(SPEC, 3), x, 0.7)
        b = forward(init_params(SPEC, 3), x, 0.7)
        assert torch.equal(a, b)

    def test_spatial_shape_preserved(self):
        gen = np.random.default_rng(3)
        params = init_params(LINEAR_SPEC, 4)
        out = forward(params, rand_input(gen, LINEAR_SPEC, 7, 9), 0.5)
        assert out.shape == (1, 7, 9)

    def test_rejects_wrong_channels(self):
        params = init_params(SPEC, 5)
        with pytest.raises(ValueError, match="expected"):
            forward(params, torch.zeros(3, 4, 4, dtype=torch.float64), 0.5)

    def test_rejects_nonfinite_input(self):
        params = init_params(SPEC, 5)
        x = torch.full((2, 4, 4), float("nan"), dtype=torch.float64)
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, x, 0.5)

    def test_rejects_bad_time(self):
        params = init_params(SPEC, 5)
        with pytest.raises(ValueError):
            forward(params, torch.zeros(2, 4, 4, dtype=torch.float64), 1.5)


class TestShiftInvariance:
    def test_bitwise_invariance(self):
        result = shift_invariance_suite(n_trials=20, seed=5)
        assert result["failures"] == 0

    def test_projection_jacobian_closed_form(self):
        # for a two-channel pixel with logits (a, b): d p0 / d a = p0 (1 - p0)
        logits = torch.tensor([[[0.3]], [[-1.1]]], dtype=torch.float64, requires_grad=True)
        p = simplex_project(logits, dim=0)
        (grad,) = torch.autograd.grad(p[0, 0, 0], logits)
        p0 = float(p[0, 0, 0].detach())
        assert grad[0, 0, 0].item() == pytest.approx(p0 * (1 - p0), abs=1e-10)
        assert grad[1, 0, 0].item() == pytest.approx(-p0 * (1 - p0), abs=1e-10)


class TestGradients:
    def test_constant_loss_gives_zero_param_grads(self):
        gen = np.random.default_rng(6)
        params = init_params(SPEC, 7)
        grads = param_grad(params, rand_input(gen, SPEC), 0.4, lambda out: (out * 0.0).sum() + 1.0)
        assert all(torch.count_nonzero(g) == 0 for g in grads.values())

    def test_loss_independent_of_input_gives_zero_input_grad(self):
        gen = np.random.default_rng(7)
        params = init_params(SPEC, 8)
        g = input_grad(params, rand_input(gen, SPEC), 0.4, lambda out: (out * 0.0).sum())
        assert torch.count_nonzero(g) == 0

    def test_param_and_input_grads_match_finite_differences(self):
        for spec in (SPEC, LINEAR_SPEC):
            result = gradient_suite(spec, n_coords=25, seed=9)
            assert result["max_rel_err_param"] <= 1e-4, result
            assert result["max_rel_err_input"] <= 1e-4, result

    def test_output_bias_gradient_closed_form(self):
        # the output layer is affine in its bias: for L = mean((out - y)^2),
        # dL/d out_b = mean over pixels of 2 (out - y) -- hand differentiation
        gen = np.random.default_rng(10)
        params = init_params(LINEAR_SPEC, 11)
        x = rand_input(gen, LINEAR_SPEC)
        y = torch.from_numpy(gen.standard_normal((1, 5, 5)))
        with torch.no_grad():
            out = forward(params, x, 0.5)
        grads = param_grad(params, x, 0.5, lambda o: ((o - y) ** 2).mean())
        expected = (2.0 * (out - y)).mean()
        assert grads["out_b"][0].item() == pytest.approx(float(expected), rel=1e-12)

    def test_output_weight_gradient_closed_form(self):
        # conv output is linear in the kernel: dL/dW[0,c,a,b] is the mean of
        # 2 (out - y) times the zero-padded hidden activation shifted by (a, b)
        gen = np.random.default_rng(12)
        spec = LINEAR_SPEC
        params = init_params(spec, 13)
        x = rand_input(gen, spec)
        y = torch.from_numpy(gen.standard_normal((1, 5, 5)))

        # hidden activations entering the output convolution
        import torch.nn.functional as F

        p = params.tensors
        emb = nnet.time_embedding(torch.tensor([0.5], dtype=torch.float64), spec.time_embed_dim)
        h_t = F.gelu(emb @ p["time_w"].T + p["time_b"])
        h = x.unsqueeze(0)
        for k in range(spec.n_blocks):
            h = F.conv2d(h, p[f"conv{k}_w"], p[f"conv{k}_b"], padding=1)
            film = h_t @ p[f"film{k}_w"].T + p[f"film{k}_b"]
            scale, shift = film.chunk(2, dim=1)
            h = F.gelu(h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None])
        with torch.no_grad():
            out = forward(params, x, 0.5)
            residual = 2.0 * (out - y) / y.numel()
            padded = F.pad(h, (1, 1, 1, 1))
        grads = param_grad(params, x, 0.5, lambda o: ((o - y) ** 2).mean())
        for a in range(3):
            for b in range(3):
                for c in range(spec.hidden_channels):
                    window = padded[0, c, a : a + 5, b : b + 5]
                    expected = float((residual[0] * window).sum())
                    assert grads["out_w"][0, c, a, b].item() == pytest.approx(expected, abs=1e-12)

    def test_batched_forward_matches_single(self):
        gen = np.random.default_rng(14)
        params = init_params(SPEC, 15)
        xs = [rand_input(gen, SPEC) for _ in range(3)]
        ts = [0.1, 0.5, 0.9]
        batched = forward_batch(params, torch.stack(xs), torch.tensor(ts, dtype=torch.float64))
        for i, (x, t) in enumerate(zip(xs, ts)):
            assert torch.allclose(batched[i], forward(params, x, t), atol=1e-12)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = init_params(SPEC, 16)
        state = init_adam(params, lr=1e-2)
        zeros = {k: torch.zeros_like(v) for k, v in params.tensors.items()}
        new_state, new_params = adam_step(state, params, zeros)
        assert new_state.step == 1
        assert all(torch.equal(new_params.tensors[k], params.tensors[k]) for k in zeros)

    def test_first_step_closed_form(self):
        # bias-corrected first step: theta - lr * g / (|g| + eps)
        params = init_params(LINEAR_SPEC, 17)
        state = init_adam(params, lr=1e-2)
        gen = np.random.default_rng(18)
        grads = {k: torch.from_numpy(gen.standard_normal(tuple(v.shape))) for k, v in params.tensors.items()}
        _, new_params = adam_step(state, params, grads)
        for k, g in grads.items():
            expected = params.tensors[k] - 1e-2 * g / (g.abs() + 1e-8)
            assert torch.allclose(new_params.tensors[k], expected, atol=1e-12)

    def test_two_step_scalar_trace(self):
        # hand-computed trace on a single parameter coordinate
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        theta, g = 1.0, 0.5
        m = v = 0.0
        for step in (1, 2):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**step)) / ((v / (1 - b2**step)) ** 0.5 + eps)

        spec = ConvNetSpec(1, 1, 1, n_blocks=1, output_head="linear")
        params = init_params(spec, 19)
        start = {k: torch.zeros_like(t) for k, t in params.tensors.items()}
        start["out_b"] = torch.tensor([1.0], dtype=torch.float64)
        params = params.with_tensors(start)
        state = init_adam(params, lr=lr)
        grads = {k: torch.zeros_like(t) for k, t in params.tensors.items()}
        grads["out_b"] = torch.tensor([g], dtype=torch.float64)
        for _ in range(2):
            state, params = adam_step(state, params, grads)
        assert params.tensors["out_b"][0].item() == pytest.approx(theta, abs=1e-14)
        assert state.step == 2


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        params = init_params(SPEC, 20)
        save_params(tmp_path / "p.ckpt", params)
        loaded = load_params(tmp_path / "p.ckpt")
        assert loaded.spec == params.spec
        assert loaded.seed == params.seed
        for k, t in params.tensors.items():
            assert t.numpy().tobytes() == loaded.tensors[k].numpy().tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "junk.ckpt").write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ValueError, match="magic"):
            load_params(tmp_path / "junk.ckpt")

    def test_truncation_detected(self, tmp_path):
        params = init_params(SPEC, 21)
        save_params(tmp_path / "p.ckpt", params)
        raw = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_params(tmp_path / "cut.ckpt")

    def test_trailing_bytes_detected(self, tmp_path):
        params = init_params(SPEC, 22)
        save_params(tmp_path / "p.ckpt", params)
        raw = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "fat.ckpt").write_bytes(raw + b"\x00" * 8)
        with pytest.raises(ValueError, match="trailing"):
            load_params(tmp_path / "fat.ckpt")


class TestAdamStateInvariants:
    def test_moments_match_param_shapes(self):
        params = init_params(SPEC, 23)
        state = init_adam(params, lr=1e-3)
        assert isinstance(state, AdamState)
        for k, t in params.tensors.items():
            assert state.m[k].shape == t.shape
            assert state.v[k].shape == t.shape
