import numpy as np
import pytest
import torch

from satdown.conditioning import (
    ConditionDecoder,
    ConditionEncoder,
    CrossAttentionParams,
    EncoderConfig,
    PretrainConfig,
    cross_attention,
    decode,
    encode,
    pretrain_encoder,
    resample_features,
)
from satdown.errors import ValidationError
from satdown.synthetic import SynthConfig, derive_condition, generate_field


def brute_force_attention(x_tokens, y_tokens, w_q, w_k, w_v):
    """Loop-and-math reimplementation of the attention formula (oracle)."""
    x = x_tokens.numpy().astype(np.float64)
    y = y_tokens.numpy().astype(np.float64)
    q = x @ w_q.numpy().T.astype(np.float64)
    k = y @ w_k.numpy().T.astype(np.float64)
    v = y @ w_v.numpy().T.astype(np.float64)
    d = w_q.shape[0]
    out = np.zeros((x.shape[0], d))
    weights = np.zeros((x.shape[0], y.shape[0]))
    for i in range(x.shape[0]):
        logits = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(y.shape[0])])
        e = np.exp(logits - logits.max())
        w = e / e.sum()
        weights[i] = w
        out[i] = sum(w[j] * v[j] for j in range(y.shape[0]))
    return out, weights


def zero_bias_encoder(cfg):
    torch.manual_seed(0)
    enc = ConditionEncoder(cfg)
    with torch.no_grad():
        for name, p in enc.named_parameters():
            if name.endswith("bias"):
                p.zero_()
    return enc


class TestEncoder:
    def test_zero_input_zero_bias_gives_zero(self):
        enc = zero_bias_encoder(EncoderConfig(in_channels=3, stride=2))
        out = encode(torch.zeros(3, 16, 16), enc)
        assert float(out.abs().max()) == 0.0

    def test_output_channels_64(self):
        for stride in (1, 2):
            enc = ConditionEncoder(EncoderConfig(in_channels=3, stride=stride))
            out = encode(torch.randn(3, 16, 16), enc)
            assert out.shape[0] == 64
            assert out.shape[1] == 16 // stride

    def test_translation_equivariance_interior(self):
        torch.manual_seed(1)
        enc = ConditionEncoder(EncoderConfig(in_channels=2, stride=1))
        x = torch.randn(2, 24, 24)
        shifted = torch.roll(x, shifts=1, dims=2)
        a = encode(x, enc)
        b = encode(shifted, enc)
        m = 8  # clear of boundary effects (receptive field is 13)
        np.testing.assert_allclose(
            b[:, m:-m, m + 1 : -m + 1].detach().numpy(),
            a[:, m:-m, m : -m].detach().numpy(),
            atol=1e-5,
        )

    def test_channel_mismatch(self):
        enc = ConditionEncoder(EncoderConfig(in_channels=3))
        with pytest.raises(ValidationError):
            encode(torch.randn(4, 8, 8), enc)

    def test_deterministic(self):
        enc = ConditionEncoder(EncoderConfig(in_channels=3))
        x = torch.randn(3, 8, 8)
        a = encode(x, enc)
        b = encode(x, enc)
        assert torch.equal(a, b)


class TestDecoder:
    def test_round_trip_shape(self):
        for stride in (1, 2):
            cfg = EncoderConfig(in_channels=3, stride=stride)
            enc, dec = ConditionEncoder(cfg), ConditionDecoder(cfg)
            x = torch.randn(3, 16, 16)
            recon = decode(encode(x, enc), dec)
            assert recon.shape == x.shape

    def test_untrained_output_finite(self):
        cfg = EncoderConfig(in_channels=2, stride=2)
        enc, dec = ConditionEncoder(cfg), ConditionDecoder(cfg)
        out = decode(encode(torch.randn(2, 8, 8), enc), dec)
        assert torch.isfinite(out).all()

    def test_decoder_shape_validation(self):
        dec = ConditionDecoder(EncoderConfig(in_channels=2))
        with pytest.raises(ValidationError):
            decode(torch.randn(32, 4, 4), dec)


def synthetic_conditions(n, seed=0):
    cfg = SynthConfig(seed=seed, n_samples=n, hr_size=(16, 16), scale_factor=2,
                      n_channels_target=2, n_channels_condition=2,
                      condition_scale=1, condition_noise_std=0.05)
    conds = []
    for i in range(n):
        hr = generate_field(cfg, i)
        conds.append(derive_condition(hr, cfg, i).values)
    data = np.stack(conds)
    std = data.std(axis=(0, 2, 3), keepdims=True)
    return ((data - data.mean(axis=(0, 2, 3), keepdims=True)) / std).astype(np.float32)


class TestPretrain:
    def test_single_sample_memorization(self):
        data = synthetic_conditions(1)
        res = pretrain_encoder(
            data, EncoderConfig(in_channels=2, stride=1),
            PretrainConfig(epochs=600, batch_size=1, lr=3e-3, seed=0),
        )
        assert res.epoch_losses[-1] < 0.02

    def test_bit_identical_across_runs(self):
        data = synthetic_conditions(8)
        cfg = PretrainConfig(epochs=3, batch_size=4, seed=5)
        r1 = pretrain_encoder(data, EncoderConfig(in_channels=2, stride=2), cfg)
        r2 = pretrain_encoder(data, EncoderConfig(in_channels=2, stride=2), cfg)
        for k, v in r1.encoder.state_dict().items():
            assert torch.equal(v, r2.encoder.state_dict()[k]), k

    def test_holdout_reconstruction_under_10pct_variance(self):
        data = synthetic_conditions(96)
        res = pretrain_encoder(
            data, EncoderConfig(in_channels=2, stride=2),
            PretrainConfig(epochs=30, batch_size=16, lr=1e-3, seed=0),
        )
        assert res.holdout_mse < 0.1 * res.holdout_variance

    def test_smoothed_loss_decreases_over_first_10_epochs(self):
        data = synthetic_conditions(64)
        res = pretrain_encoder(
            data, EncoderConfig(in_channels=2, stride=2),
            PretrainConfig(epochs=10, batch_size=16, lr=1e-3, seed=1),
        )
        smoothed = np.convolve(res.epoch_losses, np.ones(3) / 3, mode="valid")
        assert np.all(np.diff(smoothed) < 0)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValidationError):
            pretrain_encoder(np.zeros((0, 2, 8, 8), dtype=np.float32),
                             EncoderConfig(in_channels=2))


class TestResampleFeatures:
    def test_identity_same_size(self):
        y = torch.randn(64, 8, 8)
        out = resample_features(y, 8, 8)
        assert torch.equal(out, y)

    def test_constant_preserved(self):
        y = torch.full((64, 4, 4), 2.5)
        out = resample_features(y, 9, 7)
        np.testing.assert_allclose(out.numpy(), 2.5, atol=1e-6)

    def test_ramp_round_trip(self):
        ramp = torch.linspace(0, 1, 16).repeat(16, 1)
        y = ramp.unsqueeze(0).repeat(3, 1, 1)
        up = resample_features(y, 32, 32)
        back = resample_features(up, 16, 16)
        assert float((back - y).abs().max()) < 1e-3


class TestCrossAttention:
    def params(self, d=5, d_eps=3, d_tau=4, seed=0):
        g = torch.Generator().manual_seed(seed)
        return CrossAttentionParams(
            torch.randn(d, d_eps, generator=g),
            torch.randn(d, d_tau, generator=g),
            torch.randn(d, d_tau, generator=g),
        )

    def test_single_condition_token_returns_projected_value(self):
        p = self.params()
        x = torch.randn(6, 3)
        y = torch.randn(1, 4)
        out = cross_attention(x, y, p)
        expected = (y @ p.w_v.T).expand(6, -1)
        np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-6)

    def test_identical_tokens_give_uniform_weights(self):
        p = self.params()
        x = torch.randn(4, 3)
        y = torch.randn(1, 4).repeat(7, 1)
        out = cross_attention(x, y, p)
        expected = (y[:1] @ p.w_v.T).expand(4, -1)
        np.testing.assert_allclose(out.numpy(), expected.numpy(), atol=1e-5)

    def test_rows_sum_to_one_and_match_brute_force(self):
        p = self.params(d=4, d_eps=3, d_tau=3, seed=2)
        x = torch.randn(3, 3)
        y = torch.randn(3, 3)
        out = cross_attention(x, y, p)
        ref, weights = brute_force_attention(x, y, p.w_q, p.w_k, p.w_v)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(out.numpy(), ref, atol=1e-6)

    def test_sqrt_d_scaling_matches_brute_force(self):
        # doubling d changes the temperature exactly through the 1/sqrt(d)
        for d in (2, 8):
            p = self.params(d=d, d_eps=3, d_tau=3, seed=3)
            x = torch.randn(3, 3)
            y = torch.randn(3, 3)
            out = cross_attention(x, y, p)
            ref, _ = brute_force_attention(x, y, p.w_q, p.w_k, p.w_v)
            np.testing.assert_allclose(out.numpy(), ref, atol=1e-5)

    def test_dim_mismatch(self):
        p = self.params()
        with pytest.raises(ValidationError):
            cross_attention(torch.randn(2, 4), torch.randn(2, 4), p)
        with pytest.raises(ValidationError):
            cross_attention(torch.randn(2, 3), torch.randn(2, 5), p)
