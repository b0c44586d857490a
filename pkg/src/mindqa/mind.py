"""Mental autoencoder (beta-VAE over egocentric frames) and the imagery model
(LSTM with a Gaussian-mixture head over next latents)."""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ndnet import Tensor, nn, ops
from .ndnet.ops import HALF_LOG_2PI

N_ACTIONS = 4

# (kernel, stride) per layer for each supported frame size; the decoder
# starts from a 2x2 seed map
_ENCODER_PLAN = {
    8: ((3, 1), (3, 1), (3, 1), (2, 1)),
    32: ((4, 2), (4, 2), (4, 2), (2, 1)),
}
_DECODER_PLAN = {
    8: ((3, 1), (3, 1), (3, 1)),
    32: ((4, 2), (4, 2), (6, 2)),
}


@dataclass
class MindConfig:
    frame_size: int = 32
    latent_dim: int = 32
    imagery_hidden: int = 128
    n_mix: int = 5
    enc_channels: tuple = (16, 32, 64, 128)
    dec_channels: tuple = (64, 32, 16)
    temperature: float = 1.0

    def __post_init__(self):
        if self.frame_size not in _ENCODER_PLAN:
            raise ValueError(f"frame_size must be one of {sorted(_ENCODER_PLAN)}")
        self.enc_channels = tuple(self.enc_channels)
        self.dec_channels = tuple(self.dec_channels)


def _conv_out(n, k, s):
    return (n - k) // s + 1


def init_vae(cfg, seed):
    rng = np.random.default_rng(seed)
    P = {}
    c_in, size = 3, cfg.frame_size
    for i, ((k, s), c_out) in enumerate(zip(_ENCODER_PLAN[cfg.frame_size], cfg.enc_channels)):
        fan_in = c_in * k * k
        P[f"enc.conv{i}.w"] = nn.uniform_init(rng, (c_out, c_in, k, k), fan_in)
        P[f"enc.conv{i}.b"] = nn.uniform_init(rng, (c_out, 1, 1), fan_in)
        c_in, size = c_out, _conv_out(size, k, s)
    flat = c_in * size * size
    nn.init_linear(rng, P, "enc.mu", flat, cfg.latent_dim)
    nn.init_linear(rng, P, "enc.logsig", flat, cfg.latent_dim)
    c0 = cfg.dec_channels[0]
    nn.init_linear(rng, P, "dec.fc", cfg.latent_dim, c0 * 4)
    chans = cfg.dec_channels + (3,)
    for i, (k, s) in enumerate(_DECODER_PLAN[cfg.frame_size]):
        fan_in = chans[i] * k * k
        P[f"dec.deconv{i}.w"] = nn.uniform_init(rng, (chans[i], chans[i + 1], k, k), fan_in)
        P[f"dec.deconv{i}.b"] = nn.uniform_init(rng, (chans[i + 1], 1, 1), fan_in)
    return P


def init_imagery(cfg, seed):
    rng = np.random.default_rng(seed)
    P = {}
    nn.init_lstm(rng, P, "img.lstm", cfg.latent_dim + N_ACTIONS, cfg.imagery_hidden)
    K, D = cfg.n_mix, cfg.latent_dim
    nn.init_linear(rng, P, "img.mdn", cfg.imagery_hidden, K + 2 * K * D)
    return P


def _as_nchw(frames, cfg):
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    s = cfg.frame_size
    if frames.shape[1:] != (s, s, 3):
        raise ValueError(f"expected frames of shape (N, {s}, {s}, 3), got {frames.shape}")
    return np.ascontiguousarray(frames.transpose(0, 3, 1, 2))


def encoder_heads(P, cfg, frames):
    """Posterior parameters (mu, log sigma) as tensors, each (N, latent_dim)."""
    x = Tensor(_as_nchw(frames, cfg))
    for i, (k, s) in enumerate(_ENCODER_PLAN[cfg.frame_size]):
        x = ops.elu(ops.add(ops.conv2d(x, P[f"enc.conv{i}.w"], stride=s), P[f"enc.conv{i}.b"]))
    x = ops.reshape(x, (x.shape[0], -1))
    return nn.linear(P, "enc.mu", x), nn.linear(P, "enc.logsig", x)


def encode(P, cfg, frames):
    """(mu, sigma) numpy arrays; a single frame gives 1-D outputs."""
    single = np.asarray(frames).ndim == 3
    mu, logsig = encoder_heads(P, cfg, frames)
    mu, sigma = mu.data, np.exp(logsig.data)
    return (mu[0], sigma[0]) if single else (mu, sigma)


def encode_mean(P, cfg, frames, batch=64):
    frames = np.asarray(frames)
    out = [encoder_heads(P, cfg, frames[i:i + batch])[0].data for i in range(0, len(frames), batch)]
    return np.concatenate(out, axis=0)


def decoder_logits(P, cfg, m):
    """Pre-sigmoid reconstruction in NCHW layout."""
    m = m if isinstance(m, Tensor) else Tensor(np.atleast_2d(m))
    if m.shape[-1] != cfg.latent_dim:
        raise ValueError(f"latent must have dimension {cfg.latent_dim}, got {m.shape[-1]}")
    x = ops.elu(nn.linear(P, "dec.fc", m))
    x = ops.reshape(x, (x.shape[0], cfg.dec_channels[0], 2, 2))
    plan = _DECODER_PLAN[cfg.frame_size]
    for i, (k, s) in enumerate(plan):
        x = ops.add(ops.conv_transpose2d(x, P[f"dec.deconv{i}.w"], stride=s), P[f"dec.deconv{i}.b"])
        if i < len(plan) - 1:
            x = ops.elu(x)
    return x


def decode(P, cfg, m):
    """Frame(s) in (0, 1), NHWC; a 1-D latent gives a single frame."""
    single = np.asarray(m.data if isinstance(m, Tensor) else m).ndim == 1
    z = decoder_logits(P, cfg, m).data
    frames = (0.5 * (np.tanh(0.5 * z) + 1.0)).transpose(0, 2, 3, 1)
    return frames[0] if single else frames


class MentalRep(NamedTuple):
    m: object
    mu: object
    sigma: object


def sample_latent(mu, sigma, rng=None, eps=None):
    """Reparameterized draw m = mu + sigma * eps; works on arrays or tensors."""
    if eps is None:
        eps = rng.standard_normal(np.shape(mu.data if isinstance(mu, Tensor) else mu))
    if isinstance(mu, Tensor) or isinstance(sigma, Tensor):
        m = ops.add(mu, ops.mul(sigma, np.asarray(eps)))
    else:
        m = np.asarray(mu) + np.asarray(sigma) * eps
    return MentalRep(m, mu, sigma)


def kl_to_prior(mu, logsig):
    """Closed-form KL(N(mu, sigma^2) || N(0, I)) per row."""
    inner = ops.sub(ops.add(ops.square(mu), ops.exp(ops.scale(logsig, 2.0))), ops.add(ops.scale(logsig, 2.0), 1.0))
    return ops.scale(ops.sum(inner, axis=-1), 0.5)


def vae_terms(P, cfg, frames, eps):
    """Per-frame (reconstruction cross-entropy, KL) tensors."""
    target = _as_nchw(frames, cfg)
    mu, logsig = encoder_heads(P, cfg, frames)
    m = ops.add(mu, ops.mul(ops.exp(logsig), eps))
    logits = decoder_logits(P, cfg, m)
    recon = ops.sum(ops.reshape(ops.bce_with_logits(logits, target), (target.shape[0], -1)), axis=1)
    return recon, kl_to_prior(mu, logsig)


def vae_loss(P, cfg, frames, beta, rng=None, eps=None):
    """Batch mean of reconstruction cross-entropy + beta * KL."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    n = 1 if np.asarray(frames).ndim == 3 else len(frames)
    if eps is None:
        eps = rng.standard_normal((n, cfg.latent_dim))
    recon, kl = vae_terms(P, cfg, frames, eps)
    return ops.mean(ops.add(recon, ops.scale(kl, beta)))


# ------------------------------------------------------------------ imagery

class MixtureParams(NamedTuple):
    logit_pi: object  # (B, K)
    mu: object  # (B, K, D)
    sigma: object  # (B, K, D)

    @property
    def weights(self):
        z = _data(self.logit_pi)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class ImageryState(NamedTuple):
    h: object
    c: object

    @classmethod
    def zeros(cls, cfg, batch=1):
        z = np.zeros((batch, cfg.imagery_hidden), dtype=np.float32)
        return cls(z, z.copy())


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def imagery_step(P, cfg, m, state, action):
    """One LSTM step on [m, one-hot(action)]; returns (mixture over next latent, new state)."""
    m = m if isinstance(m, Tensor) else Tensor(np.atleast_2d(m))
    a = nn.one_hot(np.atleast_1d(np.asarray(action, dtype=np.int64)), N_ACTIONS, dtype=m.data.dtype)
    x = ops.concat([m, a], axis=-1)
    h, c = nn.lstm(P, "img.lstm", x, state.h, state.c)
    out = nn.linear(P, "img.mdn", h)
    K, D = cfg.n_mix, cfg.latent_dim
    B = out.shape[0]
    logit_pi = out[:, :K]
    mu = ops.reshape(out[:, K:K + K * D], (B, K, D))
    sigma = ops.elu1p(ops.reshape(out[:, K + K * D:], (B, K, D)))
    return MixtureParams(logit_pi, mu, sigma), ImageryState(h, c)


def mdn_log_density(mix, target):
    """log sum_k pi_k prod_d N(target_d; mu_kd, sigma_kd), per row, via log-sum-exp."""
    t = target if isinstance(target, Tensor) else Tensor(np.atleast_2d(target))
    B, K, D = mix.mu.shape
    t3 = ops.reshape(t, (B, 1, D))
    z = ops.div(ops.sub(t3, mix.mu), mix.sigma)
    log_n = ops.sub(ops.scale(ops.square(z), -0.5), ops.add(ops.log(mix.sigma), HALF_LOG_2PI))
    comp = ops.add(ops.log_softmax(mix.logit_pi, axis=-1), ops.sum(log_n, axis=-1))
    return ops.log_sum_exp(comp, axis=-1)


def mdn_nll(mix, target):
    """Mean negative log-likelihood of target latents under the mixture."""
    return ops.neg(ops.mean(mdn_log_density(mix, target)))


def sample_imagery(mix, rng, temperature=1.0):
    """Draw latents: component from softmax(logits / tau), then N(mu_k, sigma_k * sqrt(tau))."""
    logits = _data(mix.logit_pi) / temperature
    mu, sigma = _data(mix.mu), _data(mix.sigma)
    B, K, D = mu.shape
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    out = np.empty((B, D), dtype=mu.dtype)
    for b in range(B):
        k = rng.choice(K, p=p[b])
        out[b] = mu[b, k] + sigma[b, k] * math.sqrt(temperature) * rng.standard_normal(D)
    return out


def mixture_mode(mix):
    """Mean of the most probable component (deterministic stand-in for a sample)."""
    mu = _data(mix.mu)
    k = np.argmax(_data(mix.logit_pi), axis=-1)
    return mu[np.arange(mu.shape[0]), k]


def imagine_rollout(P, cfg, m, state, actions, rng):
    """Feed each sampled next latent back in; returns [(mixture, latent)] and the final state."""
    if len(actions) == 0:
        raise ValueError("rollout needs at least one action")
    out = []
    cur = np.atleast_2d(_data(m))
    for a in actions:
        mix, state = imagery_step(P, cfg, cur, state, a)
        cur = sample_imagery(mix, rng, cfg.temperature)
        out.append((mix, cur))
    return out, state
