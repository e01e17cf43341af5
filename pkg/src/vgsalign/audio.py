"""Speech embedder: Conv1d -> stacked Bi-GRU -> attention pooling -> unit norm."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

from . import core
from .dsp import MfccSequence, within_length_limit

N_MFCC = 40


@dataclass(frozen=True)
class AudioEmbedderConfig:
    N: int = 1024
    G: int = 2
    conv_kernels: int = 64
    conv_len: int = 6
    conv_stride: int = 2
    attention_inner: int = 128
    n_mfcc: int = N_MFCC

    def __post_init__(self):
        if self.N % 2:
            raise ValueError("latent dimension N must be even")
        if self.G < 1:
            raise ValueError("need at least one Bi-GRU layer")
        if self.conv_stride < 1:
            raise ValueError("conv_stride must be >= 1")

    @property
    def hidden(self) -> int:
        return self.N // 2


def audio_param_count(config: AudioEmbedderConfig) -> int:
    """Closed-form trainable-scalar count; must agree with ``AudioEmbedder``."""
    conv = config.n_mfcc * config.conv_kernels * config.conv_len + config.conv_kernels
    h = config.hidden
    gru = 0
    d_in = config.conv_kernels
    for _ in range(config.G):
        gru += 2 * 3 * (d_in * h + h * h + 2 * h)
        d_in = config.N
    a = config.attention_inner
    attention = a * config.N + a + config.N * a + config.N
    return conv + gru + attention


def attention_pool(H: Tensor, W: Tensor, b_w: Tensor, V: Tensor, b_v: Tensor, mask: Tensor | None = None) -> Tensor:
    """Pool ``(B, T, N)`` states into ``(B, N)``.

    Scores ``V tanh(W h_t + b_w) + b_v`` are N-vectors; the softmax runs over
    time separately for each latent dimension and the weights multiply the
    states elementwise.
    """
    if H.shape[-2] == 0:
        raise core.ShapeError("empty sequence")
    scores = core.linear(core.tanh_op(core.linear(H, W, b_w)), V, b_v)
    m = None if mask is None else mask.unsqueeze(-1).expand_as(scores)
    alpha = core.softmax(scores, axis=-2, mask=m)
    return (alpha * H).sum(dim=-2)


class BiGRU(nn.Module):
    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.d_in = d_in
        self.hidden = hidden
        for suffix in ("fwd", "bwd"):
            self.register_parameter(f"weight_ih_{suffix}", nn.Parameter(torch.empty(3 * hidden, d_in)))
            self.register_parameter(f"weight_hh_{suffix}", nn.Parameter(torch.empty(3 * hidden, hidden)))
            self.register_parameter(f"bias_ih_{suffix}", nn.Parameter(torch.empty(3 * hidden)))
            self.register_parameter(f"bias_hh_{suffix}", nn.Parameter(torch.empty(3 * hidden)))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        bound = 1.0 / math.sqrt(self.hidden)
        for p in self.parameters():
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=generator)

    def forward(self, x: Tensor, mask: Tensor | None = None) -> Tensor:
        return core.bigru_layer(x, dict(self.named_parameters()), mask)


class AudioEmbedder(nn.Module):
    def __init__(self, config: AudioEmbedderConfig, seed: int | None = None):
        super().__init__()
        self.config = config
        c = config
        self.conv_weight = nn.Parameter(torch.empty(c.conv_kernels, c.n_mfcc, c.conv_len))
        self.conv_bias = nn.Parameter(torch.empty(c.conv_kernels))
        self.grus = nn.ModuleList(
            BiGRU(c.conv_kernels if i == 0 else c.N, c.hidden) for i in range(c.G)
        )
        self.att_W = nn.Parameter(torch.empty(c.attention_inner, c.N))
        self.att_b_w = nn.Parameter(torch.empty(c.attention_inner))
        self.att_V = nn.Parameter(torch.empty(c.N, c.attention_inner))
        self.att_b_v = nn.Parameter(torch.empty(c.N))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = None) -> None:
        gen = None
        if seed is not None:
            gen = torch.Generator().manual_seed(seed)
        c = self.config
        with torch.no_grad():
            fan_in = c.n_mfcc * c.conv_len
            bound = math.sqrt(6.0 / fan_in)
            self.conv_weight.uniform_(-bound, bound, generator=gen)
            self.conv_bias.uniform_(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), generator=gen)
            for gru in self.grus:
                gru.reset_parameters(gen)
            for w in (self.att_W, self.att_V):
                b = math.sqrt(3.0 / w.shape[1])
                w.uniform_(-b, b, generator=gen)
            self.att_b_w.zero_()
            self.att_b_v.zero_()

    def output_lengths(self, lengths: Tensor) -> Tensor:
        c = self.config
        return (lengths - c.conv_len) // c.conv_stride + 1

    def forward(self, mfcc: Tensor, lengths: Tensor | None = None) -> Tensor:
        """Embed a padded batch ``(B, T, 40)``; ``lengths`` gives valid frames per row."""
        c = self.config
        if lengths is not None and int(lengths.min()) < c.conv_len:
            raise core.ShapeError("sequence shorter than kernel")
        x = core.conv1d(mfcc, self.conv_weight, self.conv_bias, stride=c.conv_stride)
        mask = None
        if lengths is not None:
            out_len = self.output_lengths(lengths)
            mask = torch.arange(x.shape[1]).unsqueeze(0) < out_len.unsqueeze(1)
        for gru in self.grus:
            x = gru(x, mask)
        pooled = attention_pool(x, self.att_W, self.att_b_w, self.att_V, self.att_b_v, mask)
        return core.l2_normalize(pooled)


def embed_audio(seq: MfccSequence, model: AudioEmbedder) -> np.ndarray:
    """Embed a single MFCC sequence at full length; returns a unit N-vector."""
    if not within_length_limit(seq):
        raise ValueError(f"sequence of {seq.n_frames} frames exceeds the length limit")
    if seq.n_frames < model.config.conv_len:
        raise ValueError("sequence shorter than kernel")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(seq.frames), dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        return model(x)[0].numpy()
