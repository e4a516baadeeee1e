"""nn.Module wrappers whose forward passes call only ``mfm.tensor`` primitives."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import tensor as T


def _kaiming_uniform(weight, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)


class Linear(nn.Module):
    def __init__(self, d_in, d_out, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.empty(d_out)) if bias else None
        _kaiming_uniform(self.weight, d_in)
        if self.bias is not None:
            _kaiming_uniform(self.bias, d_in)

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel, stride=1, padding=0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(c_out))
        fan_in = c_in * kernel * kernel
        _kaiming_uniform(self.weight, fan_in / 6.0)
        _kaiming_uniform(self.bias, fan_in)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose2d(nn.Module):
    """Stride-2 layers use kernel 3, padding 1, output padding 1: exact doubling."""

    def __init__(self, c_in, c_out, stride=2):
        super().__init__()
        self.stride = stride
        self.padding = 1
        self.output_padding = 1 if stride == 2 else 0
        self.weight = nn.Parameter(torch.empty(c_in, c_out, 3, 3))
        self.bias = nn.Parameter(torch.empty(c_out))
        fan_in = c_out * 9
        _kaiming_uniform(self.weight, fan_in / 6.0)
        _kaiming_uniform(self.bias, fan_in)

    def out_size(self, size):
        return T.transposed_conv2d_out_size(size, 3, self.stride, self.padding, self.output_padding)

    def forward(self, x):
        return T.transposed_conv2d(x, self.weight, self.bias, stride=self.stride,
                                   padding=self.padding, output_padding=self.output_padding)


class LayerNorm(nn.Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class ChannelLayerNorm(LayerNorm):
    """LayerNorm over the channel axis of an N×C×H×W map."""

    def forward(self, x):
        y = T.layer_norm(x.permute(0, 2, 3, 1), self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)
