"""Recurrent CTC acoustic model that sits on top of a front end.

Layer stack (every row is a batch of utterances concatenated along time):

    batch_norm -> conv1d(window 11) -> ReLU -> batch_norm
    -> n x (bidirectional ReLU RNN -> batch_norm) -> fully connected logits
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .ctc import BLANK
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class ModelConfig:
    alphabet: str
    hidden_size: int = 96
    n_rnn_layers: int = 3
    conv_window: int = 11
    conv_stride: int = 1

    def __post_init__(self):
        if self.conv_window < 1 or self.conv_window % 2 == 0:
            raise ValueError(f"conv_window must be odd, got {self.conv_window}")
        if self.conv_stride < 1:
            raise ValueError(f"conv_stride must be >= 1, got {self.conv_stride}")
        if self.hidden_size < 1 or self.n_rnn_layers < 0:
            raise ValueError("hidden_size must be positive and n_rnn_layers non-negative")
        if len(set(self.alphabet)) != len(self.alphabet) or not self.alphabet:
            raise ValueError(f"alphabet must be non-empty without duplicates, got {self.alphabet!r}")

    @property
    def n_classes(self) -> int:
        return len(self.alphabet) + 1  # blank at index 0

    def output_frames(self, n_frames: int) -> int:
        return T.conv_output_length(n_frames, self.conv_window, self.conv_stride)


def _uniform(rng, fan_in: int, shape, name: str) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class BatchNorm:
    def __init__(self, dim: int, name: str):
        self.gamma = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.name = name

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if not training:
            return T.batch_norm_inference(x, self.gamma, self.beta,
                                          self.running_mean, self.running_var, BN_EPS)
        self.running_mean = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * x.data.mean(axis=0)
        self.running_var = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * x.data.var(axis=0)
        return T.batch_norm(x, self.gamma, self.beta, BN_EPS)

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}


class Model:
    def __init__(self, mc: ModelConfig, input_features: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        H, F, K = mc.hidden_size, input_features, mc.conv_window
        self.config = mc
        self.input_features = F
        self.bn_in = BatchNorm(F, "bn_in")
        self.conv_w = _uniform(rng, K * F, (K, F, H), "conv.weight")
        self.conv_b = Tensor(np.zeros(H), requires_grad=True, name="conv.bias")
        self.bn_conv = BatchNorm(H, "bn_conv")
        self.rnns: list[list[Tensor]] = []
        self.bn_rnn: list[BatchNorm] = []
        width = H
        for layer in range(mc.n_rnn_layers):
            params = []
            for direction in ("fwd", "bwd"):
                prefix = f"rnn{layer}.{direction}"
                params += [_uniform(rng, width, (width, H), f"{prefix}.w"),
                           _uniform(rng, H, (H, H), f"{prefix}.u"),
                           Tensor(np.zeros(H), requires_grad=True, name=f"{prefix}.b")]
            self.rnns.append(params)
            self.bn_rnn.append(BatchNorm(2 * H, f"bn_rnn{layer}"))
            width = 2 * H
        self.fc_w = _uniform(rng, width, (width, mc.n_classes), "fc.weight")
        self.fc_b = Tensor(np.zeros(mc.n_classes), requires_grad=True, name="fc.bias")

    def named_parameters(self) -> dict[str, Tensor]:
        named = dict(self.bn_in.parameters())
        named["conv.weight"] = self.conv_w
        named["conv.bias"] = self.conv_b
        named.update(self.bn_conv.parameters())
        for params, bn in zip(self.rnns, self.bn_rnn):
            named.update({p.name: p for p in params})
            named.update(bn.parameters())
        named["fc.weight"] = self.fc_w
        named["fc.bias"] = self.fc_b
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def batch_norms(self) -> list[BatchNorm]:
        return [self.bn_in, self.bn_conv, *self.bn_rnn]

    def n_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def forward(self, feats: Sequence[Tensor], training: bool = True) -> list[Tensor]:
        """Map per-utterance feature tensors ``[T_i, F]`` to logits ``[T_i - K + 1, classes]``."""
        x = self.bn_in(_stack(feats), training)
        parts = T.split_rows(x, [f.shape[0] for f in feats]) if len(feats) > 1 else [x]
        parts = [T.relu(T.conv1d(p, self.conv_w, self.config.conv_stride, self.conv_b)) for p in parts]
        sizes = [p.shape[0] for p in parts]
        x = self.bn_conv(_stack(parts), training)
        for params, bn in zip(self.rnns, self.bn_rnn):
            parts = _split(x, sizes)
            x = bn(_stack([T.bidirectional_rnn(p, params) for p in parts]), training)
        return _split(T.linear(x, self.fc_w, self.fc_b), sizes)


def _stack(parts: Sequence[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=0)


def _split(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    return [x] if len(sizes) == 1 else T.split_rows(x, sizes)


def build_model(mc: ModelConfig, input_features: int, seed: int = 0) -> Model:
    return Model(mc, input_features, seed)


def expected_parameter_count(mc: ModelConfig, input_features: int) -> int:
    """Closed-form parameter count of :class:`Model`."""
    H, F, K, V = mc.hidden_size, input_features, mc.conv_window, mc.n_classes
    total = 2 * F + (K * F * H + H) + 2 * H
    width = H
    for _ in range(mc.n_rnn_layers):
        total += 2 * (width * H + H * H + H) + 2 * (2 * H)
        width = 2 * H
    return total + width * V + V


__all__ = ["BLANK", "BatchNorm", "Model", "ModelConfig", "build_model", "expected_parameter_count"]
