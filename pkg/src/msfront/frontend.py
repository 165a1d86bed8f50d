"""Single-scale and multiscale learnable convolutional front ends.

Every bank is ``conv1d -> ReLU -> max_pool`` where the conv stride times the
pool stride equals the shared frame period (20 ms by default), so the banks
can be concatenated frame by frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .audio import FeatureMap, NormStats, Waveform, apply_norm, ms_to_samples, spectrogram
from .tensor import Tensor

BANK_NAMES = ("High", "Mid", "Low", "custom")
DEFAULT_TARGET_MS = 20


class ConfigError(ValueError):
    """Invalid front-end configuration; the message names the offending field."""


def _ms(value) -> Fraction:
    return Fraction(value).limit_denominator(1000) if not isinstance(value, Fraction) else value


def pool_stride_for(conv_stride_ms, target_ms=DEFAULT_TARGET_MS) -> int:
    ratio = _ms(target_ms) / _ms(conv_stride_ms)
    if ratio.denominator != 1 or ratio < 1:
        raise ConfigError(
            f"stride_ms={float(conv_stride_ms)}: target {float(target_ms)} ms is not a whole multiple of it")
    return int(ratio)


@dataclass(frozen=True)
class ScaleConfig:
    window_ms: Fraction
    conv_stride_ms: Fraction
    n_filters: int
    name: str = "custom"
    kind: str = "conv"  # "conv" (learned filters) or "fft" (spectrogram baseline)

    def __post_init__(self):
        object.__setattr__(self, "window_ms", _ms(self.window_ms))
        object.__setattr__(self, "conv_stride_ms", _ms(self.conv_stride_ms))
        if self.name not in BANK_NAMES:
            raise ConfigError(f"name={self.name!r}: must be one of {BANK_NAMES}")
        if self.kind not in ("conv", "fft"):
            raise ConfigError(f"kind={self.kind!r}: must be 'conv' or 'fft'")
        for attr in ("window_ms", "conv_stride_ms"):
            try:
                ms_to_samples(getattr(self, attr))
            except ValueError as exc:
                raise ConfigError(f"{attr}: {exc}") from None
        if self.kind == "fft":
            expected = self.window_samples // 2 + 1
            if self.n_filters != expected:
                raise ConfigError(f"n_filters={self.n_filters}: an fft bank of this window has {expected} bins")
        elif not isinstance(self.n_filters, int) or self.n_filters < 1:
            raise ConfigError(f"n_filters={self.n_filters!r}: must be a positive integer")

    @property
    def window_samples(self) -> int:
        return ms_to_samples(self.window_ms)

    @property
    def stride_samples(self) -> int:
        return ms_to_samples(self.conv_stride_ms)


def high(n: int) -> ScaleConfig:
    return ScaleConfig(Fraction(1), Fraction(1, 4), n, "High")


def mid(n: int) -> ScaleConfig:
    return ScaleConfig(Fraction(4), Fraction(1), n, "Mid")


def low(n: int) -> ScaleConfig:
    return ScaleConfig(Fraction(40), Fraction(10), n, "Low")


def init_filters(cfg: ScaleConfig, rng: np.random.Generator) -> Tensor:
    bound = np.sqrt(1.0 / cfg.window_samples)
    taps = rng.uniform(-bound, bound, size=(cfg.window_samples, 1, cfg.n_filters))
    return Tensor(taps, requires_grad=True, name=f"{cfg.name}.filters")


def _as_column(w) -> Tensor:
    if isinstance(w, Tensor):
        return w if w.data.ndim == 2 else Tensor(w.data.reshape(-1, 1))
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    return Tensor(samples.reshape(-1, 1))


def single_scale_forward(w, cfg: ScaleConfig, filters: Optional[Tensor] = None,
                         bias: Optional[Tensor] = None, target_ms=DEFAULT_TARGET_MS) -> Tensor:
    """One bank: conv at the bank stride, ReLU, then pool up to ``target_ms`` per frame."""
    pool = pool_stride_for(cfg.conv_stride_ms, target_ms)
    x = _as_column(w)
    if cfg.kind == "fft":
        wave = Waveform(x.data.reshape(-1))
        if len(wave) < cfg.window_samples:
            raise ValueError(f"waveform of {len(wave)} samples shorter than the {cfg.window_samples}-sample window")
        feats = Tensor(spectrogram(wave, cfg.window_ms, cfg.conv_stride_ms).frames)
        pooled, _ = T.max_pool(feats, pool)
        return pooled
    if filters is None:
        raise ValueError(f"bank {cfg.name} needs filters")
    if x.shape[0] < cfg.window_samples:
        raise ValueError(f"waveform of {x.shape[0]} samples shorter than the {cfg.window_samples}-sample window")
    act = T.relu(T.conv1d(x, filters, cfg.stride_samples, bias))
    pooled, _ = T.max_pool(act, pool)
    return pooled


@dataclass
class Bottleneck:
    out_dim: int
    weight: Tensor


@dataclass
class FrontEnd:
    scales: list[ScaleConfig]
    filters: list[Optional[Tensor]]
    biases: list[Optional[Tensor]]
    target_ms: Fraction = Fraction(DEFAULT_TARGET_MS)
    bottleneck: Optional[Bottleneck] = None
    norm: NormStats = field(default_factory=lambda: NormStats(np.zeros(1), np.ones(1)))

    @classmethod
    def build(cls, scales: Sequence[ScaleConfig], target_ms=DEFAULT_TARGET_MS,
              bottleneck_dim: Optional[int] = None, seed: int = 0) -> "FrontEnd":
        if not scales:
            raise ConfigError("scales: at least one scale is required")
        target = _ms(target_ms)
        for i, s in enumerate(scales):
            try:
                pool_stride_for(s.conv_stride_ms, target)
            except ConfigError as exc:
                raise ConfigError(f"scales[{i}].{exc}") from None
        rng = np.random.default_rng(seed)
        filters, biases = [], []
        for s in scales:
            if s.kind == "fft":
                filters.append(None)
                biases.append(None)
            else:
                filters.append(init_filters(s, rng))
                biases.append(Tensor(np.zeros(s.n_filters), requires_grad=True, name=f"{s.name}.bias"))
        bottleneck = None
        if bottleneck_dim is not None:
            if bottleneck_dim < 1:
                raise ConfigError(f"bottleneck_dim={bottleneck_dim}: must be positive")
            fan_in = sum(s.n_filters for s in scales)
            bound = np.sqrt(1.0 / fan_in)
            weight = Tensor(rng.uniform(-bound, bound, size=(fan_in, bottleneck_dim)),
                            requires_grad=True, name="bottleneck.weight")
            bottleneck = Bottleneck(bottleneck_dim, weight)
        return cls(list(scales), filters, biases, target, bottleneck)

    @property
    def n_features(self) -> int:
        if self.bottleneck is not None:
            return self.bottleneck.out_dim
        return sum(s.n_filters for s in self.scales)

    @property
    def min_samples(self) -> int:
        return max(s.window_samples for s in self.scales)

    def parameters(self) -> list[Tensor]:
        params = [p for pair in zip(self.filters, self.biases) for p in pair if p is not None]
        if self.bottleneck is not None:
            params.append(self.bottleneck.weight)
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, s in enumerate(self.scales):
            if self.filters[i] is not None:
                named[f"frontend.{i}.{s.name}.filters"] = self.filters[i]
                named[f"frontend.{i}.{s.name}.bias"] = self.biases[i]
        if self.bottleneck is not None:
            named["frontend.bottleneck.weight"] = self.bottleneck.weight
        return named

    def normalize(self, w: Waveform) -> Waveform:
        return apply_norm(w, self.norm)

    def forward(self, w) -> Tensor:
        return multiscale_forward(w, self)

    def extract(self, w: Waveform, normalize: bool = True) -> FeatureMap:
        if normalize:
            w = self.normalize(w)
        out = self.forward(w)
        return FeatureMap(out.data, self.target_ms)

    def to_config(self) -> dict:
        cfg = {
            "target_ms": float(self.target_ms),
            "scales": [
                {"name": s.name, "window_ms": float(s.window_ms), "stride_ms": float(s.conv_stride_ms),
                 "n_filters": s.n_filters, **({"kind": "fft"} if s.kind == "fft" else {})}
                for s in self.scales
            ],
        }
        if self.bottleneck is not None:
            cfg["bottleneck_dim"] = self.bottleneck.out_dim
        return cfg


def multiscale_forward(w, fe: FrontEnd) -> Tensor:
    """Run every bank, truncate to the shortest, concatenate features, then bottleneck."""
    outs = [single_scale_forward(w, s, f, b, fe.target_ms)
            for s, f, b in zip(fe.scales, fe.filters, fe.biases)]
    n = min(o.shape[0] for o in outs)
    outs = [o if o.shape[0] == n else T.slice_rows(o, 0, n) for o in outs]
    feats = outs[0] if len(outs) == 1 else T.concat(outs, axis=1)
    if fe.bottleneck is not None:
        feats = T.linear(feats, fe.bottleneck.weight)
    return feats


def frames_for(n_samples: int, fe: FrontEnd) -> int:
    """Output frame count of ``fe`` on an input of ``n_samples`` (no forward pass)."""
    counts = []
    for s in fe.scales:
        conv = T.conv_output_length(n_samples, s.window_samples, s.stride_samples)
        counts.append(conv // pool_stride_for(s.conv_stride_ms, fe.target_ms))
    return min(counts)


# --- config files ----------------------------------------------------------

def frontend_from_config(cfg: dict, seed: int = 0) -> FrontEnd:
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    target = cfg.get("target_ms", DEFAULT_TARGET_MS)
    if not isinstance(target, (int, float)) or target <= 0:
        raise ConfigError(f"target_ms={target!r}: must be a positive number")
    raw_scales = cfg.get("scales")
    if not isinstance(raw_scales, list) or not raw_scales:
        raise ConfigError("scales: must be a non-empty list")
    scales = []
    for i, rs in enumerate(raw_scales):
        if not isinstance(rs, dict):
            raise ConfigError(f"scales[{i}]: expected an object")
        for key in ("window_ms", "stride_ms", "n_filters"):
            if key not in rs:
                raise ConfigError(f"scales[{i}].{key}: missing")
        try:
            scales.append(ScaleConfig(rs["window_ms"], rs["stride_ms"], rs["n_filters"],
                                      rs.get("name", "custom"), rs.get("kind", "conv")))
        except ConfigError as exc:
            raise ConfigError(f"scales[{i}].{exc}") from None
    bdim = cfg.get("bottleneck_dim")
    if bdim is not None and (not isinstance(bdim, int) or bdim < 1):
        raise ConfigError(f"bottleneck_dim={bdim!r}: must be a positive integer")
    return FrontEnd.build(scales, target, bdim, seed)


def load_frontend_config(path: Union[str, Path], seed: int = 0) -> FrontEnd:
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return frontend_from_config(cfg, seed)


# --- presets ---------------------------------------------------------------

def _wav_row(stride_ms) -> dict:
    return {"target_ms": 20, "scales": [
        {"name": "custom", "window_ms": 20, "stride_ms": stride_ms, "n_filters": 161}]}


def _multi(h: int, m: int, lo: int, bottleneck: Optional[int] = None) -> dict:
    scales = []
    for name, window, stride, n in (("High", 1, 0.25, h), ("Mid", 4, 1, m), ("Low", 40, 10, lo)):
        if n:
            scales.append({"name": name, "window_ms": window, "stride_ms": stride, "n_filters": n})
    cfg = {"target_ms": 20, "scales": scales}
    if bottleneck is not None:
        cfg["bottleneck_dim"] = bottleneck
    return cfg


PRESETS: dict[str, dict] = {
    "fft-baseline": {"target_ms": 20, "scales": [
        {"name": "custom", "kind": "fft", "window_ms": 20, "stride_ms": 10, "n_filters": 161}]},
    "table2-10ms": _wav_row(10),
    "table2-5ms": _wav_row(5),
    "table2-2ms": _wav_row(2),
    "table2-1ms": _wav_row(1),
    "table2-0.5ms": _wav_row(0.5),
    "table3-high": _multi(161, 0, 0),
    "table3-mid": _multi(0, 161, 0),
    "table3-low": _multi(0, 0, 161),
    "table3-multiscale": _multi(61, 50, 50),
    "table4-161-161-161": _multi(161, 161, 161, 161),
    "table4-160-320-640": _multi(160, 320, 640, 161),
    "table4-160-320-640-b800": _multi(160, 320, 640, 800),
}


def builtin_configs() -> dict[str, dict]:
    """Named front-end configs covering every row of the stride and multiscale experiments."""
    return {k: json.loads(json.dumps(v)) for k, v in PRESETS.items()}


def preset(name: str, seed: int = 0) -> FrontEnd:
    if name not in PRESETS:
        raise ConfigError(f"preset {name!r} unknown; valid presets: {', '.join(PRESETS)}")
    return frontend_from_config(PRESETS[name], seed)


def scaled_multiscale(n_per_bank: int = 8, seed: int = 0) -> FrontEnd:
    """The High/Mid/Low multiscale layout with ``n_per_bank`` filters in each bank."""
    return frontend_from_config(_multi(n_per_bank, n_per_bank, n_per_bank), seed)
