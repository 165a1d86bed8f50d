"""SGD with Nesterov momentum, SortaGrad ordering, noise augmentation and evaluation."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .audio import Corpus, NormStats, Waveform, fit_norm_stats, mix_noise, sortagrad_order, white_noise
from .checkpoint import load_checkpoint, save_checkpoint
from .ctc import ctc_loss, edit_distance, encode, greedy_decode
from .frontend import FrontEnd, frontend_from_config
from .model import Model, ModelConfig
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "loss", "lr", "wall_ms"]


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 3e-4
    momentum: float = 0.99
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    noise_fraction: float = 0.4
    snr_range_db: tuple[float, float] = (0.0, 15.0)
    clip_norm: float = 5.0

    def __post_init__(self):
        self.snr_range_db = tuple(self.snr_range_db)
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        if not 0 <= self.noise_fraction <= 1:
            raise ValueError(f"noise_fraction must be in [0, 1], got {self.noise_fraction}")


class NesterovSGD:
    """``v <- mu*v - lr*g(theta + mu*v)``, ``theta <- theta + v``.

    Parameters hold the look-ahead point ``theta + mu*v`` between
    :meth:`lookahead` and :meth:`step`, and ``theta`` otherwise.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float, clip_norm: Optional[float] = 5.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.theta = {k: p.data.copy() for k, p in params.items()}
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lookahead(self) -> None:
        for k, p in self.params.items():
            p.data = self.theta[k] + self.momentum * self.velocity[k]
            p.grad = None

    def step(self) -> float:
        """Apply the update from the gradients at the look-ahead point; returns the pre-clip norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
        for k, p in self.params.items():
            self.velocity[k] = self.momentum * self.velocity[k] - self.lr * factor * grads[k]
            self.theta[k] = self.theta[k] + self.velocity[k]
            p.data = self.theta[k].copy()
            p.grad = None
        return norm


@dataclass
class TrainState:
    frontend: FrontEnd
    model: Model
    optimizer: NesterovSGD
    config: TrainConfig
    epoch: int = 0  # completed epochs
    step: int = 0
    history: list[float] = field(default_factory=list)

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.frontend.named_parameters(), **self.model.named_parameters()}


def setup(frontend: FrontEnd, mc: ModelConfig, corpus: Corpus, tc: TrainConfig) -> TrainState:
    if len(corpus) == 0:
        raise ValueError("training corpus is empty")
    frontend.norm = fit_norm_stats([u.waveform for u in corpus])
    model = Model(mc, frontend.n_features, seed=tc.seed + 1)
    params = {**frontend.named_parameters(), **model.named_parameters()}
    opt = NesterovSGD(params, tc.lr, tc.momentum, tc.clip_norm)
    return TrainState(frontend, model, opt, tc)


def epoch_order(corpus: Corpus, epoch: int, seed: int) -> list[int]:
    """SortaGrad for the first epoch (index 0), a seeded shuffle afterwards."""
    if epoch == 0:
        return sortagrad_order(corpus)
    return [int(i) for i in np.random.default_rng([seed, epoch, 0]).permutation(len(corpus))]


def augmentation_plan(n_utts: int, epoch: int, tc: TrainConfig) -> dict[int, float]:
    """Map utterance index -> SNR (dB) for the utterances that get noise this epoch."""
    n_noisy = int(round(tc.noise_fraction * n_utts))
    if n_noisy == 0:
        return {}
    rng = np.random.default_rng([tc.seed, epoch, 1])
    chosen = rng.choice(n_utts, size=n_noisy, replace=False)
    snrs = rng.uniform(tc.snr_range_db[0], tc.snr_range_db[1], size=n_noisy)
    return {int(i): float(s) for i, s in zip(chosen, snrs)}


def augment(w: Waveform, utt_index: int, epoch: int, snr_db: float, seed: int) -> Waveform:
    rng = np.random.default_rng([seed, epoch, 2, utt_index])
    noise = white_noise(len(w) + 1600, int(rng.integers(2**31)))
    return mix_noise(w, noise, snr_db, rng)


def batch_loss(state: TrainState, waves: list[Waveform], labels: list[list[int]], training: bool = True) -> Tensor:
    feats = [state.frontend.forward(state.frontend.normalize(w)) for w in waves]
    logits = state.model.forward(feats, training=training)
    total = None
    for lg, lab in zip(logits, labels):
        loss = ctc_loss(lg, lab)
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(labels))


def run_epoch(state: TrainState, corpus: Corpus, log_rows: Optional[list] = None) -> float:
    tc = state.config
    epoch = state.epoch
    order = epoch_order(corpus, epoch, tc.seed)
    noisy = augmentation_plan(len(corpus), epoch, tc)
    losses = []
    for start in range(0, len(order), tc.batch_size):
        idx = order[start:start + tc.batch_size]
        t0 = time.perf_counter()
        waves, labels = [], []
        for i in idx:
            u = corpus[i]
            w = u.waveform
            if i in noisy:
                w = augment(w, i, epoch, noisy[i], tc.seed)
            waves.append(w)
            labels.append(encode(u.transcript, state.model.config.alphabet))
        state.optimizer.lookahead()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss = batch_loss(state, waves, labels)
                value = loss.item()
                if not np.isfinite(value):
                    raise NonFiniteError("loss is not finite")
                loss.backward()
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged at epoch {epoch + 1}, step {state.step + 1}: {exc}") from exc
        state.optimizer.step()
        state.step += 1
        losses.append(value)
        if log_rows is not None:
            log_rows.append([epoch + 1, state.step, repr(value), repr(tc.lr),
                             f"{1000 * (time.perf_counter() - t0):.1f}"])
    mean_loss = float(np.mean(losses))
    state.history.append(mean_loss)
    state.epoch += 1
    log.info("epoch %d mean loss %.6f", state.epoch, mean_loss)
    return mean_loss


# --- checkpoints -----------------------------------------------------------

def state_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays = {}
    for k in state.optimizer.params:
        arrays[k] = state.optimizer.theta[k]
    for k in state.optimizer.params:
        arrays[f"optim.velocity.{k}"] = state.optimizer.velocity[k]
    for bn in state.model.batch_norms():
        arrays.update(bn.buffers())
    arrays["norm.mean"] = state.frontend.norm.mean
    arrays["norm.std"] = state.frontend.norm.std
    return arrays


def state_metadata(state: TrainState) -> dict:
    mc = state.model.config
    return {
        "format": "msfront-checkpoint",
        "epoch": state.epoch,
        "step": state.step,
        "history": state.history,
        "frontend": state.frontend.to_config(),
        "model": {"alphabet": mc.alphabet, "hidden_size": mc.hidden_size, "n_rnn_layers": mc.n_rnn_layers,
                  "conv_window": mc.conv_window, "conv_stride": mc.conv_stride},
        "train": {**asdict(state.config), "snr_range_db": list(state.config.snr_range_db)},
    }


def save_state(state: TrainState, path: Union[str, Path]) -> None:
    save_checkpoint(path, state_arrays(state), state_metadata(state))


def restore_state(path: Union[str, Path], train_config: Optional[TrainConfig] = None) -> TrainState:
    arrays, meta = load_checkpoint(path)
    tc = train_config or TrainConfig(**meta["train"])
    frontend = frontend_from_config(meta["frontend"], seed=tc.seed)
    frontend.norm = NormStats(arrays["norm.mean"], arrays["norm.std"])
    model = Model(ModelConfig(**meta["model"]), frontend.n_features, seed=tc.seed + 1)
    params = {**frontend.named_parameters(), **model.named_parameters()}
    missing = [k for k in params if k not in arrays]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks parameters {missing[:3]}")
    for k, p in params.items():
        if arrays[k].shape != p.data.shape:
            raise ValueError(f"{path}: {k} has shape {arrays[k].shape}, model expects {p.data.shape}")
        p.data = arrays[k].copy()
    for bn in model.batch_norms():
        bn.running_mean = arrays[f"{bn.name}.running_mean"].copy()
        bn.running_var = arrays[f"{bn.name}.running_var"].copy()
    opt = NesterovSGD(params, tc.lr, tc.momentum, tc.clip_norm)
    for k in params:
        opt.velocity[k] = arrays.get(f"optim.velocity.{k}", np.zeros_like(params[k].data)).copy()
    return TrainState(frontend, model, opt, tc, meta["epoch"], meta["step"], list(meta.get("history", [])))


def checkpoint_path(out_dir: Union[str, Path], epoch: int) -> Path:
    return Path(out_dir) / f"ckpt_epoch{epoch:03d}.bin"


def latest_checkpoint(out_dir: Union[str, Path]) -> Optional[Path]:
    found = sorted(Path(out_dir).glob("ckpt_epoch*.bin"))
    return found[-1] if found else None


def train(state: TrainState, corpus: Corpus, out_dir: Optional[Union[str, Path]] = None,
          epochs: Optional[int] = None) -> TrainState:
    """Train until ``epochs`` (default ``config.epochs``) epochs are complete.

    With ``out_dir``, a checkpoint is written after every epoch and step
    losses are appended to ``train_log.csv``.
    """
    target = state.config.epochs if epochs is None else epochs
    log_path = None
    if out_dir is not None:
        log_path = Path(out_dir) / "train_log.csv"
        if not log_path.exists():
            with open(log_path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOG_HEADER)
    while state.epoch < target:
        rows: list = []
        run_epoch(state, corpus, rows)
        if out_dir is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerows(rows)
            save_state(state, checkpoint_path(out_dir, state.epoch))
    return state


# --- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    cer: float
    wer: float
    n_utts: int
    hypotheses: dict[str, str]


def transcribe(state: TrainState, w: Waveform) -> str:
    feats = state.frontend.forward(state.frontend.normalize(w))
    (logits,) = state.model.forward([feats], training=False)
    return greedy_decode(logits, state.model.config.alphabet)


def evaluate(state: TrainState, corpus: Corpus) -> EvalReport:
    """Corpus-level CER and WER: total edits over total reference characters (words)."""
    if set(corpus.alphabet) - set(state.model.config.alphabet):
        raise ValueError(f"corpus alphabet {corpus.alphabet!r} does not match model alphabet "
                         f"{state.model.config.alphabet!r}")
    hyps, char_edits, chars, word_edits, words = {}, 0, 0, 0, 0
    for u in corpus:
        hyp = transcribe(state, u.waveform)
        hyps[u.id] = hyp
        char_edits += edit_distance(u.transcript, hyp)
        chars += len(u.transcript)
        word_edits += edit_distance(u.transcript.split(), hyp.split())
        words += len(u.transcript.split())
    return EvalReport(char_edits / chars, word_edits / words, len(corpus), hyps)
