"""Training-loop pieces shared by the remote client and the in-process baselines."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import losses, segnet
from .errors import ConfigError, TrainingDiverged
from .nn import ParamSet
from .synthdata import Sample

EVAL_CHUNK = 16


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    decay_factor: float = 0.5
    decay_interval: int = 500
    eval_interval: int = 250
    seed: int = 0

    def __post_init__(self):
        for name in ("iterations", "batch_size", "decay_interval", "eval_interval"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"lr must be positive and finite, got {self.lr!r}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor!r}")

    def lr_at(self, it: int) -> float:
        """Step-decayed learning rate for 0-based iteration ``it``."""
        return self.lr * self.decay_factor ** (it // self.decay_interval)

    def eval_due(self, it: int) -> bool:
        done = it + 1
        return done % self.eval_interval == 0 or done == self.iterations


def batch_schedule(n: int, batch_size: int, iterations: int, seed: int) -> Iterator[np.ndarray]:
    """Index batches from consecutive seeded permutations (epochs run together)."""
    if n <= 0:
        raise ConfigError("cannot train on an empty split")
    rng = np.random.default_rng(seed)
    buf = np.empty(0, dtype=np.int64)
    for _ in range(iterations):
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


@dataclass
class TrainTrace:
    """Loss per iteration and metrics per evaluation."""

    losses: list[tuple[int, float]] = field(default_factory=list)
    evals: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint: Path | None = None

    def record_loss(self, it: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        if self.losses and it <= self.losses[-1][0]:
            raise ValueError(f"iteration {it} is not after {self.losses[-1][0]}")
        self.losses.append((it, float(loss)))

    def record_eval(self, it: int, report: losses.MetricReport) -> None:
        self.evals.append((it, report.miou, report.dice))

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1]

    def write_csv(self, stem) -> tuple[Path, Path]:
        """Writes ``<stem>_loss.csv`` and ``<stem>_eval.csv``."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        loss_path = stem.with_name(stem.name + "_loss.csv")
        eval_path = stem.with_name(stem.name + "_eval.csv")
        with open(loss_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss"])
            w.writerows((i, repr(l)) for i, l in self.losses)
        with open(eval_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "miou", "dice"])
            w.writerows((i, repr(m), repr(d)) for i, m, d in self.evals)
        return loss_path, eval_path


def predict(encoder: ParamSet, decode: Callable[[np.ndarray], np.ndarray], images: np.ndarray) -> np.ndarray:
    """Probability maps, running the encoder in fixed-size chunks.

    ``decode`` maps a latent batch to probabilities. Local and remote
    evaluation share this chunking so their outputs agree bit for bit.
    """
    out = []
    for start in range(0, len(images), EVAL_CHUNK):
        latents, _ = segnet.encoder_forward(encoder, images[start:start + EVAL_CHUNK])
        out.append(decode(latents))
    return np.concatenate(out)


def local_decode(decoder: ParamSet) -> Callable[[np.ndarray], np.ndarray]:
    def decode(latents):
        logits, _ = segnet.decoder_forward(decoder, latents)
        return losses.sigmoid(logits)
    return decode


def evaluate_local(encoder: ParamSet, decoder: ParamSet, samples: Sequence[Sample]) -> losses.MetricReport:
    if not samples:
        raise ConfigError("no samples to evaluate")
    images, masks = stack(samples)
    return losses.score(list(predict(encoder, local_decode(decoder), images)), list(masks))
