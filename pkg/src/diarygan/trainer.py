"""Adversarial training loop, sampling and checkpoints.

Training is indexed by discriminator step. Each step draws the next real
minibatch from the current epoch's permutation, scores it against an equally
sized generated batch and applies a (possibly private) discriminator update.
After every ``d_steps`` discriminator steps the generator takes one RMSProp
step on the non-saturating objective (standard loss) or on ``-critic``
(wasserstein loss).

All randomness comes from three named streams derived from the seed (data
order, latent draws, privacy noise). Their states, the current permutation and
the optimizer state are stored in checkpoints, so a resumed run continues
exactly where the interrupted one stopped.
"""
from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from . import numcore as nc
from .data import Codec, Dataset, EncodedAgent, RawRecord, decode
from .dpsgd import (DiscriminatorBatch, DpSgdState, PrivacyConfig, RmspropState,
                    dp_discriminator_step, rmsprop_step)
from .errors import IntegrityError, ParameterError, TrainingDivergedError
from .nets import (DiscriminatorParams, GeneratorParams, NetConfig, discriminator_layout,
                   discriminator_logits, generator_forward, generator_layout, init_params)

CHECKPOINT_MAGIC = b"DPCT"
CHECKPOINT_VERSION = 1
LOSSES = ("standard", "wasserstein")
HISTORY_COLUMNS = ("step", "d_loss", "g_loss", "preclip_mean", "preclip_max", "millis")

_STREAMS = {"init": 0, "data": 1, "latent": 2, "noise": 3}


def stream_seed(seed: int, stream: str) -> int:
    """Independent 64-bit seed for a named stream of a run."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), _STREAMS[stream]])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    d_steps: int = 1
    loss: str = "standard"
    weight_clip: float = 0.01
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    lr_d: float = 5e-4
    lr_g: float = 5e-4
    rho: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.d_steps < 1:
            raise ParameterError(f"discriminator steps per generator step must be >= 1, got {self.d_steps}")
        if self.loss not in LOSSES:
            raise ParameterError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not self.weight_clip > 0:
            raise ParameterError("weight_clip must be > 0")
        if not (self.lr_d > 0 and self.lr_g > 0):
            raise ParameterError("learning rates must be > 0")
        if not 0 <= self.rho < 1:
            raise ParameterError("rho must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["privacy"] = PrivacyConfig(**d["privacy"])
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    d_loss: float
    g_loss: float | None
    preclip_mean: float | None
    preclip_max: float | None
    millis: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ParameterError("history steps must increase")
        self.records.append(rec)

    def extend(self, other: "TrainHistory"):
        for r in other.records:
            self.append(r)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [getattr(r, name) for r in self.records]


@dataclass
class Checkpoint:
    net_config: NetConfig
    codec: Codec
    generator: GeneratorParams
    discriminator: DiscriminatorParams
    rmsprop: RmspropState
    rng_states: dict
    train_config: TrainConfig
    step: int
    permutation: np.ndarray
    data_fingerprint: str
    version: int = CHECKPOINT_VERSION


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for a in (dataset.tabular, dataset.sequences, dataset.seq_lens):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _finite(tensors: dict) -> bool:
    return all(np.isfinite(v).all() for v in tensors.values())


class Trainer:
    """Resumable training state for one (dataset, config) pair."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, net_config: NetConfig | None = None,
                 checkpoint: Checkpoint | None = None):
        if len(dataset) == 0:
            raise ParameterError("cannot train on an empty dataset")
        self.dataset = dataset
        self.cfg = cfg
        self.fingerprint = dataset_fingerprint(dataset)
        if checkpoint is not None:
            self._restore(checkpoint)
            return
        self.net_config = net_config or NetConfig.from_codec(dataset.codec)
        if self.net_config.tabular_width != dataset.codec.width:
            raise ParameterError("network tabular width does not match the dataset codec")
        if self.net_config.max_len != dataset.codec.max_len:
            raise ParameterError("network sequence length does not match the dataset codec")
        self.g, self.d = init_params(self.net_config, nc.SeededRng(stream_seed(cfg.seed, "init")))
        self.rmsprop = RmspropState(cfg.lr_g, cfg.rho)
        self.data_rng = nc.SeededRng(stream_seed(cfg.seed, "data"))
        self.latent_rng = nc.SeededRng(stream_seed(cfg.seed, "latent"))
        self.noise_rng = nc.SeededRng(stream_seed(cfg.seed, "noise"))
        self.step = 0
        self.permutation = np.zeros(0, dtype=np.int64)

    # bookkeeping ----------------------------------------------------------

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(len(self.dataset) / self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.batches_per_epoch

    @property
    def done(self) -> bool:
        return self.step >= self.total_steps

    def _real_batch(self):
        j = self.step % self.batches_per_epoch
        if j == 0:
            self.permutation = self.data_rng.permutation(len(self.dataset)).astype(np.int64)
        idx = self.permutation[j * self.cfg.batch_size:(j + 1) * self.cfg.batch_size]
        return self.dataset.tabular[idx], self.dataset.sequences[idx]

    def _latent(self, n):
        return self.latent_rng.normal((n, self.net_config.latent_dim))

    # one step -------------------------------------------------------------

    def _discriminator_step(self):
        tab, seq = self._real_batch()
        fake_tab, fake_seq = generator_forward(self.g, self._latent(tab.shape[0]))
        batch = DiscriminatorBatch(tab, seq, fake_tab, fake_seq)
        state = DpSgdState(self.cfg.lr_d, self.cfg.privacy, self.noise_rng)
        d, stats = dp_discriminator_step(self.d, batch, state, self.cfg.loss)
        if self.cfg.loss == "wasserstein":
            c = self.cfg.weight_clip
            d = DiscriminatorParams(d.config, {k: np.clip(v, -c, c) for k, v in d.tensors.items()})
        if not math.isfinite(stats.loss) or not _finite(d.tensors):
            raise TrainingDivergedError(self.step, "discriminator loss")
        self.d = d
        return stats

    def _generator_step(self):
        n = min(self.cfg.batch_size, len(self.dataset))
        z = self._latent(n)
        tape = nc.Tape()
        tab, seq = generator_forward(self.g, z, tape)
        # discriminator weights enter as constants: only generated data is differentiated
        logits = discriminator_logits(self.d, tab, seq)
        if self.cfg.loss == "standard":
            loss = nc.mean(nc.softplus(-logits))
        else:
            loss = -nc.mean(logits)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDivergedError(self.step, "generator loss")
        grads = tape.backward(loss)
        tensors, self.rmsprop = rmsprop_step(self.rmsprop, self.g.tensors, grads)
        if not _finite(tensors):
            raise TrainingDivergedError(self.step, "generator parameters")
        self.g = GeneratorParams(self.g.config, tensors)
        return value

    def train_step(self) -> StepRecord:
        t0 = time.perf_counter()
        stats = self._discriminator_step()
        g_loss = None
        if (self.step + 1) % self.cfg.d_steps == 0:
            g_loss = self._generator_step()
        rec = StepRecord(self.step, stats.loss, g_loss, stats.preclip_mean, stats.preclip_max,
                         (time.perf_counter() - t0) * 1000.0)
        self.step += 1
        return rec

    def run(self, max_steps: int | None = None, callback=None) -> TrainHistory:
        """Train until the configured epochs are exhausted or ``max_steps`` more steps ran."""
        history = TrainHistory()
        stop = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        while self.step < stop:
            rec = self.train_step()
            history.append(rec)
            if callback is not None:
                callback(rec)
        return history

    # checkpoints ----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.net_config, self.dataset.codec, self.g.copy(), self.d.copy(),
                          self.rmsprop.copy(),
                          {"data": self.data_rng.get_state(), "latent": self.latent_rng.get_state(),
                           "noise": self.noise_rng.get_state()},
                          self.cfg, self.step, self.permutation.copy(), self.fingerprint)

    def _restore(self, ck: Checkpoint):
        if ck.data_fingerprint != self.fingerprint:
            raise ParameterError("checkpoint was trained on a different dataset")
        self.cfg = ck.train_config if self.cfg is None else self.cfg
        if self.cfg.to_dict() != ck.train_config.to_dict():
            raise ParameterError("training configuration differs from the checkpoint's")
        self.net_config = ck.net_config
        self.g, self.d = ck.generator.copy(), ck.discriminator.copy()
        self.rmsprop = ck.rmsprop.copy()
        self.data_rng = nc.SeededRng.from_state(ck.rng_states["data"])
        self.latent_rng = nc.SeededRng.from_state(ck.rng_states["latent"])
        self.noise_rng = nc.SeededRng.from_state(ck.rng_states["noise"])
        self.step = ck.step
        self.permutation = np.asarray(ck.permutation, dtype=np.int64).copy()

    @classmethod
    def resume(cls, dataset: Dataset, checkpoint: Checkpoint) -> "Trainer":
        return cls(dataset, checkpoint.train_config, checkpoint=checkpoint)


def train(dataset: Dataset, cfg: TrainConfig, net_config: NetConfig | None = None):
    """Run a full training; returns ``(GeneratorParams, DiscriminatorParams, TrainHistory)``."""
    tr = Trainer(dataset, cfg, net_config)
    history = tr.run()
    return tr.g, tr.d, history


# ---------------------------------------------------------------------------
# sampling


def generate_encoded(g: GeneratorParams, n: int, seed: int, chunk: int = 256):
    """Raw generator output for ``n`` latent draws: ``(tabular, sequences)``."""
    if n < 1:
        raise ParameterError(f"sample count must be >= 1, got {n}")
    rng = nc.SeededRng(seed)
    z = rng.normal((n, g.config.latent_dim))
    tabs, seqs = [], []
    for s in range(0, n, chunk):
        t, q = generator_forward(g, z[s:s + chunk])
        tabs.append(t)
        seqs.append(q)
    return np.concatenate(tabs), np.concatenate(seqs)


def sample(g: GeneratorParams, codec: Codec, n: int, seed: int) -> list[RawRecord]:
    """Decode ``n`` generated agents; trip sequences end at the first END step."""
    tab, seq = generate_encoded(g, n, seed)
    return [decode(codec, EncodedAgent(tab[i], seq[i], None, i)) for i in range(n)]


# ---------------------------------------------------------------------------
# persistence


def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = {
        "net_config": ck.net_config.to_dict(),
        "codec": ck.codec.to_dict(),
        "train_config": ck.train_config.to_dict(),
        "rng_states": ck.rng_states,
        "rng_stream": nc.SeededRng.STREAM,
        "step": ck.step,
        "data_fingerprint": ck.data_fingerprint,
        "rmsprop": {"lr": ck.rmsprop.lr, "rho": ck.rmsprop.rho, "eps": ck.rmsprop.eps},
    }
    sections = [("meta", container.pack_json(meta)),
                ("permutation", container.pack_array(ck.permutation))]
    for name, _, _ in generator_layout(ck.net_config):
        sections.append(("param:" + name, container.pack_array(ck.generator.tensors[name])))
    for name, _, _ in discriminator_layout(ck.net_config):
        sections.append(("param:" + name, container.pack_array(ck.discriminator.tensors[name])))
    for name, _, _ in generator_layout(ck.net_config):
        if name in ck.rmsprop.v:
            sections.append(("rmsprop:" + name, container.pack_array(ck.rmsprop.v[name])))
    container.write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, sections)


def load_checkpoint(path) -> Checkpoint:
    sec = container.read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    if "meta" not in sec:
        raise IntegrityError("checkpoint lacks its meta section")
    meta = container.unpack_json(sec["meta"])
    if meta.get("rng_stream") != nc.SeededRng.STREAM:
        raise IntegrityError(f"checkpoint uses random stream {meta.get('rng_stream')!r}")
    net = NetConfig.from_dict(meta["net_config"])

    def tensors(layout, prefix, required=True):
        out = {}
        for name, shape, _ in layout:
            payload = sec.get(prefix + name)
            if payload is None:
                if required:
                    raise IntegrityError(f"checkpoint lacks tensor {name!r}")
                continue
            a = container.unpack_array(payload)
            if a.shape != tuple(shape):
                raise IntegrityError(f"tensor {name!r} has shape {a.shape}, expected {tuple(shape)}")
            out[name] = a
        return out

    gen = tensors(generator_layout(net), "param:")
    disc = tensors(discriminator_layout(net), "param:")
    v = tensors(generator_layout(net), "rmsprop:", required=False)
    r = meta["rmsprop"]
    return Checkpoint(net, Codec.from_dict(meta["codec"]), GeneratorParams(net, gen),
                      DiscriminatorParams(net, disc), RmspropState(r["lr"], r["rho"], r["eps"], v),
                      meta["rng_states"], TrainConfig.from_dict(meta["train_config"]), meta["step"],
                      container.unpack_array(sec["permutation"]), meta["data_fingerprint"])


def _fmt(x):
    return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def write_history_csv(path, history: TrainHistory, append: bool = True) -> None:
    """Append records to a training log, writing the header for a new file."""
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "w" if new else "a", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            w.writerow([_fmt(getattr(r, c)) for c in HISTORY_COLUMNS])
