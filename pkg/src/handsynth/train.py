"""Adversarial training loop, configuration files, learning-rate schedule and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import (GradientBalancer, LossBundle, composite_generator_loss, ctc_loss_feasible, fdl_loss,
                     hinge_d, hinge_g, kl_gauss, style_recon_l1, writer_ce)
from .networks import ArchConfig, Models, build_models, sample, sample_prior, to_canvas
from .nn import evaluating, frozen
from .optim import ParameterStore, adam_step
from .tensor import Tensor
from .text import batch_indices
from .toygen import Batch, ToyDataset, collate, load_image_dir, make_dataset, sample_corpus

log = logging.getLogger(__name__)

STREAM_BATCH = 11
STREAM_TEXT = 12
STREAM_PRIOR = 13
STREAM_EPS = 14
STREAM_FDL = 15
STREAM_PRETRAIN = 16


class ConfigError(ValueError):
    """Invalid configuration file or value."""


# -- configuration ---------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_kl: float = 0.0001
    lambda_fdl: float = 1.0
    lambda_phase: float = 1.0
    fdl_projections: int = 64
    balance_interval: int = 16
    balance_momentum: float = 0.99
    balance_min: float = 0.01
    balance_max: float = 10.0
    epochs: int = 60
    decay_start_epoch: int = 35
    steps_per_epoch: int = 0  # 0: one pass over the training writers' samples
    steps: int = 500
    pretrain_steps: int = 500
    pretrain_lr: float = 0.001  # supervised pre-phase of R and W only
    rec_on_recon: bool = True  # CTC through R on reconstructions as well as fakes
    batch_size: int = 8
    seed: int = 0
    data_seed: int = 0
    num_writers: int = 32
    words_per_writer: int = 200
    data_dir: str = ""
    checkpoint_every: int = 0
    out_dir: str = "run"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def __post_init__(self):
        if self.epochs <= self.decay_start_epoch:
            raise ConfigError(f"epochs ({self.epochs}) must exceed decay_start_epoch ({self.decay_start_epoch})")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        for name in ("lr", "pretrain_lr", "lambda_kl", "lambda_fdl", "lambda_phase"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not (0 < self.balance_min <= self.balance_max):
            raise ConfigError("need 0 < balance_min <= balance_max")
        if not self.data_dir and self.arch.num_writers < self.num_writers:
            raise ConfigError(f"writer head has {self.arch.num_writers} classes for {self.num_writers} writers")
        for name in ("steps", "pretrain_steps", "steps_per_epoch", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "arch"}
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        arch = ArchConfig.from_dict(d.pop("arch"))
        return cls(arch=arch, **d)


def _field_types(cls) -> dict:
    return {f.name: type(getattr(cls(), f.name)) for f in dataclasses.fields(cls)}


def _parse_value(raw: str, kind: type, key: str, lineno: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}") from None


CONFIG_SCHEMA_DOC = """\
Flat text configuration: one ``key = value`` per line, ``#`` starts a comment.
Training keys are the TrainConfig fields; architecture keys (style_dim,
gen_channels, ...) are the ArchConfig fields. Tuples are comma separated."""


def parse_config(text: str) -> TrainConfig:
    """Parse the flat key-value format; unknown keys and bad values raise ``ConfigError``.

    A key that names both a training and an architecture field (``num_writers``)
    sets both, so the writer head always matches the dataset.
    """
    train_types = {k: v for k, v in _field_types(TrainConfig).items() if k != "arch"}
    arch_types = _field_types(ArchConfig)
    train_kw, arch_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in train_types:
            train_kw[key] = _parse_value(raw, train_types[key], key, lineno)
        if key in arch_types:
            arch_kw[key] = _parse_value(raw, arch_types[key], key, lineno)
        if key not in train_types and key not in arch_types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        arch = ArchConfig(**arch_kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return TrainConfig(arch=arch, **train_kw)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if k == "arch":
            continue
        lines.append(f"{k} = {v}")
    seen = set(cfg.to_dict())
    for k, v in cfg.arch.to_dict().items():
        if k in seen:
            continue
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    return "\n".join(lines) + "\n"


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Constant until ``decay_start_epoch``, then linear to 0 at the final epoch."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    start, total = config.decay_start_epoch, config.epochs
    if epoch < start:
        return config.lr
    return config.lr * max(0.0, 1.0 - (epoch - start + 1) / (total - start))


# -- metrics log -----------------------------------------------------------------

def format_metrics(step: int, values: dict) -> str:
    parts = [f"step={step}"]
    for k, v in values.items():
        parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def parse_metrics_line(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


class MetricsLog:
    """Append-only text log, flushed after every line."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.lines: list = []
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, step: int, values: dict) -> str:
        line = format_metrics(step, values)
        self.lines.append(line)
        if self._fh is not None:
            self._fh.write(line + "\n")
            self._fh.flush()
        return line

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# -- trainer -----------------------------------------------------------------------

def _f(t) -> float:
    return float(np.asarray(t.data if isinstance(t, Tensor) else t).reshape(-1)[0])


def _norm(g: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(g, dtype=np.float64) ** 2)))


def build_dataset(config: TrainConfig) -> ToyDataset:
    if config.data_dir:
        ds, report = load_image_dir(config.data_dir, vocab=config.arch.make_vocab())
        if report.failures:
            log.warning("%d files could not be read", len(report.failures))
        return ds
    return make_dataset(config.num_writers, config.words_per_writer, seed=config.data_seed,
                        vocab=config.arch.make_vocab(), max_len=config.arch.max_len)


class Trainer:
    """Owns the models, optimizers, gradient balancer and step counter.

    Every random draw comes from a generator keyed by (seed, step, stream),
    so a run is a pure function of the configuration and resuming from a
    checkpoint reproduces the uninterrupted run.
    """

    def __init__(self, config: TrainConfig, dataset: ToyDataset | None = None, metrics_path=None):
        self.config = config
        self.arch = config.arch
        self.vocab = config.arch.make_vocab()
        self.dataset = dataset if dataset is not None else build_dataset(config)
        self.train_set = self.dataset.train() if self.dataset.train_writers else self.dataset
        if len(self.train_set) < config.batch_size:
            raise ValueError(f"training set has {len(self.train_set)} samples, fewer than batch_size")
        self.corpus = list(self.dataset.oov_lexicon) or list(self.dataset.lexicon)
        if not self.corpus:
            self.corpus = sorted({s.text for s in self.train_set})
        self.models: Models = build_models(self.arch, config.seed)
        m = self.models
        self.opt = {
            "D": ParameterStore.from_modules(D=m.D),
            "D_hf": ParameterStore.from_modules(D_hf=m.D_hf),
            "R": ParameterStore.from_modules(R=m.R),
            "W": ParameterStore.from_modules(backbone=m.S.backbone, writer=m.S.writer),
            "GE": ParameterStore.from_modules(G=m.G, backbone=m.S.backbone, encoder=m.S.encoder),
        }
        self.balancer = GradientBalancer(config.balance_interval, config.balance_momentum,
                                         config.balance_min, config.balance_max)
        self.step = 0
        self.pretrain_done = 0
        self.metrics = MetricsLog(metrics_path)

    # -- bookkeeping

    def rng(self, step: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, step, stream])

    @property
    def steps_per_epoch(self) -> int:
        return self.config.steps_per_epoch or math.ceil(len(self.train_set) / self.config.batch_size)

    def lr_at(self, step: int) -> float:
        return lr_schedule(step // self.steps_per_epoch, self.config)

    def _adam(self, name: str, lr: float) -> None:
        adam_step(self.opt[name], lr, self.config.beta1, self.config.beta2)

    def sample_batch(self, step: int, stream: int = STREAM_BATCH) -> Batch:
        idx = self.rng(step, stream).choice(len(self.train_set), self.config.batch_size, replace=False)
        return collate([self.train_set[int(i)] for i in idx], self.arch.canvas_width)

    def _targets(self, texts):
        return batch_indices(texts, self.vocab), [len(t) for t in texts]

    # -- auxiliary networks on real data

    def _update_recognizer(self, x: Tensor, texts, lr: float) -> tuple:
        R = self.models.R
        self.opt["R"].zero_grad()
        tgt, lens = self._targets(texts)
        loss, n_ex = ctc_loss_feasible(R(x), tgt, lens)
        loss.backward()
        self._adam("R", lr)
        return _f(loss), n_ex

    def _update_writer(self, x: Tensor, widths, writer_ids, lr: float) -> float:
        self.opt["W"].zero_grad()
        loss = writer_ce(self.models.S.classify(x, widths), writer_ids)
        loss.backward()
        self._adam("W", lr)
        return _f(loss)

    def pretrain_step(self) -> dict:
        """Supervised update of R and W on one real batch."""
        k = self.pretrain_done
        batch = self.sample_batch(k, STREAM_PRETRAIN)
        x = Tensor(batch.images)
        lr = self.config.pretrain_lr
        r_loss, n_ex = self._update_recognizer(x, batch.texts, lr)
        w_loss = self._update_writer(x, batch.widths, batch.writer_ids, lr)
        self.pretrain_done += 1
        return {"phase": "pretrain", "r_loss": r_loss, "w_loss": w_loss, "ctc_excluded": n_ex}

    # -- one adversarial step

    def train_step(self, batch: Batch, corpus_texts: list, step: int | None = None) -> tuple:
        """Discriminator-side phase then generator-side phase; returns (LossBundle, metrics)."""
        cfg, m = self.config, self.models
        step = self.step if step is None else step
        lr = self.lr_at(step)
        B = len(batch)
        x = Tensor(batch.images)
        widths = batch.widths
        canvas = self.arch.canvas_width
        out: dict = {"phase": "train", "lr": float(lr)}

        # phase 1: R and W on real pairs
        out["r_loss"], n_ex_real = self._update_recognizer(x, batch.texts, lr)
        out["w_loss"] = self._update_writer(x, widths, batch.writer_ids, lr)

        # generate fakes (OOV text) and reconstructions (real text), one generator pass
        prior_step = step % 2 == 0
        posterior = m.S.encode(x, widths)
        z_enc = sample(posterior, self.rng(step, STREAM_EPS))
        z_fake = sample_prior(B, self.arch.style_dim, self.rng(step, STREAM_PRIOR)) if prior_step else z_enc
        imgs, gen_w = m.G.generate(list(corpus_texts) + list(batch.texts), T.concat([z_fake, z_enc], axis=0),
                                   self.vocab)
        imgs = to_canvas(imgs, canvas)
        fake, recon = imgs[:B], imgs[B:]
        fake_w = gen_w[:B]

        # phase 1: D and D_HF on real vs detached fakes
        fake_const = fake.detach()
        self.opt["D"].zero_grad()
        d_loss = hinge_d(m.D(x, widths), m.D(fake_const, fake_w))
        d_loss.backward()
        self._adam("D", lr)
        self.opt["D_hf"].zero_grad()
        dhf_loss = hinge_d(m.D_hf(x, widths), m.D_hf(fake_const, fake_w))
        dhf_loss.backward()
        self._adam("D_hf", lr)
        out["d_loss"], out["d_hf_loss"] = _f(d_loss), _f(dhf_loss)

        # phase 2: generator-side terms, measured at a detached copy of all generated images
        self.opt["GE"].zero_grad()
        leaf = Tensor(imgs.data, requires_grad=True)
        leaf_fake = leaf[:B]
        lam = self.balancer.lambdas
        with frozen(m.D, m.D_hf):
            adv = hinge_g(m.D(leaf_fake, fake_w))
            hf = hinge_g(m.D_hf(leaf_fake, fake_w))
        (adv + hf).backward()
        g_prev = leaf.grad.copy()
        self.balancer.observe("adv", _norm(g_prev))

        def measured(name: str, loss: Tensor) -> None:
            nonlocal g_prev
            w = lam[name]
            loss.backward(np.asarray(w, dtype=loss.dtype))
            delta = leaf.grad - g_prev
            g_prev = leaf.grad.copy()
            self.balancer.observe(name, _norm(delta) / w)

        rec_texts = list(corpus_texts) + list(batch.texts) if cfg.rec_on_recon else list(corpus_texts)
        tgt, lens = self._targets(rec_texts)
        with frozen(m.R), evaluating(m.R):
            rec, n_ex_fake = ctc_loss_feasible(m.R(leaf if cfg.rec_on_recon else leaf_fake), tgt, lens)
        bundle = LossBundle(adv=adv, hf=hf, rec=rec,
                            weights={"rec": lam["rec"], "writer": lam["writer"], "style": lam["style"],
                                     "kl": cfg.lambda_kl, "fdl": cfg.lambda_fdl})
        if prior_step:
            with evaluating(m.S):
                z_rec = m.S.encode(leaf_fake, fake_w).mu
            bundle.style = style_recon_l1(z_fake, z_rec)
        else:
            with frozen(m.S), evaluating(m.S):
                bundle.writer = writer_ce(m.S.classify(leaf_fake, fake_w), batch.writer_ids)
        bundle.kl = kl_gauss(posterior)
        with frozen(m.S), evaluating(m.S):
            fdl_seed = int(self.rng(step, STREAM_FDL).integers(0, 2 ** 31 - 2))
            bundle.fdl = fdl_loss(m.S.features(x), m.S.features(recon), cfg.lambda_phase,
                                  cfg.fdl_projections, fdl_seed)
        total = composite_generator_loss(bundle, self.balancer)  # raises on non-finite terms

        measured("rec", rec)
        if bundle.writer is not None:
            measured("writer", bundle.writer)
        if bundle.style is not None:
            measured("style", bundle.style)
        aux = bundle.fdl * cfg.lambda_fdl + bundle.kl * cfg.lambda_kl
        T.backward([imgs, aux], [leaf.grad, None])
        self._adam("GE", lr)
        self.balancer.step(step)

        for name, val in bundle.items():
            out[name] = _f(val)
        out["g_total"] = _f(total)
        for name, val in sorted(lam.items()):
            out[f"lambda_{name}"] = float(val)
        for name, val in sorted(self.balancer.norms.items()):
            out[f"gnorm_{name}"] = float(val)
        out["ctc_excluded"] = n_ex_real + n_ex_fake
        out["z_source"] = "prior" if prior_step else "encoded"
        return bundle, out

    def run_step(self) -> dict:
        step = self.step
        batch = self.sample_batch(step)
        texts = sample_corpus(self.corpus, self.rng(step, STREAM_TEXT), self.config.batch_size)
        _, out = self.train_step(batch, texts, step)
        self.step += 1
        self.metrics.write(step, out)
        return out

    def fit(self, steps: int | None = None, checkpoint_dir=None, progress=None) -> None:
        """Finish the supervised pre-phase, then run adversarial steps up to ``steps`` in total."""
        cfg = self.config
        target = cfg.steps if steps is None else steps
        while self.pretrain_done < cfg.pretrain_steps:
            k = self.pretrain_done
            out = self.pretrain_step()
            self.metrics.write(k, out)
        while self.step < target:
            t0 = time.perf_counter()
            out = self.run_step()
            if progress is not None:
                progress(self.step, out, time.perf_counter() - t0)
            if checkpoint_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                save_checkpoint(self, Path(checkpoint_dir) / f"step_{self.step:06d}.ckpt")


# -- checkpoints -------------------------------------------------------------------

MAGIC = b"HSYN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _records(trainer: Trainer) -> list:
    recs = []
    for net, mod in trainer.models.named().items():
        for name, arr in mod.state_dict().items():
            recs.append((f"model.{net}.{name}", np.asarray(arr)))
    for opt_name, store in trainer.opt.items():
        for name, arr in store.state()["arrays"].items():
            recs.append((f"opt.{opt_name}.{name}", arr))
    return recs


def _encode_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODES.get(np.dtype(dt).newbyteorder("<").str)
    if code is None:
        raise CheckpointError(f"cannot store {name} with dtype {arr.dtype}")
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + raw


def save_checkpoint(trainer: Trainer, path) -> Path:
    """Binary checkpoint: magic, version, JSON header, then named arrays.

    The header holds the full configuration (architecture included), step
    counters, balancer state and optimizer step counts. Arrays are model
    parameters and buffers followed by Adam moments, in a fixed order.
    """
    header = {
        "config": trainer.config.to_dict(),
        "step": trainer.step,
        "pretrain_done": trainer.pretrain_done,
        "balancer": trainer.balancer.state(),
        "opt_steps": {k: s.state()["steps"] for k, s in trainer.opt.items()},
        "rng": {"kind": "counter", "seed": trainer.config.seed},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    recs = _records(trainer)
    body = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb, struct.pack("<I", len(recs))]
    body += [_encode_record(n, a) for n, a in recs]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(body))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple:
    """(header dict, {name: array}) without building models."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    try:
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, this build reads version {VERSION}")
        off = 12
        header = json.loads(data[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BI", data, off)
            off += 5
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arrays[name] = np.frombuffer(data[off:off + n], dtype=dt).reshape(shape).copy()
            off += n
    except CheckpointError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header, arrays


def load_checkpoint(path, dataset: ToyDataset | None = None, metrics_path=None) -> Trainer:
    """Rebuild a trainer (models, optimizers, balancer, counters) from a checkpoint."""
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    tr = Trainer(cfg, dataset=dataset if dataset is not None else _lazy_dataset(cfg), metrics_path=metrics_path)
    restore_models(tr.models, arrays)
    for opt_name, store in tr.opt.items():
        prefix = f"opt.{opt_name}."
        sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        store.load_state(sub, header["opt_steps"][opt_name])
    tr.balancer.load_state(header["balancer"])
    tr.step = int(header["step"])
    tr.pretrain_done = int(header["pretrain_done"])
    return tr


def restore_models(models: Models, arrays: dict) -> None:
    for net, mod in models.named().items():
        prefix = f"model.{net}."
        mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})


def load_models(path) -> tuple:
    """(TrainConfig, Models) from a checkpoint, for generation and evaluation."""
    header, arrays = read_checkpoint(path)
    cfg = TrainConfig.from_dict(header["config"])
    models = build_models(cfg.arch, cfg.seed)
    restore_models(models, arrays)
    models.eval()
    return cfg, models


def _lazy_dataset(cfg: TrainConfig) -> ToyDataset:
    return build_dataset(cfg)
