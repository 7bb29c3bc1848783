import dataclasses
import statistics
import time

import numpy as np
import pytest

from handsynth import tensor as T
from handsynth.losses import hinge_d
from handsynth.networks import ArchConfig, sample_prior, to_canvas
from handsynth.nn import frozen
from handsynth.tensor import Tensor
from handsynth.toygen import sample_corpus
from handsynth.train import (CheckpointError, ConfigError, Trainer, TrainConfig, format_config, format_metrics,
                             load_checkpoint, lr_schedule, parse_config, parse_metrics_line, read_checkpoint,
                             save_checkpoint)

from conftest import TINY_ARCH


def tiny_config(**kw) -> TrainConfig:
    base = dict(num_writers=8, words_per_writer=20, pretrain_steps=2, steps=4, arch=ArchConfig(**TINY_ARCH))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_trainer(small_dataset):
    tr = Trainer(tiny_config(), dataset=small_dataset)
    tr.fit(2)
    return tr


def params(module) -> list:
    return [p.data.copy() for p in module.parameters()]


# -- configuration ------------------------------------------------------------------

def test_parse_config_types_and_comments():
    cfg = parse_config("# toy run\nlr = 0.001\nbatch_size = 4  # small\ngen_channels = 8,8,8,8\n\n")
    assert cfg.lr == 0.001 and cfg.batch_size == 4
    assert cfg.arch.gen_channels == (8, 8, 8, 8)
    assert cfg.decay_start_epoch == 35 and cfg.beta1 == 0.5 and cfg.beta2 == 0.999


def test_config_errors_name_the_line():
    with pytest.raises(ConfigError, match="line 2: unknown key 'colour'"):
        parse_config("lr = 0.1\ncolour = red\n")
    with pytest.raises(ConfigError, match="line 1: batch_size expects int"):
        parse_config("batch_size = eight\n")
    with pytest.raises(ConfigError, match="line 1: expected"):
        parse_config("lr 0.1\n")


def test_config_rejects_short_schedule():
    with pytest.raises(ConfigError, match="decay_start_epoch"):
        parse_config("epochs = 35\n")
    with pytest.raises(ConfigError, match="style_dim"):
        parse_config("style_dim = 101\n")
    with pytest.raises(ConfigError, match="writer head"):
        TrainConfig(num_writers=40)


def test_config_text_round_trip():
    cfg = tiny_config(lr=0.003, seed=5)
    assert parse_config(format_config(cfg)) == cfg


# -- learning-rate schedule ------------------------------------------------------------

def test_lr_schedule_endpoints():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == 0.0002
    assert lr_schedule(34, cfg) == 0.0002
    assert lr_schedule(cfg.epochs - 1, cfg) == 0.0
    assert lr_schedule(cfg.epochs + 10, cfg) == 0.0
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_lr_schedule_midpoint_is_half():
    cfg = TrainConfig(epochs=61)
    assert lr_schedule(47, cfg) == pytest.approx(cfg.lr / 2, rel=1e-12)


def test_lr_schedule_non_increasing_and_continuous():
    cfg = TrainConfig()
    lrs = [lr_schedule(e, cfg) for e in range(cfg.epochs + 2)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    step = cfg.lr / (cfg.epochs - cfg.decay_start_epoch)
    assert lrs[cfg.decay_start_epoch - 1] - lrs[cfg.decay_start_epoch] == pytest.approx(step)


# -- metrics log ------------------------------------------------------------------------

def test_metrics_round_trip():
    line = format_metrics(7, {"phase": "train", "d_loss": 0.1 + 0.2, "ctc_excluded": 0})
    assert line == "step=7 phase=train d_loss=0.30000000000000004 ctc_excluded=0"
    assert parse_metrics_line(line) == {"step": 7, "phase": "train", "d_loss": 0.1 + 0.2, "ctc_excluded": 0}


# -- training step -------------------------------------------------------------------------

def test_run_step_reports_every_term(tiny_trainer):
    out = tiny_trainer.run_step()
    for key in ("d_loss", "d_hf_loss", "r_loss", "w_loss", "adv", "hf", "rec", "kl", "fdl", "g_total"):
        assert np.isfinite(out[key]), key
    assert out["z_source"] in ("prior", "encoded")
    assert {"writer", "style"} & set(out)


def test_discriminator_phase_leaves_generator_untouched(tiny_trainer):
    tr = tiny_trainer
    m = tr.models
    before = params(m.G) + params(m.S)
    batch = tr.sample_batch(99)
    texts = sample_corpus(tr.corpus, np.random.default_rng(0), len(batch))
    imgs, w = m.G.generate(texts, sample_prior(len(batch), tr.arch.style_dim, np.random.default_rng(1)))
    fake = to_canvas(imgs, tr.arch.canvas_width).detach()
    tr.opt["GE"].zero_grad()
    tr.opt["D"].zero_grad()
    hinge_d(m.D(Tensor(batch.images), batch.widths), m.D(fake, w)).backward()
    tr._adam("D", 1e-3)
    assert all(p.grad is None or not np.any(p.grad) for p in m.G.parameters())
    for a, b in zip(before, params(m.G) + params(m.S)):
        np.testing.assert_array_equal(a, b)


def test_discriminator_loss_falls_against_frozen_generator(small_dataset):
    tr = Trainer(tiny_config(lr=1e-3), dataset=small_dataset)
    m = tr.models
    losses = []
    with frozen(m.G):
        for step in range(200):
            batch = tr.sample_batch(step)
            texts = sample_corpus(tr.corpus, tr.rng(step, 12), len(batch))
            with T.no_grad():
                imgs, w = m.G.generate(texts, sample_prior(len(batch), tr.arch.style_dim, tr.rng(step, 13)))
            fake = to_canvas(imgs, tr.arch.canvas_width)
            tr.opt["D"].zero_grad()
            loss = hinge_d(m.D(Tensor(batch.images), batch.widths), m.D(fake, w))
            loss.backward()
            tr._adam("D", 1e-3)
            losses.append(float(loss.data))
    medians = [statistics.median(losses[i:i + 40]) for i in range(0, 200, 40)]
    assert medians[-1] < medians[0]
    assert sum(b <= a for a, b in zip(medians, medians[1:])) >= 3


def test_trainer_rejects_tiny_training_set(small_dataset):
    with pytest.raises(ValueError, match="batch_size"):
        Trainer(tiny_config(batch_size=8), dataset=dataclasses.replace(small_dataset, samples=small_dataset.samples[:4]))


def test_default_step_fits_time_budget():
    tr = Trainer(TrainConfig(pretrain_steps=0))
    tr.run_step()
    times = []
    for _ in range(3):
        t0 = time.perf_counter()
        tr.run_step()
        times.append(time.perf_counter() - t0)
    assert statistics.median(times) < 2.0


# -- checkpoints ------------------------------------------------------------------------------

def test_checkpoint_save_load_save_is_byte_identical(tmp_path, tiny_trainer, small_dataset):
    a = save_checkpoint(tiny_trainer, tmp_path / "a.ckpt")
    b = save_checkpoint(load_checkpoint(a, dataset=small_dataset), tmp_path / "b.ckpt")
    assert a.read_bytes() == b.read_bytes()
    header, arrays = read_checkpoint(a)
    assert header["step"] == tiny_trainer.step
    assert header["config"]["arch"]["style_dim"] == TINY_ARCH["style_dim"]
    for name, p in tiny_trainer.models.G.state_dict().items():
        np.testing.assert_array_equal(arrays[f"model.G.{name}"], p)


def test_checkpoint_corruption_is_structured(tmp_path, tiny_trainer):
    path = save_checkpoint(tiny_trainer, tmp_path / "c.ckpt")
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(bad)
    bad.write_bytes(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version 2.*version 1"):
        read_checkpoint(bad)
    bad.write_bytes(data[:-7])
    with pytest.raises(CheckpointError, match="truncated|trailing"):
        read_checkpoint(bad)
