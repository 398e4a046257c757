"""Checkpoint container, config, payload parsing, toy dataset."""

import numpy as np
import pytest
import torch

from latentmark import data
from latentmark.checkpoints import load_checkpoint, load_state, save_checkpoint, save_module
from latentmark.config import (
    ConfigError,
    PipelineConfig,
    config_hash,
    load_pipeline_config,
    pipeline_config_from_dict,
    replace,
)
from latentmark.payload import (
    PayloadError,
    as_bits,
    format_secret,
    parse_secret,
    random_secret,
)


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "ckpt.npz"
    tensors = {"w": torch.randn(3, 4), "b": np.arange(5.0)}
    meta = {"kind": "test", "seed": 3, "nested": {"a": 1}}
    save_checkpoint(path, tensors, meta)
    back, meta2 = load_checkpoint(path)
    assert meta2 == meta
    assert np.allclose(back["w"], tensors["w"].numpy())
    assert np.allclose(back["b"], tensors["b"])


def test_checkpoint_reserved_key(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.npz", {"__meta__": np.zeros(1)}, {})


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.npz")


def test_module_roundtrip(tmp_path):
    lin = torch.nn.Linear(4, 2)
    save_module(tmp_path / "m.npz", lin, {"hparams": {"d": 4}})
    state, meta = load_state(tmp_path / "m.npz")
    lin2 = torch.nn.Linear(4, 2)
    lin2.load_state_dict(state)
    assert torch.equal(lin2.weight, lin.weight)
    assert meta["hparams"]["d"] == 4


def test_config_hash_stable_and_sensitive():
    a, b = PipelineConfig(), PipelineConfig()
    assert config_hash(a) == config_hash(b)
    c = replace(a, seed=5)
    assert config_hash(a) != config_hash(c)


def test_config_loading(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("seed: 7\nstage1:\n  payload_bits: 8\n  iters: 10\n")
    cfg = load_pipeline_config(path)
    assert cfg.seed == 7
    assert cfg.stage1.payload_bits == 8
    assert cfg.stage1.lambda_perceptual == 5.0  # untouched default


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        pipeline_config_from_dict({"stage1": {"bogus": 1}})
    with pytest.raises(ConfigError):
        pipeline_config_from_dict({"bogus": 1})


def test_payload_parse_and_format():
    bits = parse_secret("0110", 4)
    assert list(bits) == [0, 1, 1, 0]
    assert format_secret(bits) == "0110"
    hex_bits = parse_secret("0xA", 4)
    assert list(hex_bits) == [1, 0, 1, 0]
    with pytest.raises(PayloadError):
        parse_secret("012", 3)
    with pytest.raises(PayloadError):
        parse_secret("01", 3)
    with pytest.raises(PayloadError):
        as_bits([0, 2, 1])


def test_random_secret_deterministic():
    assert list(random_secret(16, 3)) == list(random_secret(16, 3))


def test_dataset_shapes_and_determinism():
    imgs, labels = data.make_dataset(64, seed=1)
    imgs2, labels2 = data.make_dataset(64, seed=1)
    assert torch.equal(imgs, imgs2) and torch.equal(labels, labels2)
    assert imgs.shape == (64, 3, 32, 32)
    assert imgs.min() >= 0 and imgs.max() <= 1
    assert labels.min() >= 0 and labels.max() < data.NUM_CLASSES
    with pytest.raises(ValueError):
        data.make_dataset(0)


def test_dataset_split():
    imgs, labels = data.make_dataset(50, seed=0)
    (tr, trl), (ho, hol) = data.split_dataset(imgs, labels, 10)
    assert len(tr) == 40 and len(ho) == 10
    assert len(trl) == 40 and len(hol) == 10
