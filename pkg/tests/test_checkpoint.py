import struct

import numpy as np
import pytest
import torch

from molflae import checkpoint as archive
from molflae.training import checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, train

from builders import random_molecule


@pytest.fixture(scope="module")
def trained(vocab):
    from molflae.training import TrainConfig

    rng = np.random.default_rng(0)
    data = [random_molecule(rng, vocab, n=int(rng.integers(3, 7))) for _ in range(6)]
    cfg = TrainConfig(n_latent=4, latent_dim=4, hidden=16, layers=2, heads=2, k=8, batch_size=3, max_steps=3, n_steps=50, dtype="float32", seed=1)
    return train(data, cfg, vocab)


def test_archive_roundtrip_values():
    t = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([1, 2], dtype=torch.int64), "m": torch.tensor([True, False])}
    back, meta = archive.loads(archive.dumps(t, {"k": 1}))
    assert meta == {"k": 1}
    for k in t:
        assert back[k].dtype == t[k].dtype
        assert torch.equal(back[k], t[k])


def test_archive_stores_float64_as_float32():
    back, _ = archive.loads(archive.dumps({"x": torch.tensor([0.1], dtype=torch.float64)}, {}))
    assert back["x"].dtype == torch.float32
    assert back["x"].item() == np.float32(0.1)


def test_archive_header_layout():
    data = archive.dumps({"x": torch.zeros(2)}, {})
    magic, version, off, length = struct.unpack_from("<8sIQQ", data)
    assert magic == archive.MAGIC and version == archive.FORMAT_VERSION
    assert off == 28 + 8 and off + length == len(data)


def test_bad_magic_rejected():
    data = bytearray(archive.dumps({"x": torch.zeros(1)}, {}))
    data[:8] = b"NOTMOLFL"
    with pytest.raises(archive.CheckpointFormatError):
        archive.loads(bytes(data))


def test_bad_version_rejected():
    data = bytearray(archive.dumps({"x": torch.zeros(1)}, {}))
    struct.pack_into("<I", data, 8, 99)
    with pytest.raises(archive.CheckpointFormatError):
        archive.loads(bytes(data))


def test_truncated_rejected():
    with pytest.raises(archive.CheckpointFormatError):
        archive.loads(b"MOLF")


def test_save_load_save_byte_identical(trained, tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    first = save_checkpoint(p1, trained)
    second = save_checkpoint(p2, load_checkpoint(p1))
    assert first == second
    assert archive.file_hash(p1) == archive.file_hash(p2)


def test_checkpoint_restores_model(trained):
    back = checkpoint_from_bytes(checkpoint_to_bytes(trained))
    assert back.config == trained.config
    assert back.step == trained.step and back.history == trained.history
    assert back.vocab.symbols == trained.vocab.symbols
    for k, v in trained.model_state.items():
        assert torch.equal(back.model_state[k], v.to(back.model_state[k].dtype))
    assert torch.equal(back.rng_state, trained.rng_state)
