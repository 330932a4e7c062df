"""Container files: bit-exact round-trips and corruption rejection."""

import struct

import numpy as np
import pytest

from foleyflow import container
from foleyflow.errors import FormatError


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "weights": rng.normal(size=(3, 4)),
        "bias": rng.normal(size=(4,)),
        "scalar-ish": rng.normal(size=(1,)),
        "pi/digits": np.array([3.141592653589793, 2.718281828459045]),
    }


def _config():
    return {
        "d_model": 32,
        "n_layers": 2,
        "n_heads": 4,
        "d_audio_latent": 16,
        "d_video_feat": 16,
        "d_text": 16,
        "t_audio": 32,
        "guidance_scale": 2.0,
    }


def test_latents_roundtrip_bit_exact(tmp_path):
    path = str(tmp_path / "x.ysnd")
    arrays = _arrays()
    container.write_latents(path, arrays)
    loaded = aout = container.read_latents(path)
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].shape == arrays[name].shape
        # bit-exact, not just close
        assert loaded[name].tobytes() == np.ascontiguousarray(arrays[name]).tobytes()
    assert aout["pi/digits"][0] == 3.141592653589793


def test_checkpoint_roundtrip(tmp_path):
    path = str(tmp_path / "m.ckpt")
    arrays = _arrays()
    container.write_checkpoint(path, _config(), arrays)
    fields, loaded = container.read_checkpoint(path)
    assert fields == _config()
    for name in arrays:
        assert loaded[name].tobytes() == np.ascontiguousarray(arrays[name]).tobytes()


def test_write_is_deterministic(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    arrays = _arrays()
    container.write_latents(a, arrays)
    container.write_latents(b, arrays)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_empty_record_set(tmp_path):
    path = str(tmp_path / "empty.ysnd")
    container.write_latents(path, {})
    assert container.read_latents(path) == {}


def test_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "bad")
    with open(path, "wb") as fh:
        fh.write(b"NOPE" + struct.pack("<I", 1) + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="magic"):
        container.read_latents(path)


def test_bad_version_rejected(tmp_path):
    path = str(tmp_path / "bad")
    with open(path, "wb") as fh:
        fh.write(container.MAGIC + struct.pack("<I", 99) + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="version"):
        container.read_latents(path)


def test_truncation_rejected(tmp_path):
    path = str(tmp_path / "x.ysnd")
    container.write_latents(path, _arrays())
    blob = open(path, "rb").read()
    clipped = str(tmp_path / "clipped.ysnd")
    with open(clipped, "wb") as fh:
        fh.write(blob[:-5])
    with pytest.raises(FormatError, match="truncated"):
        container.read_latents(clipped)


def test_trailing_bytes_rejected(tmp_path):
    path = str(tmp_path / "x.ysnd")
    container.write_latents(path, _arrays())
    blob = open(path, "rb").read()
    padded = str(tmp_path / "padded.ysnd")
    with open(padded, "wb") as fh:
        fh.write(blob + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        container.read_latents(padded)


def test_implausible_name_length_rejected(tmp_path):
    path = str(tmp_path / "bad")
    with open(path, "wb") as fh:
        fh.write(container.MAGIC + struct.pack("<I", 1))
        fh.write(struct.pack("<I", 1))  # one record
        fh.write(struct.pack("<I", 2**31))  # absurd name length
    with pytest.raises(FormatError, match="name length"):
        container.read_latents(path)


def test_implausible_rank_rejected(tmp_path):
    path = str(tmp_path / "bad")
    with open(path, "wb") as fh:
        fh.write(container.MAGIC + struct.pack("<I", 1))
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<I", 1) + b"x")
        fh.write(struct.pack("<I", 200))  # rank 200
    with pytest.raises(FormatError, match="rank"):
        container.read_latents(path)


def test_checkpoint_header_not_readable_as_latents(tmp_path):
    # a checkpoint starts with the config block where a latent file has its
    # record count, so reading it as latents must fail loudly, not quietly
    path = str(tmp_path / "m.ckpt")
    container.write_checkpoint(path, _config(), {})
    with pytest.raises(FormatError):
        container.read_latents(path)
