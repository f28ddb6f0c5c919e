import io

import numpy as np
import pytest
from PIL import Image

from mmevent.encoders import Embedding, EncoderSpec, encode_image, encode_text
from mmevent.errors import BackendError, ConfigurationError, InputError


def _png(color, size=8):
    buf = io.BytesIO()
    Image.new("RGB", (size, size), color).save(buf, format="PNG")
    return buf.getvalue()


def test_toy_text_deterministic():
    spec = EncoderSpec.toy_text(seed=7)
    a, b = encode_text(spec, "flood"), encode_text(spec, "flood")
    assert np.array_equal(a.values, b.values)


def test_toy_text_distinguishes_words():
    spec = EncoderSpec.toy_text(seed=7)
    assert not np.array_equal(encode_text(spec, "flood").values, encode_text(spec, "fire").values)


@pytest.mark.parametrize("dim", [1, 8, 64, 100])
def test_dims_follow_spec(dim):
    assert encode_text(EncoderSpec.toy_text(dim, seed=1), "x y").dim == dim
    assert encode_image(EncoderSpec.toy_vision(dim, seed=1), _png("red")).dim == dim


def test_toy_text_unit_norm_and_empty():
    spec = EncoderSpec.toy_text(seed=0)
    assert np.linalg.norm(encode_text(spec, "some words here").values) == pytest.approx(1.0)
    empty = encode_text(spec, "")
    assert empty.dim == 64 and np.all(np.isfinite(empty.values))


def test_seed_changes_projection():
    a = encode_text(EncoderSpec.toy_text(seed=1), "flood").values
    b = encode_text(EncoderSpec.toy_text(seed=2), "flood").values
    assert not np.allclose(a, b)


def test_black_vs_white_image():
    spec = EncoderSpec.toy_vision(seed=3)
    black, white = encode_image(spec, _png("black")), encode_image(spec, _png("white"))
    assert not np.allclose(black.values, white.values)
    assert np.linalg.norm(black.values) > 0 and np.linalg.norm(white.values) > 0


def test_image_path_and_bytes_agree(tmp_path):
    data = _png((10, 200, 30), 16)
    p = tmp_path / "a.png"
    p.write_bytes(data)
    spec = EncoderSpec.toy_vision(seed=3)
    assert np.array_equal(encode_image(spec, p).values, encode_image(spec, data).values)
    assert np.array_equal(encode_image(spec, str(p)).values, encode_image(spec, p).values)


def test_missing_and_corrupt_image(tmp_path):
    spec = EncoderSpec.toy_vision(seed=3)
    with pytest.raises(InputError, match="nope.png"):
        encode_image(spec, tmp_path / "nope.png")
    with pytest.raises(InputError):
        encode_image(spec, b"not an image")


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        EncoderSpec("text", "toy-text", 8, {})
    with pytest.raises(ConfigurationError):
        EncoderSpec("text", "toy-vision", 8, {"seed": "0"})
    with pytest.raises(ConfigurationError):
        EncoderSpec("text", "toy-text", 0, {"seed": "0"})
    with pytest.raises(ConfigurationError):
        EncoderSpec("text", "word2vec", 8, {})
    with pytest.raises(ConfigurationError):
        encode_image(EncoderSpec.toy_text(seed=0), _png("red"))


def test_spec_dict_round_trip():
    spec = EncoderSpec("text", "pretrained-transformer-text", 768, {"model": "m", "pooling": "first"})
    assert EncoderSpec.from_dict(spec.to_dict()) == spec


def test_pretrained_load_failure_is_backend_error():
    spec = EncoderSpec("text", "pretrained-transformer-text", 768,
                       {"model": "/nonexistent/model-dir", "local_files_only": "true"})
    with pytest.raises(BackendError):
        encode_text(spec, "flood")


def test_embedding_invariants():
    with pytest.raises(ValueError):
        Embedding(np.array([1.0, np.nan]), "text")
    with pytest.raises(ValueError):
        Embedding(np.zeros(0), "text")
    with pytest.raises(ValueError):
        Embedding(np.zeros(3), "audio")
    e = Embedding([1, 2, 3], "vision")
    assert e.dim == 3 and not e.values.flags.writeable
