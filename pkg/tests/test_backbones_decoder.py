import numpy as np
import pytest

from stbava import tensor as tn
from stbava.backbones import (
    Adapter,
    ToyAudioEncoder,
    ToyImageEncoder,
    adapter_inject,
    encode_audio,
    encode_image,
    patchify,
)
from stbava.config import ConfigError, StBavaConfig
from stbava.decoder import MaskDecoder, decode_clip, decode_frame
from stbava.tensor import Tensor

F64 = np.float64


@pytest.fixture(scope="module")
def cfg():
    return StBavaConfig(dtype="float64")


@pytest.fixture(scope="module")
def inputs():
    rng = np.random.default_rng(0)
    return rng.random((5, 3, 64, 64)), rng.random((5, 96, 64)) * 0.5


def test_patchify_layout():
    x = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(1, 2, 3, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (1, 2, 4, 12)
    # patch (0, 1) of frame 0, channel 0 covers rows 0-1, cols 2-3
    np.testing.assert_array_equal(p[0, 0, 1, :4], x[0, 0, 0, 0:2, 2:4].reshape(-1))
    with pytest.raises(ConfigError):
        patchify(np.zeros((1, 1, 3, 10, 10)), 4)


def test_image_encoder_shape_and_frame_locality(cfg, inputs):
    enc = ToyImageEncoder(np.random.default_rng(1), cfg, F64)
    frames, _ = inputs
    V = encode_image(enc, frames)
    assert V.shape == (5, 64, 64) and np.isfinite(V.data).all()
    f2 = frames.copy()
    f2[3] = np.random.default_rng(2).random(f2[3].shape)
    V2 = encode_image(enc, f2)
    for t in range(5):
        same = np.array_equal(V.data[t], V2.data[t])
        assert same == (t != 3)


def test_adapter_with_zero_second_layer_is_noop(cfg, inputs):
    rng = np.random.default_rng(3)
    enc = ToyImageEncoder(rng, cfg, F64)
    adapters = [Adapter(rng, cfg.channels, F64) for _ in range(cfg.encoder_layers)]
    for ad in adapters:
        ad.mlp.layers[1].w.data[:] = 0
        ad.mlp.layers[1].b.data[:] = 0
    A = Tensor(rng.normal(size=(5, 64)))
    frames, _ = inputs
    np.testing.assert_allclose(encode_image(enc, frames, adapters, A).data, encode_image(enc, frames).data, atol=1e-7)


def test_adapter_inject_repeats_and_is_frame_local():
    rng = np.random.default_rng(4)
    ad = Adapter(rng, 64, F64)
    A = Tensor(rng.normal(size=(5, 64)))
    out = adapter_inject(ad, A, 64)
    assert out.shape == (5, 64, 64)
    np.testing.assert_array_equal(out.data, np.broadcast_to(out.data[:, :1], out.shape))
    A2 = A.data.copy()
    A2[1] += 1.0
    out2 = adapter_inject(ad, Tensor(A2), 64)
    changed = [not np.array_equal(out.data[t], out2.data[t]) for t in range(5)]
    assert changed == [False, True, False, False, False]
    ad.mlp.layers[1].w.data[:] = 0
    ad.mlp.layers[1].b.data[:] = 0
    assert not adapter_inject(ad, A, 64).data.any()


def test_image_encoder_rejects_wrong_size(cfg):
    enc = ToyImageEncoder(np.random.default_rng(1), cfg, F64)
    with pytest.raises(ConfigError):
        encode_image(enc, np.zeros((5, 3, 60, 60)))


def test_audio_encoder(cfg, inputs):
    enc = ToyAudioEncoder(np.random.default_rng(5), cfg, F64)
    _, specs = inputs
    A, A0 = encode_audio(enc, specs)
    assert A.shape == (5, 64) and A0 is A
    # zero input: only the bias pathway, identical for every second
    Z, _ = encode_audio(enc, np.zeros((5, 96, 64)))
    np.testing.assert_array_equal(Z.data, np.broadcast_to(Z.data[:1], Z.shape))
    Z2, _ = encode_audio(enc, np.zeros((5, 96, 64)))
    np.testing.assert_array_equal(Z.data, Z2.data)
    s2 = specs.copy()
    s2[2] += 0.3
    B, _ = encode_audio(enc, s2)
    diff = np.abs(B.data - A.data).max(axis=1)
    assert diff[2] > 0 and np.all(diff[[0, 1, 3, 4]] == 0)
    with pytest.raises(ConfigError):
        encode_audio(enc, np.zeros((5, 32, 64)))


def test_audio_frozen_names_exclude_output_linear(cfg):
    enc = ToyAudioEncoder(np.random.default_rng(5), cfg, F64)
    names = enc.frozen_names("audio_encoder.")
    assert names and not any(n.startswith("audio_encoder.out.") for n in names)


@pytest.fixture(scope="module", params=["bilinear", "subpixel"])
def decoder(request):
    c = StBavaConfig(dtype="float64", upsample=request.param)
    return MaskDecoder(np.random.default_rng(6), c, F64)


def dec_inputs(seed=7, T=5):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(T, 64, 64))), Tensor(rng.normal(size=(T, 64, 64))), Tensor(rng.normal(size=(T, 64)))


def test_decode_frame_shape_and_zero_dense_prompt(decoder):
    v, q, a = dec_inputs(T=1)
    out = decode_frame(decoder, Tensor(v.data[0]), Tensor(q.data[0]), Tensor(a.data[0]))
    assert out.shape == (64, 64)
    z = decode_frame(decoder, Tensor(v.data[0]), Tensor(np.zeros((64, 64))), Tensor(a.data[0]))
    assert np.isfinite(z.data).all()


def test_sparse_prompt_is_live(decoder):
    v, q, a = dec_inputs(T=1)
    base = decode_frame(decoder, Tensor(v.data[0]), Tensor(q.data[0]), Tensor(a.data[0])).data
    bump = np.random.default_rng(1).normal(size=64)
    moved = decode_frame(decoder, Tensor(v.data[0]), Tensor(q.data[0]), Tensor(a.data[0] + bump)).data
    assert np.abs(base - moved).max() > 1e-6
    # every read of the token goes through a LayerNorm, so a uniform shift is invisible
    shifted = decode_frame(decoder, Tensor(v.data[0]), Tensor(q.data[0]), Tensor(a.data[0] + 0.5)).data
    assert np.abs(base - shifted).max() <= 1e-9


def test_decode_clip_frame_local_and_deterministic(decoder):
    v, q, a = dec_inputs()
    out = decode_clip(decoder, v, q, a)
    assert out.shape == (5, 64, 64)
    again = decode_clip(decoder, v, q, a)
    assert out.data.tobytes() == again.data.tobytes()
    v2, q2, a2 = v.data.copy(), q.data.copy(), a.data.copy()
    v2[4] += 1
    q2[4] -= 1
    a2[4] += np.random.default_rng(2).normal(size=64)
    out2 = decode_clip(decoder, Tensor(v2), Tensor(q2), Tensor(a2))
    assert np.abs(out2.data[:4] - out.data[:4]).max() <= 1e-7
    assert np.abs(out2.data[4] - out.data[4]).max() > 0


def test_decoder_gradients(decoder):
    c = decoder._cfg.replace(channels=16, heads=2)
    dec = MaskDecoder(np.random.default_rng(8), c, F64)
    rng = np.random.default_rng(9)
    v, q, a = Tensor(rng.normal(size=(2, 64, 16))), Tensor(rng.normal(size=(2, 64, 16))), Tensor(rng.normal(size=(2, 16)))
    masks = (rng.random((2, 64, 64)) > 0.5).astype(np.uint8)
    params = [p for _, p in dec.named_params()]

    def obj():
        return tn.bce_with_logits(dec(v, q, a), masks)

    with tn.Tape() as tape:
        tape.backward(obj())
    est = tn.finite_diff_grad(lambda: float(obj().data), params, samples=8)
    worst = max(tn.rel_err(p.grad.reshape(-1)[idx], fd).max() for p, (idx, fd) in zip(params, est))
    assert worst <= 1e-4
