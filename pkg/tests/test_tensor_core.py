import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csipretrain.tensor_core import (
    CsiSample, PatchSpec, SampleFormatError, ScaleSpec, ShapeError, TokenSequence,
    depatchify, pad_tokens, patchify, read_samples, token_length, write_samples,
)


def rand_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@pytest.mark.parametrize("scale,patch,expected", [
    ((16, 8, 4), (4, 4, 4), 8),
    ((1, 1, 1), (1, 1, 1), 1),
    ((5, 3, 2), (4, 4, 4), 2),
])
def test_token_length(scale, patch, expected):
    assert token_length(ScaleSpec(*scale), PatchSpec(*patch)) == expected


def test_specs_reject_nonpositive():
    with pytest.raises(ValueError):
        ScaleSpec(0, 1, 1)
    with pytest.raises(ValueError):
        PatchSpec(1, 0, 1)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40),
       st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2))
def test_token_length_monotone(T, K, A, t, k, a, axis):
    patch = PatchSpec(t, k, a)
    base = [T, K, A]
    bigger = list(base)
    bigger[axis] += 1
    assert token_length(ScaleSpec(*bigger), patch) >= token_length(ScaleSpec(*base), patch)


@pytest.mark.parametrize("shape", [(4, 4, 4), (5, 3, 2), (16, 8, 4)])
def test_zero_sample_gives_zero_tokens(shape):
    patch = PatchSpec(4, 4, 4)
    seq = patchify(CsiSample(np.zeros(shape, dtype=complex)), patch)
    assert not seq.tokens.any()
    assert seq.valid_len == token_length(ScaleSpec(*shape), patch)
    assert not depatchify(seq, ScaleSpec(*shape), patch).any()


def test_single_patch_holds_whole_tensor():
    rng = np.random.default_rng(0)
    H = rand_complex(rng, (4, 4, 4))
    seq = patchify(CsiSample(H), PatchSpec(4, 4, 4))
    assert seq.tokens.shape == (1, 128)
    np.testing.assert_array_equal(seq.tokens[0, :64], H.real.ravel())
    np.testing.assert_array_equal(seq.tokens[0, 64:], H.imag.ravel())


def test_token_order_is_time_major():
    H = np.zeros((4, 2, 2), dtype=complex)
    H[2, 1, 0] = 1 + 2j  # time patch 1, freq patch 1, antenna patch 0
    seq = patchify(H, PatchSpec(2, 1, 2))
    assert seq.grid_shape == (2, 2, 1)
    row = 1 * 2 + 1
    assert seq.tokens[row].sum() == 3.0
    assert np.count_nonzero(seq.tokens) == 2
    np.testing.assert_array_equal(seq.coords[row], [1, 1, 0])


def test_patchify_rejects_nonfinite():
    H = np.zeros((2, 2, 2), dtype=complex)
    H[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        patchify(H, PatchSpec(1, 1, 1))


def test_depatchify_shape_mismatch():
    seq = patchify(np.ones((4, 4, 4), dtype=complex), PatchSpec(2, 2, 2))
    with pytest.raises(ShapeError):
        depatchify(seq, ScaleSpec(8, 4, 4), PatchSpec(2, 2, 2))


@pytest.mark.parametrize("shape,patch", [((4, 4, 4), (4, 4, 4)), ((16, 8, 4), (4, 4, 4)), ((5, 3, 2), (4, 4, 4))])
def test_roundtrip_examples(shape, patch):
    rng = np.random.default_rng(1)
    H = rand_complex(rng, shape)
    p = PatchSpec(*patch)
    np.testing.assert_array_equal(depatchify(patchify(H, p), ScaleSpec(*shape), p), H)


def test_roundtrip_exhaustive_divisible():
    rng = np.random.default_rng(2)
    for t in (1, 2, 4):
        for k in (1, 2, 4):
            for a in (1, 2, 4):
                for mult in ((1, 1, 1), (2, 1, 2), (8 // t, 8 // k, 8 // a)):
                    shape = (t * mult[0], k * mult[1], a * mult[2])
                    H = rand_complex(rng, shape)
                    p = PatchSpec(t, k, a)
                    np.testing.assert_array_equal(depatchify(patchify(H, p), ScaleSpec(*shape), p), H)


@settings(max_examples=1000, deadline=None)
@given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
       st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
       st.integers(0, 2**32 - 1))
def test_roundtrip_property(shape, patch, seed):
    H = rand_complex(np.random.default_rng(seed), shape)
    p = PatchSpec(*patch)
    seq = patchify(H, p)
    assert seq.valid_len == token_length(ScaleSpec(*shape), p)
    np.testing.assert_array_equal(depatchify(seq, ScaleSpec(*shape), p), H)


def test_pad_tokens():
    rng = np.random.default_rng(3)
    seq = patchify(rand_complex(rng, (4, 4, 4)), PatchSpec(2, 2, 2))
    assert seq.valid_len == 8
    same = pad_tokens(seq, 8)
    np.testing.assert_array_equal(same.tokens, seq.tokens)
    longer = pad_tokens(seq, 12)
    assert longer.tokens.shape == (12, 16) and longer.valid_len == 8
    np.testing.assert_array_equal(longer.tokens[:8], seq.tokens)
    assert not longer.tokens[8:].any()
    with pytest.raises(ValueError):
        pad_tokens(seq, 7)


def test_token_sequence_validates_length():
    with pytest.raises(ShapeError):
        TokenSequence(np.zeros((3, 4)), 3, (2, 2, 1))


def test_binary_roundtrip_and_layout():
    rng = np.random.default_rng(4)
    samples = [CsiSample(rand_complex(rng, (2, 3, 2)), 1, 5, 7),
               CsiSample(rand_complex(rng, (1, 2, 1)), 2, 5, 8)]
    buf = io.BytesIO()
    write_samples(buf, samples)
    raw = buf.getvalue()
    assert raw[:4] == (2).to_bytes(4, "little")
    assert raw[4:8] == b"CSI1"
    header = np.frombuffer(raw[4:36], dtype="<u4")
    np.testing.assert_array_equal(header[1:], [1, 2, 3, 2, 1, 5, 7])
    first_real = np.frombuffer(raw[36:36 + 8 * 12], dtype="<f8")
    np.testing.assert_array_equal(first_real, samples[0].data.real.ravel())
    back = read_samples(io.BytesIO(raw))
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.data, b.data)
        assert (a.scenario_id, a.dataset_id, a.sample_id) == (b.scenario_id, b.dataset_id, b.sample_id)


def test_binary_rejects_corruption():
    buf = io.BytesIO()
    write_samples(buf, [CsiSample(np.ones((1, 1, 1), dtype=complex))])
    raw = bytearray(buf.getvalue())
    with pytest.raises(SampleFormatError):
        read_samples(io.BytesIO(bytes(raw[:-3])))
    raw[4] ^= 0xFF
    with pytest.raises(SampleFormatError):
        read_samples(io.BytesIO(bytes(raw)))
