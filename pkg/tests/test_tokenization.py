from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflow import tokenization as tk
from vflow.errors import ContractError, SequenceLengthError, ShapeError, VocabularyError
from vflow.tensor import Tensor


def labeled_tokens(m, n, k):
    """Tokens whose single feature encodes (time, trajectory, space) as t*100 + m*10 + s."""
    x = np.zeros((m, n, k, 1))
    for a in range(m):
        for b in range(n):
            for c in range(k):
                x[a, b, c, 0] = (b + 1) * 100 + (a + 1) * 10 + (c + 1)
    return x


def test_spatiotemporal_order():
    seq = tk.flatten_spatiotemporal(labeled_tokens(1, 2, 2))[:, 0]
    # t1s1, t1s2, t2s1, t2s2
    np.testing.assert_array_equal(seq, [111, 112, 211, 212])


def test_multi_trajectory_order():
    seq = tk.flatten_multi_trajectory(labeled_tokens(2, 2, 1))[:, 0]
    # t1m1, t1m2, t2m1, t2m2
    np.testing.assert_array_equal(seq, [111, 121, 211, 221])


def test_multi_trajectory_order_with_space():
    seq = tk.flatten_multi_trajectory(labeled_tokens(2, 1, 2))[:, 0]
    np.testing.assert_array_equal(seq, [111, 112, 121, 122])


def test_k1_is_plain_temporal_sequence():
    x = labeled_tokens(1, 4, 1)
    np.testing.assert_array_equal(tk.flatten_spatiotemporal(x)[:, 0], [111, 211, 311, 411])


def test_spatiotemporal_rejects_several_trajectories():
    with pytest.raises(ContractError):
        tk.flatten_spatiotemporal(labeled_tokens(2, 2, 1))


@settings(max_examples=64, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_flatten_roundtrip(m, n, k, d):
    x = np.random.default_rng(m * 64 + n * 16 + k * 4 + d).normal(size=(m, n, k, d))
    seq = tk.flatten_multi_trajectory(x)
    assert seq.shape == (m * n * k, d)
    np.testing.assert_array_equal(tk.unflatten_multi_trajectory(seq, m, k), x)
    if m == 1:
        np.testing.assert_array_equal(tk.flatten_spatiotemporal(x), seq)
        np.testing.assert_array_equal(tk.unflatten_spatiotemporal(seq, k), x[0])


def test_flatten_tensor_and_batch_axis():
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 2, 5))
    a = tk.flatten_multi_trajectory(Tensor(x)).numpy()
    b = tk.flatten_multi_trajectory(x)
    np.testing.assert_allclose(a, b, rtol=1e-6)
    np.testing.assert_array_equal(b[1], tk.flatten_multi_trajectory(x[1]))


def test_spatial_split_shapes_and_degenerate_cases(rng):
    w = Tensor(rng.normal(size=(3, 4 * 32)))
    sp = tk.SpatialSplitter(w, Tensor(np.zeros(4 * 32)), 4)
    assert tk.spatial_split(sp, Tensor(rng.normal(size=(3,)))).shape == (4, 32)
    zero = tk.SpatialSplitter(Tensor(np.zeros((3, 8))), Tensor(np.zeros(8)), 2)
    assert not tk.spatial_split(zero, Tensor(rng.normal(size=(5, 3)))).numpy().any()
    one = tk.SpatialSplitter(Tensor(np.eye(3)), Tensor(np.zeros(3)), 1)
    s = rng.normal(size=(3,))
    np.testing.assert_allclose(tk.spatial_split(one, Tensor(s)).numpy(), s[None], rtol=1e-6)
    with pytest.raises(ShapeError):
        tk.spatial_split(sp, Tensor(np.zeros(4)))


def test_time_grid():
    g = tk.TimeGrid.uniform(5)
    np.testing.assert_allclose(g.points, [0, 0.25, 0.5, 0.75, 1])
    with pytest.raises(ContractError):
        tk.TimeGrid.uniform(1)


def test_trajectory_batch_validates():
    with pytest.raises(ShapeError):
        tk.TrajectoryBatch(np.zeros((2, 3, 2)), tk.TimeGrid.uniform(4))
    with pytest.raises(ContractError):
        tk.TrajectoryBatch(np.full((1, 2, 2), np.nan), tk.TimeGrid.uniform(2))


def test_prompt_encoding(tmp_path):
    vocab = tk.PromptVocab.build(["0", "1", "two words"])
    assert tk.encode_prompt(vocab, None) == [tk.BOS, tk.SEP]
    assert tk.encode_prompt(vocab, "") == [tk.BOS, tk.SEP]
    a = tk.encode_prompt(vocab, "0")
    assert a == tk.encode_prompt(vocab, "0")
    b = tk.encode_prompt(vocab, "1")
    assert len(a) == len(b) and a != b
    assert a[0] == tk.BOS and a[-1] == tk.SEP
    assert len(tk.encode_prompt(vocab, "two words")) == len(a) + 1
    with pytest.raises(VocabularyError):
        tk.encode_prompt(vocab, "7")
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert tk.PromptVocab.load(path).words == vocab.words


def test_vocab_requires_reserved_prefix():
    with pytest.raises(ContractError):
        tk.PromptVocab(["a", "b", "c"])


def test_assemble_without_prompt():
    tokens = Tensor(np.zeros((6, 4)))
    out = tk.assemble_input(None, tokens, k=2)
    assert out.embeddings.shape == (6, 4) and out.prompt_len == 0
    np.testing.assert_array_equal(out.target_mask, [0, 1, 0, 1, 0, 1])


def test_assemble_with_prompt_masks_prompt():
    prompt = Tensor(np.ones((3, 4)))
    tokens = Tensor(np.zeros((5, 4)))
    out = tk.assemble_input(prompt, tokens, k=1)
    assert out.embeddings.shape == (8, 4)
    assert not out.target_mask[:3].any()
    assert out.target_mask[3:].all()
    np.testing.assert_array_equal(np.flatnonzero(out.target_mask), tk.prediction_positions(3, 5, 1))


def test_assemble_too_long_names_required_length():
    with pytest.raises(SequenceLengthError, match="max_seq_len >= 12"):
        tk.assemble_input(Tensor(np.ones((2, 4))), Tensor(np.zeros((10, 4))), k=1, max_seq_len=8)
