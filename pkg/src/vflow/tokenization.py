"""Trajectory and prompt tokenization.

Trajectory tensors use the layout ``(..., M, N, K, d)``: trajectories, time
points, spatial tokens, feature width. Flattening puts time outermost; inside a
time point each trajectory contributes its K spatial tokens in turn.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, SequenceLengthError, ShapeError, VocabularyError
from .tensor import Tensor

PAD, BOS, SEP = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<sep>")
PROMPT_TEMPLATE = "generate class {label} :"


@dataclass(frozen=True)
class TimeGrid:
    points: np.ndarray

    @classmethod
    def uniform(cls, n: int) -> "TimeGrid":
        if n < 2:
            raise ContractError(f"a time grid needs at least 2 points, got {n}")
        return cls(np.linspace(0.0, 1.0, n))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)


@dataclass
class TrajectoryBatch:
    states: np.ndarray  # (M, N, D)
    grid: TimeGrid

    def __post_init__(self):
        if self.states.ndim != 3:
            raise ShapeError(f"states must be (M, N, D), got {self.states.shape}")
        if self.states.shape[1] != len(self.grid):
            raise ShapeError(f"{self.states.shape[1]} time points but grid has {len(self.grid)}")
        if not np.isfinite(self.states).all():
            raise ContractError("trajectory states contain NaN or Inf")


# ---------------------------------------------------------------------------
# Spatial splitting
# ---------------------------------------------------------------------------


@dataclass
class SpatialSplitter:
    """Learned affine map from a D_in state to K tokens of width d_token."""

    weight: Tensor  # (D_in, K * d_token)
    bias: Tensor  # (K * d_token,)
    k: int

    @property
    def d_token(self) -> int:
        return self.weight.shape[1] // self.k

    @classmethod
    def from_params(cls, params: dict, k: int) -> "SpatialSplitter":
        return cls(params["split.w"], params["split.b"], k)


def splitter_shapes(d_in: int, k: int, d_token: int) -> dict[str, tuple[int, ...]]:
    return {"split.w": (d_in, k * d_token), "split.b": (k * d_token,)}


def spatial_split(splitter: SpatialSplitter, state: Tensor) -> Tensor:
    """Map states ``(..., D_in)`` to tokens ``(..., K, d_token)``."""
    if state.shape[-1] != splitter.weight.shape[0]:
        raise ShapeError(f"spatial_split: shapes {state.shape} and {splitter.weight.shape} are not conformable")
    out = T.linear(state, splitter.weight, splitter.bias)
    return T.reshape(out, state.shape[:-1] + (splitter.k, splitter.d_token))


# ---------------------------------------------------------------------------
# Flattening
# ---------------------------------------------------------------------------


def _transpose(x, axes):
    return T.transpose(x, axes) if isinstance(x, Tensor) else np.transpose(x, axes)


def _reshape(x, shape):
    return T.reshape(x, shape) if isinstance(x, Tensor) else np.reshape(x, shape)


def flatten_multi_trajectory(tokens):
    """``(..., M, N, K, d)`` -> ``(..., N*M*K, d)``, time outermost."""
    if tokens.ndim < 4:
        raise ShapeError(f"expected (..., M, N, K, d), got {tokens.shape}")
    lead = tokens.shape[:-4]
    m, n, k, d = tokens.shape[-4:]
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2, nl + 3)
    return _reshape(_transpose(tokens, axes), lead + (n * m * k, d))


def unflatten_multi_trajectory(seq, m: int, k: int):
    """Inverse of :func:`flatten_multi_trajectory`."""
    lead = seq.shape[:-2]
    length, d = seq.shape[-2:]
    if length % (m * k):
        raise ShapeError(f"sequence of length {length} does not split into M={m}, K={k} groups")
    n = length // (m * k)
    nl = len(lead)
    x = _reshape(seq, lead + (n, m, k, d))
    axes = tuple(range(nl)) + (nl + 1, nl, nl + 2, nl + 3)
    return _transpose(x, axes)


def flatten_spatiotemporal(tokens):
    """Single trajectory ``(..., 1, N, K, d)`` or ``(N, K, d)`` -> ``(..., N*K, d)``."""
    if tokens.ndim == 3:
        n, k, d = tokens.shape
        return _reshape(tokens, (n * k, d))
    if tokens.shape[-4] != 1:
        raise ContractError(
            f"flatten_spatiotemporal needs M == 1, got M={tokens.shape[-4]}; "
            "use flatten_multi_trajectory")
    return flatten_multi_trajectory(tokens)


def unflatten_spatiotemporal(seq, k: int):
    """Inverse of :func:`flatten_spatiotemporal` for the ``(N, K, d)`` form."""
    length, d = seq.shape[-2:]
    if length % k:
        raise ShapeError(f"sequence of length {length} does not split into K={k} tokens")
    return _reshape(seq, seq.shape[:-2] + (length // k, k, d))


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


@dataclass
class PromptVocab:
    words: list[str] = field(default_factory=list)  # id -> word, reserved first

    def __post_init__(self):
        if not self.words:
            self.words = list(RESERVED)
        if tuple(self.words[:3]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ContractError("vocabulary contains duplicate words")

    @classmethod
    def build(cls, labels: Iterable[str]) -> "PromptVocab":
        words = set(PROMPT_TEMPLATE.replace("{label}", "").split())
        for label in labels:
            words.update(str(label).split())
        return cls(list(RESERVED) + sorted(words))

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the prompt vocabulary") from None

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PromptVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([w for w in lines if w])


def _label_text(labels) -> str:
    if labels is None:
        return ""
    if isinstance(labels, str):
        return labels.strip()
    if isinstance(labels, dict):
        return " ".join(str(labels[key]) for key in sorted(labels))
    return " ".join(str(x) for x in labels)


def encode_prompt(vocab: PromptVocab, labels) -> list[int]:
    """``[BOS, <template words>, SEP]``; an empty condition gives ``[BOS, SEP]``."""
    text = _label_text(labels)
    if not text:
        return [BOS, SEP]
    words = PROMPT_TEMPLATE.format(label=text).split()
    return [BOS] + [vocab.id(w) for w in words] + [SEP]


@dataclass
class AssembledInput:
    embeddings: Tensor  # (..., P + L, d)
    target_mask: np.ndarray  # (P + L,) bool
    prompt_len: int


def prediction_positions(prompt_len: int, n_groups: int, k: int) -> np.ndarray:
    """Sequence positions read out for next-state predictions: the last spatial token of each group."""
    return prompt_len + k * np.arange(n_groups) + (k - 1)


def assemble_input(prompt_embeddings: Tensor | None, trajectory_tokens: Tensor, k: int,
                   max_seq_len: int | None = None) -> AssembledInput:
    """Prepend prompt embeddings to trajectory tokens and build the target mask.

    Every group of ``k`` consecutive trajectory tokens (one state of one
    trajectory at one time) emits a single prediction, read at its last token.
    Prompt positions never carry a target.
    """
    p = 0 if prompt_embeddings is None else prompt_embeddings.shape[-2]
    length = trajectory_tokens.shape[-2]
    if length % k:
        raise ShapeError(f"{length} trajectory tokens do not split into groups of K={k}")
    total = p + length
    if max_seq_len is not None and total > max_seq_len:
        raise SequenceLengthError(
            f"prompt ({p}) + trajectory ({length}) tokens need max_seq_len >= {total}, have {max_seq_len}")
    mask = np.zeros(total, dtype=bool)
    mask[prediction_positions(p, length // k, k)] = True
    emb = trajectory_tokens if prompt_embeddings is None else T.concat(
        [prompt_embeddings, trajectory_tokens], axis=-2)
    return AssembledInput(emb, mask, p)


def vocab_for_labels(label_sets: Sequence[Iterable[str]]) -> PromptVocab:
    labels: set[str] = set()
    for ls in label_sets:
        labels.update(ls)
    return PromptVocab.build(labels)
