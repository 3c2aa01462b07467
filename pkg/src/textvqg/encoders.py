"""Feature extraction for one sample: token, visual, and position vectors.

The three per-sample features are a 512-d recurrent encoding of the OCR
token words, a 512-d precomputed visual vector, and an 8-d normalized
geometry vector.  A fusion network combines them into one 512-d joint
representation that seeds both the reconstruction head and the question
decoder.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .data import BoxGeometry
from .seeding import stable_digest
from .text import tokenize

WORD_VEC_DIM = 300
TOKEN_FEATURE_DIM = 512
VISUAL_FEATURE_DIM = 512
POS_FEATURE_DIM = 8
JOINT_FEATURE_DIM = 512


class WordVectorTable:
    """Pretrained word vectors with a deterministic subword fallback.

    Out-of-table words (proper nouns, OCR noise) get the mean of hashed
    character 3-5 gram vectors drawn from a seed-fixed table, so a word
    maps to the same vector in every process.
    """

    def __init__(self, dim: int = WORD_VEC_DIM, vectors: dict[str, np.ndarray] | None = None,
                 fallback_seed: int = 0):
        self.dim = dim
        self.fallback_seed = fallback_seed
        self._vectors: dict[str, np.ndarray] = {}
        self._gram_cache: dict[str, np.ndarray] = {}
        for word, vec in (vectors or {}).items():
            arr = np.asarray(vec, dtype=np.float32).ravel()
            if arr.size != dim:
                raise ValueError(f"vector for {word!r} has {arr.size} dims, expected {dim}")
            self._vectors[word] = arr

    def __contains__(self, word: str) -> bool:
        return word in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def _gram_vector(self, gram: str) -> np.ndarray:
        cached = self._gram_cache.get(gram)
        if cached is None:
            rng = np.random.default_rng(stable_digest(self.fallback_seed, "gram", gram))
            cached = (rng.standard_normal(self.dim) / np.sqrt(self.dim)).astype(np.float32)
            self._gram_cache[gram] = cached
        return cached

    def _fallback(self, word: str) -> np.ndarray:
        padded = f"<{word}>"
        grams = [padded[i:i + n]
                 for n in (3, 4, 5)
                 for i in range(len(padded) - n + 1)]
        if not grams:
            grams = [padded]
        return np.mean([self._gram_vector(g) for g in grams], axis=0, dtype=np.float32)

    def vector(self, word: str) -> np.ndarray:
        stored = self._vectors.get(word)
        return stored.copy() if stored is not None else self._fallback(word)

    @classmethod
    def load(cls, path, fallback_seed: int = 0) -> "WordVectorTable":
        """Read the text format: header "count dim", then "word v1 ... vD"."""
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: expected 'count dim' header")
            count, dim = int(header[0]), int(header[1])
            vectors = {}
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(" ")
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}:{lineno}: expected word + {dim} floats")
                vectors[parts[0]] = np.array(parts[1:], dtype=np.float32)
        if len(vectors) != count:
            raise ValueError(f"{path}: header says {count} words, found {len(vectors)}")
        return cls(dim=dim, vectors=vectors, fallback_seed=fallback_seed)


def embed_token_words(token, table: WordVectorTable) -> np.ndarray:
    """(num_words, dim) matrix of word vectors for an OCR token's text."""
    words = tokenize(token.text)
    if not words:
        raise ValueError(f"OCR token has no words: {token.text!r}")
    return np.stack([table.vector(w) for w in words])


def _wrap_angle(degrees: float) -> float:
    # Map into (-180, 180] before scaling to [-1, 1].
    return ((degrees + 180.0) % 360.0) - 180.0


def build_positional(box: BoxGeometry, image_w: float, image_h: float) -> np.ndarray:
    """8-d normalized geometry: x, y, w, h over image size, angles over 180.

    The four angle slots stay zero when the OCR source provides only
    axis-aligned boxes.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dims must be positive")
    coords = np.array([box.x / image_w, box.y / image_h,
                       box.w / image_w, box.h / image_h], dtype=np.float32)
    coords = np.clip(coords, 0.0, 1.0)
    if box.has_angles:
        angles = np.array([_wrap_angle(a) / 180.0 for a in box.angles()], dtype=np.float32)
    else:
        angles = np.zeros(4, dtype=np.float32)
    return np.concatenate([coords, angles])


class TokenSequenceEncoder(nn.Module):
    """Bidirectional LSTM over word vectors; output concatenates the final
    hidden states of the forward and backward passes."""

    def __init__(self, word_vec_dim: int = WORD_VEC_DIM, out_dim: int = TOKEN_FEATURE_DIM):
        super().__init__()
        if out_dim % 2 != 0:
            raise ValueError("out_dim must be even (two directions)")
        self.out_dim = out_dim
        self.lstm = nn.LSTM(word_vec_dim, out_dim // 2, batch_first=True, bidirectional=True)

    def forward(self, sequences) -> torch.Tensor:
        """Encode a batch of variable-length word-vector sequences.

        sequences: list of (len_i, word_vec_dim) float tensors, each non-empty.
        Returns (batch, out_dim).
        """
        if isinstance(sequences, torch.Tensor):
            sequences = [sequences] if sequences.dim() == 2 else list(sequences)
        if not sequences:
            raise ValueError("no sequences to encode")
        lengths = [len(s) for s in sequences]
        if min(lengths) == 0:
            raise ValueError("cannot encode an empty word sequence")
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        padded = nn.utils.rnn.pad_sequence(
            [torch.as_tensor(np.asarray(s), dtype=dtype, device=device) for s in sequences],
            batch_first=True)
        packed = nn.utils.rnn.pack_padded_sequence(
            padded, lengths, batch_first=True, enforce_sorted=False)
        _, (h_n, _) = self.lstm(packed)
        # h_n is (2, batch, out_dim/2): forward final state, backward final state.
        return torch.cat([h_n[0], h_n[1]], dim=1)


class FusionNetwork(nn.Module):
    """Two dense layers mapping [token; visual; position] to the joint vector."""

    def __init__(self, token_dim: int = TOKEN_FEATURE_DIM, visual_dim: int = VISUAL_FEATURE_DIM,
                 pos_dim: int = POS_FEATURE_DIM, hidden_dim: int = JOINT_FEATURE_DIM,
                 out_dim: int = JOINT_FEATURE_DIM):
        super().__init__()
        self.token_dim = token_dim
        self.visual_dim = visual_dim
        self.pos_dim = pos_dim
        self.layer1 = nn.Linear(token_dim + visual_dim + pos_dim, hidden_dim)
        self.layer2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, phi_o: torch.Tensor, phi_i: torch.Tensor, phi_p: torch.Tensor) -> torch.Tensor:
        for tensor, dim, name in ((phi_o, self.token_dim, "token"),
                                  (phi_i, self.visual_dim, "visual"),
                                  (phi_p, self.pos_dim, "position")):
            if tensor.shape[-1] != dim:
                raise ValueError(f"{name} feature has dim {tensor.shape[-1]}, expected {dim}")
        # Concatenation order is fixed: token, visual, position.
        joint_in = torch.cat([phi_o, phi_i, phi_p], dim=-1)
        return self.layer2(torch.tanh(self.layer1(joint_in)))
