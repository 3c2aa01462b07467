"""The question generator: fusion, token reconstruction, and decoding.

Training minimizes l_q + lambda * l_a, where l_q is the mean
negative log-likelihood of the ground-truth question under teacher
forcing and l_a is the squared l2 distance between the encoded OCR token
and its reconstruction from the joint vector.  The reconstruction term
pushes the fused representation to keep the answer recoverable.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from .encoders import (
    FusionNetwork,
    JOINT_FEATURE_DIM,
    POS_FEATURE_DIM,
    TOKEN_FEATURE_DIM,
    TokenSequenceEncoder,
    VISUAL_FEATURE_DIM,
    WORD_VEC_DIM,
)
from .text import EOS_ID, PAD_ID, SOS_ID, UNK_ID


@dataclass(frozen=True)
class ModelDims:
    """Layer sizes; defaults are the full-scale configuration."""

    vocab_size: int
    word_vec_dim: int = WORD_VEC_DIM
    token_dim: int = TOKEN_FEATURE_DIM
    visual_dim: int = VISUAL_FEATURE_DIM
    store_dim: int = VISUAL_FEATURE_DIM  # raw feature-store dim; projected if different
    pos_dim: int = POS_FEATURE_DIM
    joint_dim: int = JOINT_FEATURE_DIM
    embed_dim: int = WORD_VEC_DIM

    def to_dict(self) -> dict:
        return asdict(self)


def consistency_loss(phi_o: torch.Tensor, phi_o_hat: torch.Tensor) -> torch.Tensor:
    """Squared l2 distance between token feature and its reconstruction.

    Batched inputs reduce by mean over the batch so the weight of the term
    does not scale with batch size.
    """
    if phi_o.shape != phi_o_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(phi_o.shape)} vs {tuple(phi_o_hat.shape)}")
    sq = ((phi_o - phi_o_hat) ** 2).sum(dim=-1)
    return sq.mean() if sq.dim() > 0 else sq


def total_loss(l_q, l_a, lam: float):
    """Combined objective l_q + lam * l_a."""
    return l_q + lam * l_a


@dataclass(frozen=True)
class LossBreakdown:
    l_q: float
    l_a: float
    total: float

    @classmethod
    def combine(cls, l_q: float, l_a: float, lam: float) -> "LossBreakdown":
        return cls(l_q=l_q, l_a=l_a, total=total_loss(l_q, l_a, lam))


class ReconstructionHead(nn.Module):
    """Two dense layers recovering the token feature from the joint vector."""

    def __init__(self, joint_dim: int = JOINT_FEATURE_DIM, hidden_dim: int = JOINT_FEATURE_DIM,
                 out_dim: int = TOKEN_FEATURE_DIM):
        super().__init__()
        self.layer1 = nn.Linear(joint_dim, hidden_dim)
        self.layer2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, psi: torch.Tensor) -> torch.Tensor:
        return self.layer2(torch.tanh(self.layer1(psi)))


class SequenceDecoder(nn.Module):
    """One-layer recurrent word emitter shared by all generators.

    The initial recurrent state is supplied by the caller; each step
    consumes the embedding of the previous word and predicts the next.
    """

    def __init__(self, vocab_size: int, embed_dim: int = WORD_VEC_DIM,
                 hidden_dim: int = JOINT_FEATURE_DIM, cell: str = "lstm"):
        super().__init__()
        if cell not in ("lstm", "gru"):
            raise ValueError(f"unknown cell {cell!r}")
        self.vocab_size = vocab_size
        self.cell = cell
        self.embedding = nn.Embedding(vocab_size, embed_dim, padding_idx=PAD_ID)
        rnn_cls = nn.LSTM if cell == "lstm" else nn.GRU
        self.rnn = rnn_cls(embed_dim, hidden_dim, batch_first=True)
        self.project = nn.Linear(hidden_dim, vocab_size)

    def state_from_vector(self, h0: torch.Tensor):
        """Recurrent state seeded by a (batch, hidden) vector.

        For the LSTM the vector seeds the hidden state and the cell state
        starts at zero.
        """
        h0 = h0.unsqueeze(0)
        return (h0, torch.zeros_like(h0)) if self.cell == "lstm" else h0

    def teacher_nll(self, state, ids: torch.Tensor) -> torch.Tensor:
        """Mean per-token NLL of the ground-truth continuation.

        ids: (batch, steps) padded id matrix, each row <sos> ... <eos> <pad>*.
        Inputs are ids[:, :-1], targets ids[:, 1:]; pad targets are ignored.
        """
        if ids.shape[1] < 2:
            raise ValueError("sequences must hold at least <sos> and <eos>")
        inputs = self.embedding(ids[:, :-1])
        outputs, _ = self.rnn(inputs, state)
        logits = self.project(outputs)
        return nn.functional.cross_entropy(
            logits.reshape(-1, self.vocab_size),
            ids[:, 1:].reshape(-1),
            ignore_index=PAD_ID,
        )

    def greedy(self, state, batch: int, max_len: int) -> list[list[int]]:
        """Greedy id sequences; reserved ids other than <eos> never appear."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        device = next(self.parameters()).device
        blocked = torch.full((self.vocab_size,), False, device=device)
        blocked[[PAD_ID, SOS_ID, UNK_ID]] = True
        prev = torch.full((batch,), SOS_ID, dtype=torch.long, device=device)
        done = torch.zeros(batch, dtype=torch.bool, device=device)
        out: list[list[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            step_in = self.embedding(prev).unsqueeze(1)
            step_out, state = self.rnn(step_in, state)
            logits = self.project(step_out.squeeze(1))
            logits[:, blocked] = float("-inf")
            prev = logits.argmax(dim=1)
            for b in range(batch):
                if done[b]:
                    continue
                if prev[b].item() == EOS_ID:
                    done[b] = True
                else:
                    out[b].append(int(prev[b].item()))
            if bool(done.all()):
                break
        return out


class QuestionGenerator(nn.Module):
    """Full model: token encoder, fusion, reconstruction head, decoder."""

    def __init__(self, dims: ModelDims):
        super().__init__()
        self.dims = dims
        self.token_encoder = TokenSequenceEncoder(dims.word_vec_dim, dims.token_dim)
        self.visual_proj = (nn.Linear(dims.store_dim, dims.visual_dim)
                            if dims.store_dim != dims.visual_dim else None)
        self.fusion = FusionNetwork(dims.token_dim, dims.visual_dim, dims.pos_dim,
                                    hidden_dim=dims.joint_dim, out_dim=dims.joint_dim)
        self.recon_head = ReconstructionHead(dims.joint_dim, dims.joint_dim, dims.token_dim)
        self.decoder = SequenceDecoder(dims.vocab_size, dims.embed_dim, dims.joint_dim)

    def _tensor(self, value, dim: int) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        t = torch.as_tensor(np.asarray(value), dtype=dtype)
        if t.dim() == 1:
            t = t.unsqueeze(0)
        if t.shape[-1] != dim:
            raise ValueError(f"expected trailing dim {dim}, got {t.shape[-1]}")
        return t

    def encode_ocr(self, word_vectors) -> torch.Tensor:
        """Token feature(s) from word-vector sequence(s)."""
        return self.token_encoder(word_vectors)

    def project_visual(self, raw: torch.Tensor) -> torch.Tensor:
        raw = self._tensor(raw, self.dims.store_dim)
        return self.visual_proj(raw) if self.visual_proj is not None else raw

    def fuse(self, phi_o, phi_i, phi_p) -> torch.Tensor:
        """Joint vector from the three per-sample features."""
        return self.fusion(self._tensor(phi_o, self.dims.token_dim),
                           self._tensor(phi_i, self.dims.visual_dim),
                           self._tensor(phi_p, self.dims.pos_dim))

    def reconstruct_ocr(self, psi) -> torch.Tensor:
        """Reconstructed token feature from the joint vector."""
        return self.recon_head(self._tensor(psi, self.dims.joint_dim))

    def question_nll(self, psi, ids) -> torch.Tensor:
        """Teacher-forced mean NLL; ids is a padded (batch, steps) matrix."""
        ids = torch.as_tensor(np.asarray(ids), dtype=torch.long)
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        return self.decoder.teacher_nll(self._tensor(psi, self.dims.joint_dim), ids)

    def generate_ids(self, psi, max_len: int) -> list[list[int]]:
        with torch.no_grad():
            return self.decoder.greedy(self._tensor(psi, self.dims.joint_dim), max_len)

    def batch_losses(self, word_vector_seqs, visual, positional, ids,
                     use_position: bool = True):
        """(l_q, l_a) tensors for one batch of samples."""
        phi_o = self.encode_ocr(word_vector_seqs)
        phi_i = self.project_visual(visual)
        phi_p = self._tensor(positional, self.dims.pos_dim)
        if not use_position:
            phi_p = torch.zeros_like(phi_p)
        psi = self.fuse(phi_o, phi_i, phi_p)
        l_q = self.question_nll(psi, ids)
        l_a = consistency_loss(phi_o, self.reconstruct_ocr(psi))
        return l_q, l_a
