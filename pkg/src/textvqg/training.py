"""Training loop, checkpoints, and prediction generation for the main model.

All randomness (init, shuffling, fallback word vectors) flows from one
seed through named substreams, so a rerun with the same resolved config
reproduces every artifact byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, Sample
from .encoders import WordVectorTable, build_positional, embed_token_words
from .features import FeatureStore
from .model import LossBreakdown, ModelDims, QuestionGenerator
from .seeding import substream, substream_int
from .text import PAD_ID, Vocabulary, build_vocab, encode_question

PARAMS_FILE = "params.bin"
PARAMS_INDEX_FILE = "params.json"
CONFIG_FILE = "config.json"
VOCAB_FILE = "vocab.json"


class DataResolutionError(Exception):
    """A sample references data (features, side info) that is not available."""


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; defaults follow the full-scale recipe."""

    learning_rate: float = 1e-4
    batch_size: int = 32
    decay: float = 0.05  # per-epoch learning-rate decay: lr / (1 + decay * epoch)
    lam: float = 0.001   # weight of the reconstruction loss
    epochs: int = 10
    max_len: int = 20
    seed: int = 0
    min_count: int = 1
    use_position: bool = True

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.max_len) <= 0:
            raise ValueError("learning_rate, batch_size, epochs, max_len must be positive")
        if self.lam < 0 or self.decay < 0:
            raise ValueError("lambda and decay must be non-negative")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "decay": self.decay,
            "lambda": self.lam,
            "epochs": self.epochs,
            "max_len": self.max_len,
            "seed": self.seed,
            "min_count": self.min_count,
            "use_position": self.use_position,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f: data[f] for f in ("learning_rate", "batch_size", "decay", "epochs",
                                      "max_len", "seed", "min_count", "use_position")
                 if f in data}
        if "lambda" in data:
            known["lam"] = data["lambda"]
        return cls(**known)

    def epoch_lr(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        return self.learning_rate / (1.0 + self.decay * (epoch - 1))


@dataclass
class TrainResult:
    model: QuestionGenerator
    vocab: Vocabulary
    config: TrainConfig
    word_table: WordVectorTable
    log: list[dict] = field(default_factory=list)

    def breakdown(self, epoch: int) -> LossBreakdown:
        rec = self.log[epoch - 1]
        return LossBreakdown(l_q=rec["l_q"], l_a=rec["l_a"], total=rec["total"])


def _sample_arrays(samples, store: FeatureStore, word_table: WordVectorTable,
                   vocab: Vocabulary, max_len: int):
    """Precompute per-sample inputs once; raises when features are missing."""
    arrays = []
    for s in samples:
        if s.image_id not in store:
            raise DataResolutionError(
                f"no visual features for image {s.image_id!r} (question {' '.join(s.question)!r})")
        arrays.append({
            "words": embed_token_words(s.ocr, word_table),
            "visual": store.vector(s.image_id),
            "position": build_positional(s.ocr.box, s.image_w, s.image_h),
            "ids": encode_question(s.question, vocab, max_len),
        })
    return arrays


def _pad_ids(id_seqs) -> np.ndarray:
    width = max(len(ids) for ids in id_seqs)
    out = np.full((len(id_seqs), width), PAD_ID, dtype=np.int64)
    for row, ids in enumerate(id_seqs):
        out[row, :len(ids)] = ids
    return out


def train_question_model(manifest: DatasetManifest, store: FeatureStore,
                         config: TrainConfig, word_table: WordVectorTable | None = None,
                         out_dir=None) -> TrainResult:
    """Train the fusion question generator on the manifest's train split.

    Writes a checkpoint after every epoch (overwriting the previous one)
    and appends one log record per epoch.  Fixed seed means bit-identical
    parameters and logs across reruns.
    """
    samples = manifest.split("train")
    if not samples:
        raise ValueError("manifest has no train samples")
    if word_table is None:
        word_table = WordVectorTable(fallback_seed=substream_int(config.seed, "wordvec"))

    vocab = build_vocab((s.question for s in samples), config.min_count)
    arrays = _sample_arrays(samples, store, word_table, vocab, config.max_len)

    torch.manual_seed(substream_int(config.seed, "init"))
    dims = ModelDims(vocab_size=len(vocab), word_vec_dim=word_table.dim,
                     store_dim=store.dim)
    model = QuestionGenerator(dims)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    shuffle_rng = substream(config.seed, "shuffle")

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "train_log.jsonl" if out_dir else None
    if log_path:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    log: list[dict] = []
    n = len(arrays)
    for epoch in range(1, config.epochs + 1):
        lr = config.epoch_lr(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = shuffle_rng.permutation(n)
        l_q_sum = 0.0
        l_a_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [arrays[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad()
            l_q, l_a = model.batch_losses(
                [b["words"] for b in batch],
                np.stack([b["visual"] for b in batch]),
                np.stack([b["position"] for b in batch]),
                _pad_ids([b["ids"] for b in batch]),
                use_position=config.use_position,
            )
            loss = l_q + config.lam * l_a
            loss.backward()
            optimizer.step()
            breakdown = LossBreakdown.combine(float(l_q), float(l_a), config.lam)
            assert breakdown.total == breakdown.l_q + config.lam * breakdown.l_a
            l_q_sum += breakdown.l_q * len(batch)
            l_a_sum += breakdown.l_a * len(batch)
        l_q_epoch = l_q_sum / n
        l_a_epoch = l_a_sum / n
        record = {
            "epoch": epoch,
            "l_q": l_q_epoch,
            "l_a": l_a_epoch,
            "total": l_q_epoch + config.lam * l_a_epoch,
            "lr": lr,
        }
        log.append(record)
        if log_path:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if out_dir:
            save_checkpoint(out_dir / "checkpoint", model, vocab, config, word_table)

    return TrainResult(model=model, vocab=vocab, config=config,
                       word_table=word_table, log=log)


def generate_question(model: QuestionGenerator, psi, vocab: Vocabulary,
                      max_len: int = 20) -> list[str]:
    """Greedy question for one joint vector; reserved tokens never appear."""
    ids = model.generate_ids(psi, max_len)[0]
    return [vocab.word_for(i) for i in ids]


def _sample_psi(model: QuestionGenerator, sample: Sample, store: FeatureStore,
                word_table: WordVectorTable, use_position: bool) -> torch.Tensor:
    if sample.image_id not in store:
        raise DataResolutionError(f"no visual features for image {sample.image_id!r}")
    phi_o = model.encode_ocr(embed_token_words(sample.ocr, word_table))
    phi_i = model.project_visual(torch.as_tensor(store.vector(sample.image_id)))
    pos = build_positional(sample.ocr.box, sample.image_w, sample.image_h)
    if not use_position:
        pos = np.zeros_like(pos)
    return model.fuse(phi_o, phi_i, pos)


def generate_predictions(model: QuestionGenerator, vocab: Vocabulary,
                         word_table: WordVectorTable, manifest: DatasetManifest,
                         store: FeatureStore, *, split: str = "test",
                         max_len: int = 20, use_position: bool = True,
                         beam_width: int = 1) -> list[dict]:
    """Prediction rows for every sample in the chosen split."""
    rows = []
    model.eval()
    for sample in manifest.split(split):
        psi = _sample_psi(model, sample, store, word_table, use_position)
        if beam_width > 1:
            ids = beam_search(model, psi, max_len, beam_width)
        else:
            ids = model.generate_ids(psi, max_len)[0]
        words = [vocab.word_for(i) for i in ids]
        rows.append({
            "image_id": sample.image_id,
            "ocr_text": sample.ocr.text,
            "generated": " ".join(words),
            "references": [" ".join(sample.question)],
            "answer_word_count": sample.answer_word_count(),
        })
    return rows


def beam_search(model: QuestionGenerator, psi, max_len: int, width: int) -> list[int]:
    """Beam decode one sample; returns the highest-log-probability sequence."""
    from .text import EOS_ID, SOS_ID, UNK_ID

    decoder = model.decoder
    psi = model._tensor(psi, model.dims.joint_dim)
    with torch.no_grad():
        state = decoder._initial_state(psi)
        beams = [([], state, 0.0, False)]  # ids, state, logp, done
        for _ in range(max_len):
            candidates = []
            for ids, state, logp, done in beams:
                if done:
                    candidates.append((ids, state, logp, True))
                    continue
                prev = torch.tensor([ids[-1] if ids else SOS_ID])
                step_in = decoder.embedding(prev).unsqueeze(1)
                step_out, new_state = decoder.lstm(step_in, state)
                logits = decoder.project(step_out.squeeze(1)).squeeze(0)
                logits[[PAD_ID, SOS_ID, UNK_ID]] = float("-inf")
                logprobs = torch.log_softmax(logits, dim=0)
                top = torch.topk(logprobs, min(width, logprobs.shape[0]))
                for score, idx in zip(top.values.tolist(), top.indices.tolist()):
                    if idx == EOS_ID:
                        candidates.append((ids, new_state, logp + score, True))
                    else:
                        candidates.append((ids + [idx], new_state, logp + score, False))
            candidates.sort(key=lambda c: (-c[2], c[0]))
            beams = candidates[:width]
            if all(c[3] for c in beams):
                break
    return beams[0][0]


def write_predictions(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# --- checkpoint serialization (float32 payload + JSON index) ----------------

def _state_records(state: dict) -> tuple[list[dict], np.ndarray]:
    records = []
    parts = []
    offset = 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        records.append({
            "name": name,
            "offset": offset,
            "length": int(arr.size),
            "shape": list(tensor.shape),
        })
        parts.append(arr)
        offset += arr.size
    payload = np.concatenate(parts) if parts else np.empty(0, dtype="<f4")
    return records, payload


def save_checkpoint(directory, model, vocab: Vocabulary, config: TrainConfig,
                    word_table: WordVectorTable, *, kind: str = "olra",
                    extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records, payload = _state_records(model.state_dict())
    with open(directory / PARAMS_INDEX_FILE, "w", encoding="utf-8") as fh:
        json.dump({"records": records}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    payload.tofile(directory / PARAMS_FILE)
    vocab.save(directory / VOCAB_FILE)
    meta = {
        "model": kind,
        "train_config": config.to_dict(),
        "word_vectors": {"dim": word_table.dim, "fallback_seed": word_table.fallback_seed},
        "dims": model.dims.to_dict() if hasattr(model, "dims") else {},
    }
    if extra:
        meta.update(extra)
    with open(directory / CONFIG_FILE, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_state(directory) -> dict[str, torch.Tensor]:
    directory = Path(directory)
    with open(directory / PARAMS_INDEX_FILE, encoding="utf-8") as fh:
        index = json.load(fh)
    payload = np.fromfile(directory / PARAMS_FILE, dtype="<f4")
    state = {}
    for rec in index["records"]:
        chunk = payload[rec["offset"]:rec["offset"] + rec["length"]]
        if chunk.size != rec["length"]:
            raise ValueError(f"checkpoint payload truncated at {rec['name']}")
        state[rec["name"]] = torch.from_numpy(chunk.reshape(rec["shape"]).copy())
    return state


def load_checkpoint(directory) -> TrainResult:
    """Rebuild a trained model bundle from a checkpoint directory."""
    directory = Path(directory)
    with open(directory / CONFIG_FILE, encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("model") != "olra":
        raise ValueError(f"checkpoint at {directory} holds a {meta.get('model')!r} model")
    vocab = Vocabulary.load(directory / VOCAB_FILE)
    config = TrainConfig.from_dict(meta["train_config"])
    dims = ModelDims(**meta["dims"])
    model = QuestionGenerator(dims)
    model.load_state_dict(_load_state(directory))
    model.eval()
    wv = meta["word_vectors"]
    word_table = WordVectorTable(dim=wv["dim"], fallback_seed=wv["fallback_seed"])
    return TrainResult(model=model, vocab=vocab, config=config,
                       word_table=word_table, log=[])
