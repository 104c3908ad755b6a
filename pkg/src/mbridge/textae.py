"""Sequence auto-encoder: a 2-layer LSTM encoder compresses a caption
into one fixed-width code u_g (the top layer's final hidden state), and a
2-layer LSTM decoder reconstructs the caption from it under teacher
forcing.

Once trained, the encoder side is frozen and supplies the targets that
the vision-side projector learns to hit. Conventions: the encoder
consumes content tokens (no sentence markers); the decoder works on the
marked form <bos> ... <eos>, with u_g initializing both decoder layers'
hidden states (cell states start at zero) and additionally appended to
the token embedding at every step, so each prediction is conditioned on
the code directly rather than only through the recurrence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import RunConfig
from .numcore import (
    AdamOptimizer,
    LstmParams,
    Parameter,
    Tensor,
    init_lstm,
    lstm_cell,
    lstm_forward_np,
)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


@dataclass(frozen=True)
class Vocabulary:
    """Token table with ids 0..3 reserved for the special markers."""
    id_to_token: tuple[str, ...]

    @classmethod
    def build(cls, captions) -> "Vocabulary":
        words = sorted({t for cap in captions for t in cap} - set(RESERVED))
        return cls(RESERVED + tuple(words))

    def __post_init__(self):
        if len(self.id_to_token) < 5:
            raise ValueError("vocabulary needs at least one non-reserved token")
        if self.id_to_token[:4] != RESERVED:
            raise ValueError(f"ids 0..3 must be {RESERVED}")
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.id_to_token)}

    def ids_of(self, tokens) -> list[int]:
        """Map tokens to ids; unseen tokens become <unk>."""
        table = self.token_to_id
        return [table.get(t, UNK_ID) for t in tokens]

    def tokens_of(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass
class AutoEncoderModel:
    vocab: Vocabulary
    embedding: Parameter
    enc1: LstmParams
    enc2: LstmParams
    dec1: LstmParams
    dec2: LstmParams
    w_out: Parameter
    b_out: Parameter
    max_len: int

    @property
    def d_e(self) -> int:
        return self.enc2.hidden_dim

    def parameters(self) -> list[Parameter]:
        return ([self.embedding] + self.enc1.parameters() + self.enc2.parameters()
                + self.dec1.parameters() + self.dec2.parameters()
                + [self.w_out, self.b_out])


def init_autoencoder(vocab: Vocabulary, d_e: int, d_emb: int, max_len: int,
                     rng: np.random.Generator, init_scale: float = 0.08) -> AutoEncoderModel:
    u = lambda *s: rng.uniform(-init_scale, init_scale, size=s)
    return AutoEncoderModel(
        vocab=vocab,
        embedding=Parameter("ae.embedding", u(len(vocab), d_emb)),
        enc1=init_lstm("ae.enc1", d_emb, d_e, rng, init_scale),
        enc2=init_lstm("ae.enc2", d_e, d_e, rng, init_scale),
        dec1=init_lstm("ae.dec1", d_emb + d_e, d_e, rng, init_scale),
        dec2=init_lstm("ae.dec2", d_e, d_e, rng, init_scale),
        w_out=Parameter("ae.w_out", u(d_e, len(vocab))),
        b_out=Parameter("ae.b_out", u(len(vocab))),
        max_len=max_len,
    )


def _content_array(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1:
        raise ValueError(f"token ids must be 1-d, got shape {arr.shape}")
    return arr


def encode(model: AutoEncoderModel, ids) -> Tensor:
    """u_g for one sequence of content token ids; trailing <pad> entries
    are skipped, so padded and unpadded forms encode identically."""
    arr = _content_array(ids)
    real = int((arr != PAD_ID).sum())
    if real == 0:
        raise ValueError("encode needs at least one non-pad token")
    if real > model.max_len:
        raise ValueError(f"sequence length {real} exceeds max_len {model.max_len}")
    d = model.d_e
    h1 = c1 = h2 = c2 = np.zeros((1, d))
    for tid in arr:
        if tid == PAD_ID:
            continue
        x = model.embedding.value[tid][None, :]
        h1, c1 = lstm_forward_np(model.enc1, x, h1, c1)
        h2, c2 = lstm_forward_np(model.enc2, h1, h2, c2)
    return Tensor(h2[0].copy())


def encode_batch(model: AutoEncoderModel, ids_list) -> np.ndarray:
    """Stack of u_g codes, one row per sequence (plain arrays, no graph)."""
    if not ids_list:
        return np.zeros((0, model.d_e))
    enc_in, enc_mask = pad_batch([list(s) for s in ids_list])
    b, d = enc_in.shape[0], model.d_e
    h1 = c1 = h2 = c2 = np.zeros((b, d))
    for t in range(enc_in.shape[1]):
        x = model.embedding.value[enc_in[:, t]]
        m = enc_mask[:, t][:, None]
        h1n, c1n = lstm_forward_np(model.enc1, x, h1, c1)
        h2n, c2n = lstm_forward_np(model.enc2, h1n, h2, c2)
        h1 = m * h1n + (1.0 - m) * h1
        c1 = m * c1n + (1.0 - m) * c1
        h2 = m * h2n + (1.0 - m) * h2
        c2 = m * c2n + (1.0 - m) * c2
    return h2


def pad_batch(ids_list: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences with <pad>; returns (ids, mask) as (B, L)."""
    width = max(len(s) for s in ids_list)
    ids = np.full((len(ids_list), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(ids_list), width))
    for i, s in enumerate(ids_list):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def _graph_encode(model: AutoEncoderModel, enc_in: np.ndarray,
                  enc_mask: np.ndarray) -> Tensor:
    b, d = enc_in.shape[0], model.d_e
    h1 = c1 = h2 = c2 = Tensor(np.zeros((b, d)))
    for t in range(enc_in.shape[1]):
        x = nc.take_rows(model.embedding.tensor(), enc_in[:, t])
        m = enc_mask[:, t]
        h1, c1 = lstm_cell(x, h1, c1, model.enc1, mask=m)
        h2, c2 = lstm_cell(h1, h2, c2, model.enc2, mask=m)
    return h2


def teacher_forced_loss(model: AutoEncoderModel, states: Tensor,
                        targets: np.ndarray, mask: np.ndarray) -> tuple[Tensor, int]:
    """Summed cross-entropy over real positions given stacked decoder
    states.

    states is (T*B, d_e) with step-major row order; targets and mask are
    (B, T). Projection and loss run as single fused ops over all steps.
    Returns the unnormalized loss and the count of real tokens.
    """
    logits = nc.add_bias(nc.matmul(states, model.w_out.tensor()),
                         model.b_out.tensor())
    total = nc.cross_entropy_rows(logits, targets.T.reshape(-1),
                                  weights=mask.T.reshape(-1))
    return total, int(mask.sum())


def _graph_decode_states(model: AutoEncoderModel, u_g: Tensor,
                         dec_in: np.ndarray, dec_mask: np.ndarray) -> Tensor:
    """Top-layer decoder hidden states stacked step-major into (T*B, d_e)."""
    b, d = dec_in.shape[0], model.d_e
    h1 = h2 = u_g
    c1 = c2 = Tensor(np.zeros((b, d)))
    states = []
    for t in range(dec_in.shape[1]):
        x = nc.concat_cols(nc.take_rows(model.embedding.tensor(), dec_in[:, t]), u_g)
        m = dec_mask[:, t]
        h1, c1 = lstm_cell(x, h1, c1, model.dec1, mask=m)
        h2, c2 = lstm_cell(h1, h2, c2, model.dec2, mask=m)
        states.append(h2)
    return nc.concat_rows(states)


def decode_train(model: AutoEncoderModel, u_g, marked_ids) -> Tensor:
    """Mean per-token teacher-forced loss for one sequence in decoder
    form (<bos> w_1 ... w_N <eos>); u_g may carry gradient."""
    arr = _content_array(marked_ids)
    if arr.size < 2 or arr[0] != BOS_ID or arr[-1] != EOS_ID:
        raise ValueError("decoder sequence must be <bos> ... <eos> with a body")
    u = nc.constant(u_g)
    if u.shape != (model.d_e,):
        raise ValueError(f"u_g shape {u.shape} does not match d_e={model.d_e}")
    dec_in = arr[:-1][None, :]
    dec_tgt = arr[1:][None, :]
    mask = np.ones_like(dec_tgt, dtype=np.float64)
    states = _graph_decode_states(model, nc.reshape(u, (1, model.d_e)), dec_in, mask)
    total, n_tok = teacher_forced_loss(model, states, dec_tgt, mask)
    return nc.scale(total, 1.0 / n_tok)


def reconstruct(model: AutoEncoderModel, u_g) -> list[int]:
    """Greedy decode from a code: argmax each step (ties take the lowest
    id), stop on <eos> or after max_len emissions. Returns emitted ids
    without the terminating <eos>."""
    u = u_g.data if isinstance(u_g, Tensor) else np.asarray(u_g, dtype=np.float64)
    h1 = h2 = u[None, :].copy()
    c1 = c2 = np.zeros((1, model.d_e))
    token = BOS_ID
    out: list[int] = []
    for _ in range(model.max_len):
        x = np.concatenate([model.embedding.value[token], u])[None, :]
        h1, c1 = lstm_forward_np(model.dec1, x, h1, c1)
        h2, c2 = lstm_forward_np(model.dec2, h1, h2, c2)
        logits = h2[0] @ model.w_out.value + model.b_out.value
        token = int(np.argmax(logits))
        if token == EOS_ID:
            break
        out.append(token)
    return out


def reconstruct_batch(model: AutoEncoderModel, u_g: np.ndarray) -> list[list[int]]:
    """Greedy decode for many codes at once; same contract as
    ``reconstruct`` row by row."""
    b = u_g.shape[0]
    h1 = h2 = u_g.copy()
    c1 = c2 = np.zeros((b, model.d_e))
    tokens = np.full(b, BOS_ID, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    out: list[list[int]] = [[] for _ in range(b)]
    for _ in range(model.max_len):
        x = np.concatenate([model.embedding.value[tokens], u_g], axis=1)
        h1, c1 = lstm_forward_np(model.dec1, x, h1, c1)
        h2, c2 = lstm_forward_np(model.dec2, h1, h2, c2)
        logits = h2 @ model.w_out.value + model.b_out.value
        tokens = np.argmax(logits, axis=1)
        for i in range(b):
            if done[i]:
                continue
            if tokens[i] == EOS_ID:
                done[i] = True
            else:
                out[i].append(int(tokens[i]))
        if done.all():
            break
    return out


def token_accuracy(model: AutoEncoderModel, ids_list: list[list[int]]) -> float:
    """Pooled fraction of caption positions the greedy reconstruction
    gets right; length mismatches count against the longer side."""
    codes = encode_batch(model, ids_list)
    recon = reconstruct_batch(model, codes)
    hits = 0
    total = 0
    for gold, got in zip(ids_list, recon):
        total += max(len(gold), len(got))
        hits += sum(1 for a, b in zip(gold, got) if a == b)
    return hits / total if total else 0.0


def read_captions_jsonl(path: str) -> list[list[str]]:
    """Pull the "caption" field from each JSONL record."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append([str(t) for t in json.loads(line)["caption"]])
    return out


def train_autoencoder(captions: list[list[str]], cfg: RunConfig,
                      model: AutoEncoderModel | None = None,
                      opt: AdamOptimizer | None = None,
                      start_epoch: int = 0,
                      rng: np.random.Generator | None = None,
                      trace: list[float] | None = None,
                      ) -> tuple[AutoEncoderModel, list[float], AdamOptimizer, np.random.Generator]:
    """Train the auto-encoder on caption token lists.

    Fresh runs build the vocabulary from the captions and draw the model
    from a generator seeded by cfg.seed; passing model/opt/rng/start_epoch
    resumes mid-run with an identical update sequence. The returned trace
    holds per-epoch mean loss per token. Training may stop early once
    cfg.early_stop_token_acc is reached (checked every five epochs).
    """
    if not captions:
        raise ValueError("empty caption corpus")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, 11])
    if model is None:
        vocab = Vocabulary.build(captions)
        model = init_autoencoder(vocab, cfg.d_e, cfg.d_emb, cfg.max_len, rng)
    if opt is None:
        opt = AdamOptimizer(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
    trace = list(trace) if trace else []

    content = [model.vocab.ids_of(c) for c in captions]
    for s in content:
        if not 1 <= len(s) <= cfg.max_len:
            raise ValueError(f"caption length {len(s)} outside 1..{cfg.max_len}")
    enc_in, enc_mask = pad_batch(content)
    dec_in, _ = pad_batch([[BOS_ID] + s for s in content])
    dec_tgt, dec_mask = pad_batch([s + [EOS_ID] for s in content])
    n = len(content)

    for epoch in range(start_epoch, cfg.epochs):
        opt.set_lr(cfg.lr_at(epoch))
        perm = rng.permutation(n)
        loss_sum = 0.0
        tok_sum = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            u_g = _graph_encode(model, enc_in[idx], enc_mask[idx])
            states = _graph_decode_states(model, u_g, dec_in[idx], dec_mask[idx])
            total, n_tok = teacher_forced_loss(model, states, dec_tgt[idx], dec_mask[idx])
            loss = nc.scale(total, 1.0 / n_tok)
            loss.backward()
            opt.step()
            opt.zero_grad()
            loss_sum += total.item()
            tok_sum += n_tok
        trace.append(loss_sum / tok_sum)
        if (cfg.early_stop_token_acc is not None and epoch % 5 == 4
                and token_accuracy(model, content) >= cfg.early_stop_token_acc):
            break
    return model, trace, opt, rng
