"""Caption decoder driven by a translated scene code.

The pooled region features pass through the vision-to-text projector
and enter a single-layer LSTM decoder as its first input, through a
learned bridge that maps the code into the word-embedding space; the
hidden state starts at zero. Optional additive attention feeds a
weighted region mix alongside each word embedding. Training combines
teacher-forced cross-entropy with the modality distance between the
projected code and the frozen text autoencoder's code for the same
caption; the two terms add with no weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .metrics import EvalCorpus, EvalReport, evaluate
from .mtm import MtmModel, init_mtm, modality_loss, pool_regions, pool_regions_batch, project
from .numcore import (AdamOptimizer, DimensionError, LstmParams, Parameter, Tensor,
                      TrainingError, init_lstm, log_softmax_rows_np, lstm_cell,
                      lstm_forward_np)
from .config import RunConfig
from .synthdata import CaptionSample
from .textae import EOS_ID, PAD_ID, AutoEncoderModel, Vocabulary, encode, encode_batch, pad_batch


@dataclass
class AttentionParams:
    """Additive scorer over region rows: v . tanh(W_v r + W_h h + b)."""
    w_h: Parameter
    w_v: Parameter
    b: Parameter
    v: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.w_h, self.w_v, self.b, self.v]


@dataclass
class CaptionerModel:
    """Word embeddings, code bridge, decoder LSTM, and output projection.

    The bridge output replaces the step-0 word embedding, so its width
    must equal the embedding width.
    """
    vocab: Vocabulary
    embedding: Parameter
    bridge_w: Parameter
    bridge_b: Parameter
    dec: LstmParams
    att: AttentionParams | None
    w_out: Parameter
    b_out: Parameter
    max_len: int

    def __post_init__(self):
        if self.bridge_w.shape[1] != self.embedding.shape[1]:
            raise DimensionError(
                f"bridge output width {self.bridge_w.shape[1]} must match "
                f"embedding width {self.embedding.shape[1]}")

    @property
    def d_h(self) -> int:
        return self.dec.hidden_dim

    @property
    def d_emb(self) -> int:
        return self.embedding.shape[1]

    def parameters(self) -> list[Parameter]:
        out = [self.embedding, self.bridge_w, self.bridge_b, *self.dec.parameters()]
        if self.att is not None:
            out += self.att.parameters()
        return out + [self.w_out, self.b_out]


@dataclass
class TrainStepReport:
    """Loss terms for one training sample; total is their plain sum."""
    ce_loss: float
    modality_loss: float
    total: float


def init_captioner(vocab: Vocabulary, d_in: int, d_emb: int, d_h: int,
                   max_len: int, rng: np.random.Generator, attention: bool = True,
                   d_v: int = 32, d_a: int = 32,
                   init_scale: float = 0.08) -> CaptionerModel:
    """Uniform-random captioner; d_in is the width of the code the bridge
    consumes (the text-code width, or the region width when the decoder
    runs straight off pooled vision features)."""
    u = lambda *s: rng.uniform(-init_scale, init_scale, size=s)
    att = None
    if attention:
        att = AttentionParams(
            w_h=Parameter("cap.att.w_h", u(d_h, d_a)),
            w_v=Parameter("cap.att.w_v", u(d_v, d_a)),
            b=Parameter("cap.att.b", u(d_a)),
            v=Parameter("cap.att.v", u(d_a)),
        )
    return CaptionerModel(
        vocab=vocab,
        embedding=Parameter("cap.embedding", u(len(vocab), d_emb)),
        bridge_w=Parameter("cap.bridge_w", u(d_in, d_emb)),
        bridge_b=Parameter("cap.bridge_b", u(d_emb)),
        dec=init_lstm("cap.dec", d_emb + (d_v if attention else 0), d_h, rng, init_scale),
        att=att,
        w_out=Parameter("cap.w_out", u(d_h, len(vocab))),
        b_out=Parameter("cap.b_out", u(len(vocab))),
        max_len=max_len,
    )


def pad_regions(features_list) -> tuple[np.ndarray, np.ndarray]:
    """Stack per-sample (K_i, d_v) arrays into (B, K_max, d_v) plus a
    mask of real rows; padding rows are zero."""
    feats = [np.asarray(f, dtype=np.float64) for f in features_list]
    k_max = max(f.shape[0] for f in feats)
    regions = np.zeros((len(feats), k_max, feats[0].shape[1]))
    mask = np.zeros((len(feats), k_max))
    for i, f in enumerate(feats):
        regions[i, :f.shape[0]] = f
        mask[i, :f.shape[0]] = 1.0
    return regions, mask


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _attend_batch(att: AttentionParams, h: Tensor, regions: np.ndarray,
                  region_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Batched additive attention: h (B, d_h), regions (B, K, d_v).

    Returns (context (B, d_v), weights (B, K)). Masked rows get a -1e30
    score shift, which underflows to exactly zero weight after the
    max-shifted softmax.
    """
    bsz, k, d_v = regions.shape
    flat = nc.matmul(nc.constant(regions.reshape(bsz * k, d_v)), att.w_v.tensor())
    proj_h = nc.repeat_rows(nc.matmul(h, att.w_h.tensor()), k)
    e = nc.tanh(nc.add_bias(nc.add(flat, proj_h), att.b.tensor()))
    scores = nc.matmul(e, nc.reshape(att.v.tensor(), (att.v.shape[0], 1)))
    scores = nc.reshape(scores, (bsz, k))
    penalty = np.where(region_mask > 0.0, 0.0, -1e30)
    weights = nc.row_softmax(nc.add(scores, nc.constant(penalty)))
    return nc.region_weighted_sum(weights, regions), weights


def attend(att: AttentionParams, h, regions) -> tuple[Tensor, Tensor]:
    """Context vector and softmax weights for one decoder state.

    h: (d_h,); regions: (K, d_v). The context is the weight-mixed region
    row, concatenated to the word embedding at each decode step.
    """
    th = nc.constant(h)
    reg = np.asarray(regions, dtype=np.float64)
    if th.ndim != 1 or reg.ndim != 2:
        raise DimensionError(
            f"attend: expected state (d_h,) and regions (K, d_v), got {th.shape} and {reg.shape}")
    ctx, w = _attend_batch(att, nc.reshape(th, (1, th.shape[0])),
                           reg[None, :, :], np.ones((1, reg.shape[0])))
    return nc.reshape(ctx, (reg.shape[1],)), nc.reshape(w, (reg.shape[0],))


def _attend_np(att: AttentionParams, h: np.ndarray, regions: np.ndarray) -> np.ndarray:
    """Inference-path context for one state; plain arrays, no graph."""
    e = np.tanh(regions @ att.w_v.value + h @ att.w_h.value + att.b.value)
    w = nc.softmax_rows_np((e @ att.v.value)[None, :])[0]
    return w @ regions


# ---------------------------------------------------------------------------
# teacher-forced training graph
# ---------------------------------------------------------------------------

def _check_ids(ids, max_len: int) -> None:
    n = len(ids)
    if not 1 <= n <= max_len - 1:
        raise ValueError(
            f"caption needs 1..{max_len - 1} tokens so <eos> fits in {max_len} steps, got {n}")


def _bridge_rows(cap: CaptionerModel, u_rows) -> Tensor:
    return nc.add_bias(nc.matmul(u_rows, cap.bridge_w.tensor()), cap.bridge_b.tensor())


def _decode_states(cap: CaptionerModel, x0: Tensor, dec_in: np.ndarray,
                   step_mask: np.ndarray, regions: np.ndarray | None = None,
                   region_mask: np.ndarray | None = None) -> Tensor:
    """Stacked decoder states (T*B, d_h), time-major blocks.

    Step 0 consumes the bridged code x0; later steps embed the gold
    token from the previous position. Masked steps pass state through.
    """
    b = dec_in.shape[0]
    h = c = Tensor(np.zeros((b, cap.d_h)))
    states = []
    for t in range(dec_in.shape[1]):
        x = x0 if t == 0 else nc.take_rows(cap.embedding.tensor(), dec_in[:, t])
        if cap.att is not None:
            ctx, _ = _attend_batch(cap.att, h, regions, region_mask)
            x = nc.concat_cols(x, ctx)
        h, c = lstm_cell(x, h, c, cap.dec, mask=step_mask[:, t])
        states.append(h)
    return nc.concat_rows(states)


def teacher_forced_batch(cap: CaptionerModel, mtm: MtmModel | None,
                         ids_list, features_list, code_targets: np.ndarray | None,
                         kind: str) -> tuple[Tensor, int, Tensor | None]:
    """Loss graph for one batch of (token ids, region features) pairs.

    Returns (ce_sum, n_tokens, modality): summed cross-entropy over all
    real target positions, their count, and the batch-level modality
    distance against code_targets (None when no projector is given).
    Backward on a combination of the tensors fills captioner and
    projector gradients; the code targets stay constant.
    """
    for s in ids_list:
        _check_ids(s, cap.max_len)
    regions, region_mask = pad_regions(features_list)
    v_g = pool_regions_batch(regions, region_mask)
    if mtm is None:
        u_rows, mod = nc.constant(v_g), None
    else:
        if code_targets is None:
            raise ValueError("code_targets are required when a projector is trained")
        u_rows = project(mtm, v_g)
        mod = modality_loss(kind, u_rows, code_targets)
    x0 = _bridge_rows(cap, u_rows)
    dec_in, _ = pad_batch([[PAD_ID] + list(s) for s in ids_list])
    targets, mask = pad_batch([list(s) + [EOS_ID] for s in ids_list])
    states = _decode_states(cap, x0, dec_in, mask, regions, region_mask)
    logits = nc.add_bias(nc.matmul(states, cap.w_out.tensor()), cap.b_out.tensor())
    ce = nc.cross_entropy_rows(logits, targets.T.reshape(-1), weights=mask.T.reshape(-1))
    return ce, int(mask.sum()), mod


def forward_train(cap: CaptionerModel, mtm: MtmModel | None, ae: AutoEncoderModel,
                  sample: CaptionSample, kind: str) -> TrainStepReport:
    """One teacher-forced pass on a single sample, gradients included.

    ce_loss is the mean cross-entropy per target token (gold tokens plus
    <eos>); modality_loss compares the projected code against the frozen
    autoencoder's code for the same caption. Zeroes captioner and
    projector gradients first, then backpropagates their sum, so the
    filled gradients belong to exactly this sample.
    """
    ids = cap.vocab.ids_of(sample.caption)
    feats = np.asarray(sample.features, dtype=np.float64)
    for p in cap.parameters():
        p.zero_grad()
    target = None
    if mtm is not None:
        for p in mtm.parameters():
            p.zero_grad()
        target = encode(ae, ae.vocab.ids_of(sample.caption)).data[None, :]
    ce_sum, n_tok, mod = teacher_forced_batch(cap, mtm, [ids], [feats], target, kind)
    ce = nc.scale(ce_sum, 1.0 / n_tok)
    total = nc.add(ce, mod) if mod is not None else ce
    ce_f = ce.item()
    mod_f = mod.item() if mod is not None else 0.0
    if not math.isfinite(ce_f):
        raise TrainingError("cross-entropy loss is not finite")
    if not math.isfinite(mod_f):
        raise TrainingError(f"{kind} modality loss is not finite")
    total.backward()
    return TrainStepReport(ce_loss=ce_f, modality_loss=mod_f, total=total.item())


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _bridge_input(cap: CaptionerModel, mtm: MtmModel | None,
                  regions: np.ndarray) -> np.ndarray:
    v_g = pool_regions(regions)
    u = project(mtm, v_g).data if mtm is not None else v_g
    if u.shape[0] != cap.bridge_w.shape[0]:
        raise DimensionError(
            f"bridge expects a {cap.bridge_w.shape[0]}-dim code, got {u.shape[0]}")
    return u @ cap.bridge_w.value + cap.bridge_b.value


def decode_step_fn(cap: CaptionerModel, mtm: MtmModel | None, regions):
    """Single-sequence decoding interface shared by greedy and beam.

    The returned step(prev_token, state) yields (logprobs over the
    vocabulary, new state); prev_token None starts the sequence from the
    bridged code with zero hidden state.
    """
    regions = np.asarray(regions, dtype=np.float64)
    x0 = _bridge_input(cap, mtm, regions)

    def step(prev: int | None, state):
        if prev is None:
            h = c = np.zeros((1, cap.d_h))
            x = x0
        else:
            h, c = state
            x = cap.embedding.value[prev]
        if cap.att is not None:
            x = np.concatenate([x, _attend_np(cap.att, h[0], regions)])
        h, c = lstm_forward_np(cap.dec, x[None, :], h, c)
        logits = h[0] @ cap.w_out.value + cap.b_out.value
        return log_softmax_rows_np(logits[None, :])[0], (h, c)
    return step


def _greedy_rollout(step_fn, init_state, max_len: int,
                    eos_id: int) -> tuple[list[int], float]:
    ids: list[int] = []
    total, state = 0.0, init_state
    for _ in range(max_len):
        logp, state = step_fn(ids[-1] if ids else None, state)
        j = int(np.argmax(logp))
        ids.append(j)
        total += float(logp[j])
        if j == eos_id:
            break
    return ids, total


def greedy_decode(cap: CaptionerModel, mtm: MtmModel | None, regions) -> list[int]:
    """Argmax decoding; ties go to the lowest token id (first argmax hit).

    Emits token ids until <eos> (included) or max_len tokens.
    """
    step = decode_step_fn(cap, mtm, regions)
    return _greedy_rollout(step, None, cap.max_len, EOS_ID)[0]


def beam_search(step_fn, init_state, beam_width: int, max_len: int,
                eos_id: int) -> tuple[list[int], float]:
    """Beam search over a step function; returns (ids, score).

    Hypotheses rank by summed log-probability during the search; the
    final pick maximizes sum/length over finished hypotheses, survivors
    truncated at max_len, and the plain greedy rollout (so the result
    never scores below greedy). Ties break toward lexicographically
    smaller id sequences, matching greedy's lowest-id argmax.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be at least 1, got {beam_width}")
    if max_len < 1:
        raise ValueError(f"max_len must be at least 1, got {max_len}")
    live: list[tuple[list[int], float, object]] = [([], 0.0, init_state)]
    pool: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        cands = []
        for ids, total, state in live:
            logp, nxt = step_fn(ids[-1] if ids else None, state)
            # stable argsort keeps the first (lowest) id among tied scores
            for j in np.argsort(-logp, kind="stable")[:beam_width]:
                cands.append((ids + [int(j)], total + float(logp[j]), nxt))
        cands.sort(key=lambda c: (-c[1], c[0]))
        live = []
        for ids, total, state in cands[:beam_width]:
            if ids[-1] == eos_id:
                pool.append((ids, total))
            else:
                live.append((ids, total, state))
        if not live:
            break
    pool.extend((ids, total) for ids, total, _ in live)
    pool.append(_greedy_rollout(step_fn, init_state, max_len, eos_id))
    best = min(pool, key=lambda c: (-(c[1] / len(c[0])), c[0]))
    return best[0], best[1] / len(best[0])


def beam_decode(cap: CaptionerModel, mtm: MtmModel | None, regions,
                beam_width: int) -> list[int]:
    """Length-normalized beam decoding; width 1 reproduces greedy_decode."""
    step = decode_step_fn(cap, mtm, regions)
    return beam_search(step, None, beam_width, cap.max_len, EOS_ID)[0]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def validate_captioner(cap: CaptionerModel, mtm: MtmModel | None,
                       samples: list[CaptionSample]) -> EvalReport:
    """Greedy-decode every sample and score against its own caption."""
    cands = {s.scene_id: cap.vocab.tokens_of(
        greedy_decode(cap, mtm, s.features)) for s in samples}
    refs = {s.scene_id: [list(s.caption)] for s in samples}
    return evaluate(EvalCorpus(cands, refs))


def train_captioner(train_samples: list[CaptionSample],
                    val_samples: list[CaptionSample],
                    ae: AutoEncoderModel, cfg: RunConfig,
                    ) -> tuple[CaptionerModel, MtmModel | None, list[dict]]:
    """Train captioner (and projector unless cfg.use_mtm is off) against
    a frozen autoencoder.

    Batches minimize pooled per-token cross-entropy plus the batch-level
    modality distance; the autoencoder only supplies fixed code targets
    and its weights never change. The returned trace has one dict per
    epoch: ce (mean per token), modality (mean per sample; None without
    a projector), and greedy validation scores val_bleu4 / val_rouge_l /
    val_cider.
    """
    if not train_samples:
        raise ValueError("train_captioner: empty training corpus")
    if not val_samples:
        raise ValueError("train_captioner: empty validation corpus")
    rng = np.random.default_rng([cfg.seed, 13])
    d_v = int(np.asarray(train_samples[0].features).shape[1])
    mtm = init_mtm(d_v, cfg.d_e, rng) if cfg.use_mtm else None
    cap = init_captioner(ae.vocab, d_in=cfg.d_e if cfg.use_mtm else d_v,
                         d_emb=cfg.d_emb, d_h=cfg.d_h, max_len=cfg.max_len,
                         rng=rng, attention=cfg.attention, d_v=d_v, d_a=cfg.d_a)
    params = cap.parameters() + (mtm.parameters() if mtm is not None else [])
    opt = AdamOptimizer(params, lr=cfg.lr, clip_norm=cfg.clip_norm)

    ids = [cap.vocab.ids_of(s.caption) for s in train_samples]
    for s in ids:
        _check_ids(s, cap.max_len)
    feats = [np.asarray(s.features, dtype=np.float64) for s in train_samples]
    codes = encode_batch(ae, ids) if mtm is not None else None

    n = len(train_samples)
    trace: list[dict] = []
    for epoch in range(cfg.epochs):
        opt.set_lr(cfg.lr_at(epoch))
        perm = rng.permutation(n)
        ce_sum, tok_sum, mod_sum = 0.0, 0, 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            ce, n_tok, mod = teacher_forced_batch(
                cap, mtm, [ids[i] for i in idx], [feats[i] for i in idx],
                codes[idx] if codes is not None else None, cfg.modality_loss)
            loss = nc.scale(ce, 1.0 / n_tok)
            if mod is not None:
                loss = nc.add(loss, mod)
            loss.backward()
            opt.step()
            opt.zero_grad()
            ce_sum += ce.item()
            tok_sum += n_tok
            if mod is not None:
                mod_sum += mod.item() * len(idx)
        report = validate_captioner(cap, mtm, val_samples)
        trace.append({
            "epoch": epoch,
            "ce": ce_sum / tok_sum,
            "modality": (mod_sum / n) if mtm is not None else None,
            "val_bleu4": report.bleu[3],
            "val_rouge_l": report.rouge_l,
            "val_cider": report.cider,
        })
    return cap, mtm, trace
