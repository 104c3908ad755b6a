"""Command-line front end: corpus generation, two-stage training,
inference, evaluation, and the modality-loss ablation sweep.

Also owns the checkpoint format. A checkpoint is one JSON header line
(format version, config snapshot, vocabulary, parameter names/shapes,
Adam scalars, RNG state, extras) followed by the raw parameter and
optimizer arrays as little-endian 64-bit floats, in header order. The
header serializes with sorted keys, so save -> load -> save reproduces
the file byte for byte.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .captioner import (CaptionerModel, beam_decode, greedy_decode, init_captioner,
                        train_captioner)
from .config import RunConfig
from .metrics import EvalCorpus, EvalReport, bleu, cider, evaluate, rouge_l
from .mtm import MODALITY_LOSSES, MtmModel, init_mtm
from .numcore import (AdamOptimizer, AdamState, DimensionError, Parameter,
                      TrainingError)
from .synthdata import build_corpus, load_split
from .textae import (RESERVED, AutoEncoderModel, Vocabulary, init_autoencoder,
                     read_captions_jsonl, token_accuracy, train_autoencoder)

FORMAT_VERSION = 1


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

@dataclass
class ModelCheckpoint:
    """Everything needed to rebuild a model and resume its training."""
    kind: str
    config: RunConfig
    vocab: Vocabulary
    params: dict[str, np.ndarray]
    adam: dict[str, AdamState]
    rng_state: dict | None
    extra: dict

    @classmethod
    def capture(cls, kind: str, cfg: RunConfig, vocab: Vocabulary,
                params: list[Parameter], opt: AdamOptimizer | None,
                rng: np.random.Generator | None, extra: dict) -> "ModelCheckpoint":
        return cls(
            kind=kind,
            config=cfg,
            vocab=vocab,
            params={p.name: p.value.copy() for p in params},
            adam={} if opt is None else {
                p.name: opt.states[p.name] for p in opt.params},
            rng_state=None if rng is None else dict(rng.bit_generator.state),
            extra=extra,
        )


def _payload_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path: str, ck: ModelCheckpoint) -> None:
    names = list(ck.params)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ck.kind,
        "config": ck.config.to_dict(),
        "vocab": list(ck.vocab.id_to_token),
        "params": [{"name": n, "shape": list(ck.params[n].shape)} for n in names],
        "adam": {n: {"step": s.step, "lr": s.lr, "beta1": s.beta1,
                     "beta2": s.beta2, "eps": s.eps}
                 for n, s in ck.adam.items()},
        "rng": ck.rng_state,
        "extra": ck.extra,
    }
    blobs = [_payload_bytes(ck.params[n]) for n in names]
    # the header serializes with sorted keys, so moment arrays must be
    # laid out in sorted-name order for the reader to find them
    for n in sorted(ck.adam):
        blobs.append(_payload_bytes(ck.adam[n].m))
        blobs.append(_payload_bytes(ck.adam[n].v))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version!r}, this build reads {FORMAT_VERSION}")

    offset = 0

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64)
        offset = end
        return arr.reshape(shape)

    params = {e["name"]: take(e["shape"]) for e in header["params"]}
    adam = {}
    for name in sorted(header["adam"]):
        s = header["adam"][name]
        if name not in params:
            raise CheckpointError(f"{path}: optimizer state for unknown {name!r}")
        adam[name] = AdamState(m=take(params[name].shape), v=take(params[name].shape),
                               step=int(s["step"]), lr=float(s["lr"]),
                               beta1=float(s["beta1"]), beta2=float(s["beta2"]),
                               eps=float(s["eps"]))
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return ModelCheckpoint(
        kind=str(header["kind"]),
        config=RunConfig.from_dict(header["config"]),
        vocab=Vocabulary(tuple(header["vocab"])),
        params=params,
        adam=adam,
        rng_state=header["rng"],
        extra=header["extra"],
    )


def _fill_parameters(params: list[Parameter], stored: dict[str, np.ndarray],
                     path_hint: str) -> None:
    for p in params:
        if p.name not in stored:
            raise CheckpointError(f"{path_hint}: missing parameter {p.name!r}")
        if stored[p.name].shape != p.shape:
            raise CheckpointError(
                f"{path_hint}: parameter {p.name!r} has shape "
                f"{stored[p.name].shape}, expected {p.shape}")
        p.value[...] = stored[p.name]


def load_autoencoder(ck: ModelCheckpoint) -> AutoEncoderModel:
    cfg = ck.config
    model = init_autoencoder(ck.vocab, cfg.d_e, cfg.d_emb, cfg.max_len,
                             np.random.default_rng(0))
    _fill_parameters(model.parameters(), ck.params, "autoencoder checkpoint")
    return model


def load_captioner(ck: ModelCheckpoint) -> tuple[CaptionerModel, MtmModel | None]:
    # widths come from the stored shapes, not the config snapshot, so a
    # checkpoint stays loadable even if defaults drift
    cfg = ck.config
    attention = "cap.att.v" in ck.params
    cap = init_captioner(
        ck.vocab, d_in=ck.params["cap.bridge_w"].shape[0],
        d_emb=ck.params["cap.embedding"].shape[1],
        d_h=ck.params["cap.w_out"].shape[0], max_len=cfg.max_len,
        rng=np.random.default_rng(0), attention=attention,
        d_v=ck.params["cap.att.w_v"].shape[0] if attention else cfg.d_v,
        d_a=ck.params["cap.att.v"].shape[0] if attention else cfg.d_a)
    mtm = None
    if "mtm.W1" in ck.params:
        d_e, d_v = ck.params["mtm.W1"].shape
        mtm = init_mtm(d_v, d_e, np.random.default_rng(0))
        _fill_parameters(mtm.parameters(), ck.params, "captioner checkpoint")
    _fill_parameters(cap.parameters(), ck.params, "captioner checkpoint")
    return cap, mtm


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


# ---------------------------------------------------------------------------
# shared command plumbing
# ---------------------------------------------------------------------------

def _resolve_config(args, overrides: dict) -> RunConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    updates = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        updates["seed"] = args.seed
    cfg = RunConfig(**{**cfg.to_dict(), **updates})
    cfg.validate()
    return cfg


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"missing {what}: {path}")
    return path


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _g17(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    cfg = _resolve_config(args, {})
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    if args.noise < 0:
        raise UsageError(f"--noise must be nonnegative, got {args.noise}")
    out = _out_dir(args)
    build_corpus(out, args.n, seed=cfg.seed, d_v=cfg.d_v, noise_sigma=args.noise)
    print(os.path.join(out, "manifest.json"))


def cmd_train_ae(args) -> None:
    corpus = _require_file(os.path.join(args.corpus, "train.jsonl"), "corpus split")
    captions = read_captions_jsonl(corpus)
    if args.resume:
        ck = load_checkpoint(_require_file(args.resume, "checkpoint"))
        if ck.kind != "autoencoder":
            raise UsageError(f"{args.resume}: kind {ck.kind!r} is not an autoencoder")
        cfg_dict = ck.config.to_dict()
        if args.epochs is not None:
            cfg_dict["epochs"] = args.epochs
        if args.early_stop is not None:
            cfg_dict["early_stop_token_acc"] = args.early_stop
        cfg = RunConfig(**cfg_dict)
        cfg.validate()
        model = load_autoencoder(ck)
        opt = AdamOptimizer(model.parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
        opt.states.update(ck.adam)
        rng = _restore_rng(ck.rng_state)
        start = int(ck.extra["epoch_next"])
        rows = [tuple(r) for r in ck.extra["trace"]]
    else:
        cfg = _resolve_config(args, {"epochs": args.epochs,
                                     "early_stop_token_acc": args.early_stop})
        model, opt, rng = None, None, None
        start, rows = 0, []

    out = _out_dir(args)
    content = None
    for epoch in range(start, cfg.epochs):
        # one epoch per call so the per-epoch CSV can carry token accuracy;
        # the rng threads through, so the update stream matches a single call
        step_cfg = RunConfig(**{**cfg.to_dict(), "epochs": epoch + 1,
                                "early_stop_token_acc": None})
        model, losses, opt, rng = train_autoencoder(
            captions, step_cfg, model=model, opt=opt, start_epoch=epoch, rng=rng)
        if content is None:
            content = [model.vocab.ids_of(c) for c in captions]
        acc = token_accuracy(model, content)
        rows.append((epoch, losses[-1], acc))
        if cfg.early_stop_token_acc is not None and acc >= cfg.early_stop_token_acc:
            break

    csv_path = os.path.join(out, "ae_trace.csv")
    _write_text(csv_path, "epoch,loss,token_acc\n" + "".join(
        f"{e},{_g17(l)},{_g17(a)}\n" for e, l, a in rows))
    if model is None:
        raise UsageError("nothing to train: epochs already completed in the checkpoint")
    ck_path = os.path.join(out, "ae.ckpt")
    save_checkpoint(ck_path, ModelCheckpoint.capture(
        "autoencoder", cfg, model.vocab, model.parameters(), opt, rng,
        extra={"epoch_next": rows[-1][0] + 1, "trace": [list(r) for r in rows]}))
    print(ck_path)
    print(csv_path)


def _load_captioner_inputs(args, overrides: dict):
    train = load_split(_require_file(os.path.join(args.corpus, "train.jsonl"),
                                     "corpus split"))
    val = load_split(_require_file(os.path.join(args.corpus, "val.jsonl"),
                                   "corpus split"))
    ae_ck = load_checkpoint(_require_file(args.ae, "autoencoder checkpoint"))
    if ae_ck.kind != "autoencoder":
        raise UsageError(f"{args.ae}: kind {ae_ck.kind!r} is not an autoencoder")
    cfg = _resolve_config(args, overrides)
    if ae_ck.config.d_e != cfg.d_e:
        raise UsageError(
            f"autoencoder code width d_e={ae_ck.config.d_e} does not match "
            f"configured d_e={cfg.d_e}")
    if train and train[0].features.shape[1] != cfg.d_v:
        raise UsageError(
            f"corpus region width d_v={train[0].features.shape[1]} does not "
            f"match configured d_v={cfg.d_v}")
    return train, val, load_autoencoder(ae_ck), cfg


def _trace_csv(trace: list[dict]) -> str:
    lines = ["epoch,ce_loss,modality_loss,val_BLEU4,val_ROUGE_L,val_CIDEr\n"]
    for t in trace:
        mod = "" if t["modality"] is None else _g17(t["modality"])
        lines.append(f"{t['epoch']},{_g17(t['ce'])},{mod},{_g17(t['val_bleu4'])},"
                     f"{_g17(t['val_rouge_l'])},{_g17(t['val_cider'])}\n")
    return "".join(lines)


def _save_captioner(path: str, cfg: RunConfig, cap: CaptionerModel,
                    mtm: MtmModel | None, trace: list[dict]) -> None:
    params = cap.parameters() + (mtm.parameters() if mtm is not None else [])
    save_checkpoint(path, ModelCheckpoint.capture(
        "captioner", cfg, cap.vocab, params, None, None, extra={"trace": trace}))


def cmd_train_captioner(args) -> None:
    train, val, ae, cfg = _load_captioner_inputs(args, {
        "epochs": args.epochs,
        "modality_loss": args.modality_loss,
        "attention": args.attention,
        "use_mtm": False if args.no_mtm else None,
    })
    cap, mtm, trace = train_captioner(train, val, ae, cfg)
    out = _out_dir(args)
    ck_path = os.path.join(out, "captioner.ckpt")
    _save_captioner(ck_path, cfg, cap, mtm, trace)
    csv_path = os.path.join(out, "captioner_trace.csv")
    _write_text(csv_path, _trace_csv(trace))
    print(ck_path)
    print(csv_path)


def cmd_ablate(args) -> None:
    variants = [("baseline", False, "mse")]
    variants += [(kind, True, kind) for kind in MODALITY_LOSSES]
    out = _out_dir(args)
    table = ["variant,val_BLEU4,val_ROUGE_L,val_CIDEr\n"]
    for name, use_mtm, kind in variants:
        train, val, ae, cfg = _load_captioner_inputs(args, {
            "epochs": args.epochs,
            "attention": args.attention,
            "modality_loss": kind,
            "use_mtm": use_mtm,
        })
        cap, mtm, trace = train_captioner(train, val, ae, cfg)
        _save_captioner(os.path.join(out, f"captioner_{name}.ckpt"), cfg, cap, mtm, trace)
        _write_text(os.path.join(out, f"trace_{name}.csv"), _trace_csv(trace))
        last = trace[-1]
        table.append(f"{name},{_g17(last['val_bleu4'])},"
                     f"{_g17(last['val_rouge_l'])},{_g17(last['val_cider'])}\n")
        print(f"{name}: val_CIDEr {last['val_cider']:.4f}")
    table_path = os.path.join(out, "ablation.csv")
    _write_text(table_path, "".join(table))
    print(table_path)


def cmd_caption(args) -> None:
    ck = load_checkpoint(_require_file(args.ckpt, "captioner checkpoint"))
    if ck.kind != "captioner":
        raise UsageError(f"{args.ckpt}: kind {ck.kind!r} is not a captioner")
    cap, mtm = load_captioner(ck)
    samples = load_split(_require_file(args.input, "input corpus"))
    known = set(cap.vocab.id_to_token)
    unknown = sorted({t for s in samples for t in s.caption} - known)
    if unknown:
        raise UsageError(
            "vocabulary mismatch: corpus tokens missing from the checkpoint "
            "vocabulary: " + ", ".join(unknown))
    if args.beam is not None and args.beam < 1:
        raise UsageError(f"--beam must be at least 1, got {args.beam}")
    out = _out_dir(args)
    lines = []
    for s in samples:
        ids = (greedy_decode(cap, mtm, s.features) if args.beam is None
               else beam_decode(cap, mtm, s.features, args.beam))
        tokens = [t for t in cap.vocab.tokens_of(ids) if t not in RESERVED]
        lines.append('{"id": %d, "tokens": %s}\n' % (s.scene_id, json.dumps(tokens)))
    path = os.path.join(out, "captions.jsonl")
    _write_text(path, "".join(lines))
    print(path)


def _read_tokens_any(path: str) -> dict[int, list[list[str]]]:
    """Read either {"id", "tokens"} or generator {"scene_id", "caption"}
    records, grouping token lists by id."""
    out: dict[int, list[list[str]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            if "tokens" in raw:
                out[int(raw["id"])].append([str(t) for t in raw["tokens"]])
            elif "caption" in raw:
                out[int(raw["scene_id"])].append([str(t) for t in raw["caption"]])
            else:
                raise UsageError(f"{path}: record carries neither tokens nor caption")
    return dict(out)


def _eval_threads() -> int:
    raw = os.environ.get("MBRIDGE_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise UsageError(f"MBRIDGE_THREADS must be an integer, got {raw!r}") from None
    if threads < 1:
        raise UsageError(f"MBRIDGE_THREADS must be at least 1, got {threads}")
    return threads


def cmd_eval(args) -> None:
    cands_raw = _read_tokens_any(_require_file(args.candidates, "candidate file"))
    if not cands_raw:
        raise UsageError(f"{args.candidates}: no candidate records")
    for i, rows_ in cands_raw.items():
        if len(rows_) != 1:
            raise UsageError(f"candidate id {i} appears {len(rows_)} times")
    refs = _read_tokens_any(_require_file(args.references, "reference file"))
    missing = sorted(set(cands_raw) - set(refs))
    if missing:
        raise UsageError("missing references for ids: "
                         + ", ".join(str(i) for i in missing))
    corpus = EvalCorpus({i: rows_[0] for i, rows_ in cands_raw.items()}, refs)

    threads = _eval_threads()
    if threads > 1:
        # the three metrics are independent pure functions; scoring them
        # concurrently keeps results identical to the sequential path
        with ThreadPoolExecutor(max_workers=min(threads, 3)) as pool:
            f_bleu = pool.submit(bleu, corpus)
            f_rouge = pool.submit(rouge_l, corpus)
            f_cider = pool.submit(cider, corpus)
            report = EvalReport(bleu=f_bleu.result(), rouge_l=f_rouge.result(),
                                cider=f_cider.result())
    else:
        report = evaluate(corpus)

    out = _out_dir(args)
    _write_text(os.path.join(out, "eval.json"), report.to_json() + "\n")
    _write_text(os.path.join(out, "eval.csv"),
                EvalReport.CSV_HEADER + "\n" + report.csv_row() + "\n")
    if args.plot_data:
        _write_plot_data(args.plot_data,
                         args.plot_out or os.path.join(out, "plot.csv"))
    print(report.to_json())


def _write_plot_data(trace_path: str, plot_path: str) -> None:
    """Re-emit (epoch, modality_loss, CIDEr) columns from a training
    trace, copying the fields verbatim so values stay exact."""
    with open(_require_file(trace_path, "trace file"), encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split(",")
    try:
        cols = [header.index("epoch"), header.index("modality_loss"),
                header.index("val_CIDEr")]
    except ValueError:
        raise UsageError(
            f"{trace_path}: expected epoch, modality_loss, val_CIDEr columns, "
            f"got {header}") from None
    rows = ["epoch,modality_loss,cider\n"]
    for line in lines[1:]:
        fields = line.split(",")
        rows.append(",".join(fields[c] for c in cols) + "\n")
    _write_text(plot_path, "".join(rows))


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mbridge",
        description="Desk-scale captioning pipeline with a vision-to-text bridge.")
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene corpus")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--noise", type=float, default=0.1, help="feature noise sigma")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("train-ae", help="pre-train the text autoencoder")
    a.add_argument("--corpus", required=True, help="corpus directory")
    a.add_argument("--epochs", type=int)
    a.add_argument("--early-stop", type=float, dest="early_stop",
                   help="stop once training token accuracy reaches this value")
    a.add_argument("--resume", help="continue from an autoencoder checkpoint")
    a.set_defaults(func=cmd_train_ae)

    c = sub.add_parser("train-captioner", help="train captioner and projector")
    c.add_argument("--corpus", required=True, help="corpus directory")
    c.add_argument("--ae", required=True, help="autoencoder checkpoint")
    c.add_argument("--modality-loss", dest="modality_loss", choices=MODALITY_LOSSES)
    c.add_argument("--no-mtm", dest="no_mtm", action="store_true",
                   help="bridge pooled vision features directly, no modality loss")
    c.add_argument("--attention", action=argparse.BooleanOptionalAction, default=None)
    c.add_argument("--epochs", type=int)
    c.set_defaults(func=cmd_train_captioner)

    ab = sub.add_parser("ablate", help="run baseline plus all five modality losses")
    ab.add_argument("--corpus", required=True, help="corpus directory")
    ab.add_argument("--ae", required=True, help="autoencoder checkpoint")
    ab.add_argument("--attention", action=argparse.BooleanOptionalAction, default=None)
    ab.add_argument("--epochs", type=int)
    ab.set_defaults(func=cmd_ablate)

    d = sub.add_parser("caption", help="decode captions for a feature file")
    d.add_argument("--ckpt", required=True, help="captioner checkpoint")
    d.add_argument("--input", required=True, help="features JSONL")
    d.add_argument("--beam", type=int, default=None,
                   help="beam width (default: greedy)")
    d.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="score candidate captions against references")
    e.add_argument("--candidates", required=True)
    e.add_argument("--references", required=True)
    e.add_argument("--plot-data", dest="plot_data",
                   help="training trace CSV to re-emit as plot columns")
    e.add_argument("--plot-out", dest="plot_out",
                   help="plot CSV path (default: <out>/plot.csv)")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        args.func(args)
        return 0
    except (UsageError, ValueError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - catch-all for exit contract
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
