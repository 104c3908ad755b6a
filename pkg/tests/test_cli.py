"""End-to-end tests for the command line: corpus generation, two-stage
training, decoding, scoring, checkpoint round-trips, and exit codes.

Commands run in process through main() with absolute paths, so the
tests exercise exactly what a shell invocation would while staying
fast enough to share one trained pipeline across the module.
"""

import json
import shutil

import numpy as np
import pytest

from mbridge.cli import (FORMAT_VERSION, CheckpointError, ModelCheckpoint,
                         load_autoencoder, load_captioner, load_checkpoint,
                         main, save_checkpoint)
from mbridge.config import RunConfig
from mbridge.metrics import EvalCorpus, evaluate
from mbridge.synthdata import load_split

CFG = {"d_v": 16, "d_e": 6, "d_emb": 5, "d_h": 6, "d_a": 4,
       "epochs": 3, "batch_size": 4, "lr": 3e-3, "seed": 0}


def cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """One generated corpus with an autoencoder, a captioner, and greedy
    decodes, shared read-only by every test in the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(CFG))
    assert cli("--config", cfg_path, "--out", root / "data",
               "gen-data", "--n", 18) == 0
    assert cli("--config", cfg_path, "--out", root / "ae", "train-ae",
               "--corpus", root / "data", "--epochs", 4) == 0
    assert cli("--config", cfg_path, "--out", root / "cap", "train-captioner",
               "--corpus", root / "data", "--ae", root / "ae" / "ae.ckpt",
               "--epochs", 2) == 0
    assert cli("--out", root / "dec", "caption",
               "--ckpt", root / "cap" / "captioner.ckpt",
               "--input", root / "data" / "test.jsonl") == 0
    return root


class TestCheckpointFormat:
    """The single-file format round-trips exactly."""

    def test_save_load_save_is_byte_identical(self, ws, tmp_path):
        src = ws / "ae" / "ae.ckpt"
        ck = load_checkpoint(src)
        out = tmp_path / "copy.ckpt"
        save_checkpoint(out, ck)
        assert out.read_bytes() == src.read_bytes()

    def test_load_restores_parameters_bitwise(self, ws):
        ck = load_checkpoint(ws / "ae" / "ae.ckpt")
        model = load_autoencoder(ck)
        for p in model.parameters():
            assert np.array_equal(p.value, ck.params[p.name])

    def test_adam_moments_survive_round_trip(self, ws, tmp_path):
        ck = load_checkpoint(ws / "ae" / "ae.ckpt")
        assert ck.adam, "training checkpoints carry optimizer state"
        out = tmp_path / "again.ckpt"
        save_checkpoint(out, ck)
        again = load_checkpoint(out)
        for name, state in ck.adam.items():
            assert np.array_equal(state.m, again.adam[name].m)
            assert np.array_equal(state.v, again.adam[name].v)
            assert state.step == again.adam[name].step

    def test_rejects_other_format_versions(self, ws, tmp_path):
        head, _, payload = (ws / "ae" / "ae.ckpt").read_bytes().partition(b"\n")
        header = json.loads(head)
        header["format_version"] = FORMAT_VERSION + 1
        bad = tmp_path / "future.ckpt"
        bad.write_bytes(json.dumps(header, sort_keys=True).encode() + b"\n" + payload)
        with pytest.raises(CheckpointError, match="format version"):
            load_checkpoint(bad)

    def test_rejects_truncated_payload(self, ws, tmp_path):
        blob = (ws / "ae" / "ae.ckpt").read_bytes()
        bad = tmp_path / "cut.ckpt"
        bad.write_bytes(blob[:-16])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(bad)

    def test_rejects_non_checkpoint_file(self, tmp_path):
        junk = tmp_path / "junk.ckpt"
        junk.write_bytes(b"\x00\x01not json\n\xff")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            load_checkpoint(junk)

    def test_missing_parameter_detected_on_rebuild(self, ws):
        ck = load_checkpoint(ws / "ae" / "ae.ckpt")
        del ck.params["ae.w_out"]
        with pytest.raises(CheckpointError, match="ae.w_out"):
            load_autoencoder(ck)


class TestConfigValidation:
    """RunConfig.validate refuses impossible settings by field name."""

    @pytest.mark.parametrize("field,value", [
        ("epochs", 0), ("batch_size", -2), ("d_h", 0), ("max_len", 0),
        ("lr", 0.0), ("lr_decay", 0.0), ("lr_decay", 1.5),
        ("clip_norm", -1.0), ("seed", -7), ("modality_loss", "huber"),
        ("early_stop_token_acc", 0.0), ("early_stop_token_acc", 1.5),
    ])
    def test_rejects_bad_field(self, field, value):
        cfg = RunConfig(**{**RunConfig().to_dict(), field: value})
        with pytest.raises(ValueError, match=field):
            cfg.validate()

    def test_defaults_validate(self):
        RunConfig().validate()


class TestGenData:
    """Corpus generation is complete and reproducible."""

    def test_writes_all_split_files(self, ws):
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
            assert (ws / "data" / name).is_file()
        manifest = json.loads((ws / "data" / "manifest.json").read_text())
        assert sum(manifest["counts"].values()) == 18
        assert manifest["d_v"] == CFG["d_v"]

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        assert cli("--config", ws / "cfg.json", "--out", tmp_path / "again",
                   "gen-data", "--n", 18) == 0
        for name in ("train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"):
            assert ((tmp_path / "again" / name).read_bytes()
                    == (ws / "data" / name).read_bytes())

    def test_zero_scenes_is_usage_error(self, tmp_path):
        assert cli("--out", tmp_path, "gen-data", "--n", 0) == 2

    def test_negative_noise_is_usage_error(self, tmp_path):
        assert cli("--out", tmp_path, "gen-data", "--n", 3, "--noise", -0.5) == 2


class TestTrainAe:
    """Autoencoder training emits a usable checkpoint plus trace."""

    def test_trace_has_one_row_per_epoch(self, ws):
        lines = (ws / "ae" / "ae_trace.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,token_acc"
        assert len(lines) == 1 + 4
        for i, line in enumerate(lines[1:]):
            epoch, loss, acc = line.split(",")
            assert int(epoch) == i
            assert np.isfinite(float(loss))
            assert 0.0 <= float(acc) <= 1.0

    def test_checkpoint_kind_and_config(self, ws):
        ck = load_checkpoint(ws / "ae" / "ae.ckpt")
        assert ck.kind == "autoencoder"
        assert ck.config.epochs == 4
        assert ck.extra["epoch_next"] == 4
        assert len(ck.extra["trace"]) == 4

    def test_resume_matches_uninterrupted_run(self, ws, tmp_path):
        """Stopping after 2 epochs and resuming to 4 reproduces the
        single-run trace and checkpoint byte for byte."""
        half = tmp_path / "half"
        assert cli("--config", ws / "cfg.json", "--out", half, "train-ae",
                   "--corpus", ws / "data", "--epochs", 2) == 0
        assert cli("--out", half, "train-ae", "--corpus", ws / "data",
                   "--resume", half / "ae.ckpt", "--epochs", 4) == 0
        assert ((half / "ae.ckpt").read_bytes()
                == (ws / "ae" / "ae.ckpt").read_bytes())
        assert ((half / "ae_trace.csv").read_bytes()
                == (ws / "ae" / "ae_trace.csv").read_bytes())

    def test_early_stop_truncates_trace(self, ws, tmp_path):
        assert cli("--config", ws / "cfg.json", "--out", tmp_path, "train-ae",
                   "--corpus", ws / "data", "--epochs", 6,
                   "--early-stop", 0.05) == 0
        rows = (tmp_path / "ae_trace.csv").read_text().splitlines()[1:]
        assert 0 < len(rows) < 6
        assert float(rows[-1].split(",")[2]) >= 0.05

    def test_resume_rejects_wrong_kind(self, ws, tmp_path):
        assert cli("--out", tmp_path, "train-ae", "--corpus", ws / "data",
                   "--resume", ws / "cap" / "captioner.ckpt") == 2

    def test_missing_corpus_is_usage_error(self, tmp_path):
        assert cli("--out", tmp_path, "train-ae",
                   "--corpus", tmp_path / "nowhere") == 2


class TestTrainCaptioner:
    """Captioner training wires corpus, autoencoder, and projector."""

    def test_trace_columns_and_rows(self, ws):
        lines = (ws / "cap" / "captioner_trace.csv").read_text().splitlines()
        assert lines[0] == ("epoch,ce_loss,modality_loss,"
                            "val_BLEU4,val_ROUGE_L,val_CIDEr")
        assert len(lines) == 1 + 2
        for line in lines[1:]:
            fields = line.split(",")
            assert all(np.isfinite(float(f)) for f in fields[1:])

    def test_checkpoint_reloads_with_projector(self, ws):
        ck = load_checkpoint(ws / "cap" / "captioner.ckpt")
        assert ck.kind == "captioner"
        cap, mtm = load_captioner(ck)
        assert mtm is not None
        assert cap.bridge_w.shape[0] == CFG["d_e"]

    def test_no_mtm_leaves_modality_column_empty(self, ws, tmp_path):
        assert cli("--config", ws / "cfg.json", "--out", tmp_path,
                   "train-captioner", "--corpus", ws / "data",
                   "--ae", ws / "ae" / "ae.ckpt", "--epochs", 1,
                   "--no-mtm") == 0
        row = (tmp_path / "captioner_trace.csv").read_text().splitlines()[1]
        assert row.split(",")[2] == ""
        ck = load_checkpoint(tmp_path / "captioner.ckpt")
        assert "mtm.W1" not in ck.params
        cap, mtm = load_captioner(ck)
        assert mtm is None
        assert cap.bridge_w.shape[0] == CFG["d_v"]

    def test_no_attention_drops_attention_parameters(self, ws, tmp_path):
        assert cli("--config", ws / "cfg.json", "--out", tmp_path,
                   "train-captioner", "--corpus", ws / "data",
                   "--ae", ws / "ae" / "ae.ckpt", "--epochs", 1,
                   "--no-attention") == 0
        ck = load_checkpoint(tmp_path / "captioner.ckpt")
        assert "cap.att.v" not in ck.params
        load_captioner(ck)

    def test_code_width_mismatch_names_both_widths(self, ws, tmp_path, capsys):
        cfg2 = tmp_path / "cfg2.json"
        cfg2.write_text(json.dumps({**CFG, "d_e": 8}))
        assert cli("--config", cfg2, "--out", tmp_path, "train-captioner",
                   "--corpus", ws / "data", "--ae", ws / "ae" / "ae.ckpt") == 2
        err = capsys.readouterr().err
        assert "d_e=6" in err and "d_e=8" in err

    def test_region_width_mismatch_is_usage_error(self, ws, tmp_path, capsys):
        cfg3 = tmp_path / "cfg3.json"
        cfg3.write_text(json.dumps({**CFG, "d_v": 32}))
        assert cli("--config", cfg3, "--out", tmp_path, "train-captioner",
                   "--corpus", ws / "data", "--ae", ws / "ae" / "ae.ckpt") == 2
        err = capsys.readouterr().err
        assert "d_v=16" in err and "d_v=32" in err

    def test_nan_autoencoder_is_training_failure(self, ws, tmp_path):
        """A checkpoint poisoned with NaN codes must exit 1, not 2: the
        arguments were fine, the numerics were not."""
        ck = load_checkpoint(ws / "ae" / "ae.ckpt")
        ck.params["ae.embedding"][...] = np.nan
        bad = tmp_path / "nan.ckpt"
        save_checkpoint(bad, ck)
        assert cli("--config", ws / "cfg.json", "--out", tmp_path,
                   "train-captioner", "--corpus", ws / "data",
                   "--ae", bad, "--epochs", 1) == 1


class TestCaption:
    """Decoding covers every input scene deterministically."""

    def test_output_covers_input_ids(self, ws):
        got = [json.loads(line) for line
               in (ws / "dec" / "captions.jsonl").read_text().splitlines()]
        want = [s.scene_id for s in load_split(ws / "data" / "test.jsonl")]
        assert [r["id"] for r in got] == want
        vocab = load_checkpoint(ws / "cap" / "captioner.ckpt").vocab
        for r in got:
            assert all(t in vocab.token_to_id for t in r["tokens"])
            assert not any(t.startswith("<") for t in r["tokens"])

    def test_rerun_is_byte_identical(self, ws, tmp_path):
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "cap" / "captioner.ckpt",
                   "--input", ws / "data" / "test.jsonl") == 0
        assert ((tmp_path / "captions.jsonl").read_bytes()
                == (ws / "dec" / "captions.jsonl").read_bytes())

    def test_beam_one_matches_greedy(self, ws, tmp_path):
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "cap" / "captioner.ckpt",
                   "--input", ws / "data" / "test.jsonl", "--beam", 1) == 0
        assert ((tmp_path / "captions.jsonl").read_bytes()
                == (ws / "dec" / "captions.jsonl").read_bytes())

    def test_beam_width_runs(self, ws, tmp_path):
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "cap" / "captioner.ckpt",
                   "--input", ws / "data" / "test.jsonl", "--beam", 3) == 0
        rows = (tmp_path / "captions.jsonl").read_text().splitlines()
        assert len(rows) == 2

    def test_zero_beam_is_usage_error(self, ws, tmp_path):
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "cap" / "captioner.ckpt",
                   "--input", ws / "data" / "test.jsonl", "--beam", 0) == 2

    def test_unknown_tokens_are_reported(self, ws, tmp_path, capsys):
        rec = json.loads((ws / "data" / "test.jsonl").read_text().splitlines()[0])
        rec["caption"] = ["a", "zorbulon", "sits"]
        alien = tmp_path / "alien.jsonl"
        alien.write_text(json.dumps(rec) + "\n")
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "cap" / "captioner.ckpt",
                   "--input", alien) == 2
        assert "zorbulon" in capsys.readouterr().err

    def test_wrong_kind_checkpoint_is_usage_error(self, ws, tmp_path):
        assert cli("--out", tmp_path, "caption",
                   "--ckpt", ws / "ae" / "ae.ckpt",
                   "--input", ws / "data" / "test.jsonl") == 2


class TestEval:
    """Scoring matches the metrics module and validates its inputs."""

    @pytest.fixture()
    def scored(self, ws, tmp_path):
        out = tmp_path / "ev"
        assert cli("--out", out, "eval",
                   "--candidates", ws / "dec" / "captions.jsonl",
                   "--references", ws / "data" / "test.jsonl") == 0
        return out

    def test_report_matches_metrics_module(self, ws, scored):
        cands = {json.loads(l)["id"]: json.loads(l)["tokens"] for l
                 in (ws / "dec" / "captions.jsonl").read_text().splitlines()}
        refs = {}
        for s in load_split(ws / "data" / "test.jsonl"):
            refs.setdefault(s.scene_id, []).append(s.caption)
        want = evaluate(EvalCorpus(cands, refs))
        got = json.loads((scored / "eval.json").read_text())
        assert got == json.loads(want.to_json())
        csv = (scored / "eval.csv").read_text().splitlines()
        assert csv[0] == "bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider"
        assert csv[1] == want.csv_row()

    def test_self_evaluation_is_perfect(self, ws, tmp_path):
        refs = ws / "data" / "test.jsonl"
        assert cli("--out", tmp_path, "eval", "--candidates", refs,
                   "--references", refs) == 0
        got = json.loads((tmp_path / "eval.json").read_text())
        assert got["bleu_4"] == 1.0
        assert got["rouge_l"] == 1.0
        assert got["cider"] > 0.0

    def test_missing_references_list_ids(self, ws, tmp_path, capsys):
        assert cli("--out", tmp_path, "eval",
                   "--candidates", ws / "data" / "train.jsonl",
                   "--references", ws / "data" / "test.jsonl") == 2
        assert "missing references" in capsys.readouterr().err

    def test_empty_candidates_is_usage_error(self, ws, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert cli("--out", tmp_path, "eval", "--candidates", empty,
                   "--references", ws / "data" / "test.jsonl") == 2

    def test_duplicate_candidate_id_is_usage_error(self, ws, tmp_path):
        line = (ws / "dec" / "captions.jsonl").read_text().splitlines()[0]
        dup = tmp_path / "dup.jsonl"
        dup.write_text(line + "\n" + line + "\n")
        assert cli("--out", tmp_path, "eval", "--candidates", dup,
                   "--references", ws / "data" / "test.jsonl") == 2

    def test_thread_count_does_not_change_scores(self, ws, scored,
                                                 tmp_path, monkeypatch):
        monkeypatch.setenv("MBRIDGE_THREADS", "4")
        out = tmp_path / "threaded"
        assert cli("--out", out, "eval",
                   "--candidates", ws / "dec" / "captions.jsonl",
                   "--references", ws / "data" / "test.jsonl") == 0
        assert ((out / "eval.json").read_bytes()
                == (scored / "eval.json").read_bytes())

    @pytest.mark.parametrize("raw", ["zebra", "0", "-2"])
    def test_bad_thread_count_is_usage_error(self, ws, tmp_path,
                                             monkeypatch, raw):
        monkeypatch.setenv("MBRIDGE_THREADS", raw)
        assert cli("--out", tmp_path, "eval",
                   "--candidates", ws / "dec" / "captions.jsonl",
                   "--references", ws / "data" / "test.jsonl") == 2

    def test_plot_data_copies_trace_fields_verbatim(self, ws, tmp_path):
        assert cli("--out", tmp_path, "eval",
                   "--candidates", ws / "dec" / "captions.jsonl",
                   "--references", ws / "data" / "test.jsonl",
                   "--plot-data", ws / "cap" / "captioner_trace.csv") == 0
        trace = (ws / "cap" / "captioner_trace.csv").read_text().splitlines()
        plot = (tmp_path / "plot.csv").read_text().splitlines()
        assert plot[0] == "epoch,modality_loss,cider"
        assert len(plot) == len(trace)
        for t, p in zip(trace[1:], plot[1:]):
            tf, pf = t.split(","), p.split(",")
            assert pf == [tf[0], tf[2], tf[5]]


@pytest.fixture(scope="module")
def sweep(ws, tmp_path_factory):
    """One single-epoch ablation sweep shared by the TestAblate checks."""
    out = tmp_path_factory.mktemp("ablate")
    assert cli("--config", ws / "cfg.json", "--out", out, "ablate",
               "--corpus", ws / "data", "--ae", ws / "ae" / "ae.ckpt",
               "--epochs", 1) == 0
    return out


class TestAblate:
    """The sweep trains a baseline plus every modality loss."""

    def test_emits_all_variants(self, sweep):
        names = ["baseline", "mse", "mae", "cos", "kld", "mmd"]
        for name in names:
            assert (sweep / f"trace_{name}.csv").is_file()
            assert (sweep / f"captioner_{name}.ckpt").is_file()
        rows = (sweep / "ablation.csv").read_text().splitlines()
        assert rows[0] == "variant,val_BLEU4,val_ROUGE_L,val_CIDEr"
        assert [r.split(",")[0] for r in rows[1:]] == names

    def test_baseline_has_no_projector(self, sweep):
        ck = load_checkpoint(sweep / "captioner_baseline.ckpt")
        assert "mtm.W1" not in ck.params
        assert "mtm.W1" in load_checkpoint(sweep / "captioner_mse.ckpt").params

    def test_table_rows_match_final_trace_rows(self, sweep):
        table = (sweep / "ablation.csv").read_text().splitlines()[1:]
        for row in table:
            name, b4, rl, cd = row.split(",")
            last = (sweep / f"trace_{name}.csv").read_text().splitlines()[-1]
            fields = last.split(",")
            assert [b4, rl, cd] == fields[3:]


class TestExitCodes:
    """The shell contract: 0 ok, 2 bad input, 1 runtime failure."""

    def test_unknown_subcommand(self, tmp_path, capsys):
        assert cli("--out", tmp_path, "frobnicate") == 2
        capsys.readouterr()

    def test_missing_required_flag(self, tmp_path, capsys):
        assert cli("--out", tmp_path, "gen-data") == 2
        capsys.readouterr()

    def test_negative_seed_rejected(self, tmp_path):
        assert cli("--seed", -3, "--out", tmp_path, "gen-data", "--n", 2) == 2

    def test_config_must_be_json_object(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("[1, 2, 3]")
        assert cli("--config", bad, "--out", tmp_path, "gen-data", "--n", 2) == 2

    def test_malformed_config_json(self, tmp_path):
        bad = tmp_path / "cfg.json"
        bad.write_text("{not json")
        assert cli("--config", bad, "--out", tmp_path, "gen-data", "--n", 2) == 2

    def test_missing_config_file(self, tmp_path):
        assert cli("--config", tmp_path / "nowhere.json", "--out", tmp_path,
                   "gen-data", "--n", 2) == 2
