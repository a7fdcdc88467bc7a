import math

import numpy as np
import pytest

from helpers import tiny_model
from seqqa import tensor as T
from seqqa.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    CheckpointIntegrityError,
    from_bytes,
    load_checkpoint,
    save_checkpoint,
    to_bytes,
)
from seqqa.corpus import EOS, PAD, Vocabulary
from seqqa.model import ModelConfig, SamplingSchedule, Seq2SeqModel, greedy_decode
from seqqa.training import (
    DivergenceError,
    EncodedPair,
    LossCurve,
    TrainConfig,
    TrainState,
    collate,
    evaluate_loss,
    fit,
    make_batches,
    split_corpus,
    train_epoch,
)

VOCAB = Vocabulary(list("abcde"), "character")  # ids 4..8


def toy_pairs(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        EncodedPair(list(rng.integers(4, 9, rng.integers(1, 5))), list(rng.integers(4, 9, rng.integers(1, 4))))
        for _ in range(n)
    ]


def toy_model(variant="gru", seed=0):
    cfg = ModelConfig(variant, len(VOCAB), 4, 3, 6)
    return Seq2SeqModel(cfg).initialize(T.make_rng(seed, "init"))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.batch_size == 64
        assert c.early_stop_patience == 5
        assert c.clip_norm == 5.0

    @pytest.mark.parametrize("kw", [{"batch_size": 0}, {"clip_norm": 0.0}, {"learning_rate": -1.0},
                                    {"epochs_max": 0}, {"early_stop_patience": 0}])
    def test_rejects(self, kw):
        with pytest.raises(T.ContractError):
            TrainConfig(**kw)

    def test_dict_round_trip_with_infinite_clip(self):
        c = TrainConfig(clip_norm=math.inf, schedule=SamplingSchedule("always_teacher"))
        d = c.to_dict()
        assert d["clip_norm"] == "inf"
        assert TrainConfig.from_dict(d) == c


class TestSplit:
    @pytest.mark.parametrize("n", [1, 2, 3, 10, 16, 64, 101])
    def test_sizes(self, n):
        train, test = split_corpus(list(range(n)), seed=3)
        assert len(train) == math.floor(0.7 * n)
        assert len(test) == n - len(train)
        assert sorted(train + test) == list(range(n))

    def test_seeded(self):
        assert split_corpus(list(range(20)), 1) == split_corpus(list(range(20)), 1)
        assert split_corpus(list(range(20)), 1) != split_corpus(list(range(20)), 2)

    def test_empty(self):
        with pytest.raises(T.ContractError):
            split_corpus([], 0)


class TestBatching:
    def test_collate(self):
        b = collate([EncodedPair([4, 5, 6], [7]), EncodedPair([4], [5, 6, 7])])
        np.testing.assert_array_equal(b.src, [[4, 5, 6], [4, PAD, PAD]])
        np.testing.assert_array_equal(b.src_len, [3, 1])
        np.testing.assert_array_equal(b.tgt, [[7, EOS, PAD, PAD], [5, 6, 7, EOS]])

    def test_make_batches_keeps_tail_and_covers_all(self):
        pairs = toy_pairs(10)
        batches = make_batches(pairs, 4, rng=np.random.default_rng(0))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sum(int((b.tgt == EOS).sum()) for b in batches) == 10

    def test_batch_size_one(self):
        assert len(make_batches(toy_pairs(3), 1)) == 3


class TestLossCurve:
    def test_csv_round_trip(self, tmp_path):
        c = LossCurve()
        c.append(1, 2.5, 2.75)
        c.append(2, 1.123456789, 2.0)
        c.to_csv(tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines() == [
            "epoch,train_loss,val_loss", "1,2.500000,2.750000", "2,1.123457,2.000000"
        ]
        assert len(LossCurve.from_csv(tmp_path / "c.csv")) == 2

    def test_monotone_epochs(self):
        c = LossCurve()
        c.append(1, 1.0, 1.0)
        with pytest.raises(ValueError):
            c.append(1, 1.0, 1.0)


class TestTrainEpoch:
    def test_zero_learning_rate_leaves_weights(self):
        m = toy_model()
        before = {k: v.copy() for k, v in m.state_arrays().items()}
        cfg = TrainConfig(learning_rate=0.0, dropout_p=0.0, batch_size=4)
        train_epoch(m, make_batches(toy_pairs(8), 4), cfg, TrainState(T.RngStreams(0)))
        for k, v in m.state_arrays().items():
            np.testing.assert_array_equal(v, before[k])
        assert all(p.grad is None for p in m.parameters())

    def test_loss_decreases(self):
        m = toy_model("attention")
        pairs = toy_pairs(8)
        cfg = TrainConfig(batch_size=8, learning_rate=0.5, dropout_p=0.0,
                          schedule=SamplingSchedule("always_teacher"))
        state = TrainState(T.RngStreams(0))
        start = evaluate_loss(m, pairs)
        for _ in range(30):
            train_epoch(m, make_batches(pairs, 8), cfg, state)
        assert evaluate_loss(m, pairs) < 0.7 * start

    def test_epsilon_sequence_non_increasing(self):
        m = toy_model()
        cfg = TrainConfig(batch_size=2, dropout_p=0.0, schedule=SamplingSchedule("linear", 0.25, 7))
        state = TrainState(T.RngStreams(0))
        for _ in range(3):
            train_epoch(m, make_batches(toy_pairs(8), 2), cfg, state)
        assert state.epsilons[0] == 1.0 and state.epsilons[-1] == 0.25
        assert all(a >= b for a, b in zip(state.epsilons, state.epsilons[1:]))
        assert state.batch_index == 12

    def test_divergence_names_batch(self):
        m = toy_model()
        m["output.b"].data[:] = np.nan
        cfg = TrainConfig(batch_size=4)
        with pytest.raises(DivergenceError) as info:
            train_epoch(m, make_batches(toy_pairs(4), 4), cfg, TrainState(T.RngStreams(0)))
        assert info.value.batch_index == 0


class TestFit:
    def rigged(self, values):
        it = iter(values)
        return lambda model, pairs: next(it)

    def test_early_stop_after_exact_patience(self):
        vals = [3.0, 2.0, 2.5, 2.4, 2.2, 2.1, 9.9, 1.0]
        cfg = TrainConfig(batch_size=4, epochs_max=20, early_stop_patience=4, dropout_p=0.0)
        ckpt, curve = fit(toy_model(), toy_pairs(10), cfg, VOCAB, val_loss_fn=self.rigged(vals))
        assert len(curve) == 2 + 4
        assert ckpt.metadata["epoch"] == 2
        assert ckpt.metadata["val_loss"] == 2.0
        assert ckpt.metadata["selected"] == "best_validation"

    def test_improvement_resets_patience(self):
        vals = [3.0, 3.1, 2.0, 2.1, 2.2, 2.3]
        cfg = TrainConfig(batch_size=4, epochs_max=6, early_stop_patience=2, dropout_p=0.0)
        _, curve = fit(toy_model(), toy_pairs(10), cfg, VOCAB, val_loss_fn=self.rigged(vals))
        assert len(curve) == 5

    def test_best_checkpoint_holds_best_weights(self):
        seen = {}

        def val(model, pairs):
            seen[len(seen) + 1] = {k: v.copy() for k, v in model.state_arrays().items()}
            return [5.0, 1.0, 2.0, 3.0][len(seen) - 1]

        cfg = TrainConfig(batch_size=4, epochs_max=4, early_stop_patience=2, dropout_p=0.0)
        ckpt, _ = fit(toy_model(), toy_pairs(10), cfg, VOCAB, val_loss_fn=val)
        for k, v in ckpt.tensors.items():
            np.testing.assert_array_equal(v, seen[2][k])

    def test_no_early_stop_runs_all_epochs(self):
        cfg = TrainConfig(batch_size=4, epochs_max=4, early_stop_patience=1, early_stopping=False)
        ckpt, curve = fit(toy_model(), toy_pairs(10), cfg, VOCAB, val_loss_fn=lambda m, p: 1.0)
        assert len(curve) == 4
        assert ckpt.metadata["selected"] == "last" and ckpt.metadata["epoch"] == 4
        assert (ckpt.metadata["n_train"], ckpt.metadata["n_test"]) == (7, 3)

    def test_one_epoch_cap(self):
        cfg = TrainConfig(batch_size=4, epochs_max=1)
        _, curve = fit(toy_model(), toy_pairs(10), cfg, VOCAB)
        assert len(curve) == 1

    def test_selected_val_loss_is_curve_minimum(self):
        cfg = TrainConfig(batch_size=4, epochs_max=8, early_stop_patience=3, dropout_p=0.0)
        ckpt, curve = fit(toy_model("attention"), toy_pairs(12), cfg, VOCAB)
        assert ckpt.metadata["val_loss"] == min(r.val_loss for r in curve.records)

    def test_single_pair_corpus(self):
        with pytest.raises(T.ContractError, match="empty training split"):
            fit(toy_model(), toy_pairs(1), TrainConfig(), VOCAB)

    def test_deterministic(self):
        cfg = TrainConfig(batch_size=3, epochs_max=3, early_stopping=False)
        runs = [fit(toy_model(), toy_pairs(12), cfg, VOCAB) for _ in range(2)]
        assert to_bytes(runs[0][0]) == to_bytes(runs[1][0])
        assert runs[0][1].records == runs[1][1].records


class TestCheckpoint:
    def make(self):
        m = toy_model("attention")
        return m, Checkpoint.from_model(m, VOCAB, {"epoch": 3, "note": "x"})

    def test_round_trip_is_byte_identical(self, tmp_path):
        _, ckpt = self.make()
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        again = load_checkpoint(tmp_path / "a.ckpt")
        assert to_bytes(again) == (tmp_path / "a.ckpt").read_bytes()
        assert again.metadata == {"epoch": 3, "note": "x"}
        assert again.vocab == VOCAB

    def test_decode_survives_save_load(self, tmp_path):
        m, ckpt = self.make()
        save_checkpoint(ckpt, tmp_path / "a.ckpt")
        m2 = load_checkpoint(tmp_path / "a.ckpt").build_model()
        a, b = greedy_decode([4, 5, 6], m, 6), greedy_decode([4, 5, 6], m2, 6)
        assert a.ids == b.ids
        np.testing.assert_array_equal(a.attention, b.attention)

    def test_frozen_flag_persists(self):
        m = tiny_model("bilstm_embeddings", E=300)
        m.attach_embeddings(np.zeros(m["embedding"].shape))
        vocab = Vocabulary([f"w{i}" for i in range(m.config.vocab_size - 4)], "word")
        rebuilt = from_bytes(to_bytes(Checkpoint.from_model(m, vocab))).build_model()
        assert not rebuilt.params["embedding"].trainable

    def test_bad_magic(self):
        _, ckpt = self.make()
        buf = bytearray(to_bytes(ckpt))
        buf[:4] = b"XXXX"
        with pytest.raises(CheckpointFormatError, match="magic"):
            from_bytes(bytes(buf))

    def test_version(self):
        _, ckpt = self.make()
        buf = bytearray(to_bytes(ckpt))
        buf[4] = 9
        with pytest.raises(CheckpointFormatError, match="version"):
            from_bytes(bytes(buf))

    def test_flipped_tensor_byte(self):
        _, ckpt = self.make()
        buf = bytearray(to_bytes(ckpt))
        buf[-3] ^= 0xFF
        with pytest.raises(CheckpointIntegrityError, match="checksum"):
            from_bytes(bytes(buf))

    def test_truncated(self):
        _, ckpt = self.make()
        buf = to_bytes(ckpt)
        assert buf.startswith(MAGIC)
        for cut in (3, 40, len(buf) - 8):
            with pytest.raises(CheckpointIntegrityError):
                from_bytes(buf[:cut])

    def test_shape_mismatch_on_build(self):
        _, ckpt = self.make()
        ckpt.tensors["output.b"] = np.zeros(3)
        with pytest.raises(CheckpointFormatError, match="output.b"):
            ckpt.build_model()
