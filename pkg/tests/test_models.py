import struct

import pytest
import torch
import torch.nn as nn

from mtkd.corpus import BOS, EOS, CorpusSpec, batch, build_vocab, make_sample
from mtkd.models import (
    CheckpointError,
    FeatureSeq,
    ModelConfig,
    ModelError,
    SequentialEncoder,
    build_model,
    count_params,
    decode_teacher_forced,
    greedy_decode,
    image_encode,
    load_checkpoint,
    save_checkpoint,
    sequential_encode,
    text_encode,
)

TOY = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=32, src_vocab=8, tgt_vocab=8, dropout=0.0, seed=3)
SPEC = CorpusSpec(alphabet="abcd")
VOCAB = build_vocab(SPEC.alphabet)


def images_for(*texts):
    b = batch([make_sample(t, SPEC, VOCAB, index=i) for i, t in enumerate(texts)])
    return torch.from_numpy(b.images), torch.from_numpy(b.src_mask), b


@pytest.fixture
def student():
    return build_model("timt", TOY).eval()


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs", [dict(d_model=10, n_heads=3), dict(n_layers=0), dict(dropout=1.0), dict(dropout=-0.1)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ModelError):
            ModelConfig(**kwargs)


class TestImageEncoder:
    def test_length_is_width_over_eight(self, student):
        imgs = torch.rand(2, 32, 40, 1)
        fs = image_encode(student, imgs)
        assert fs.data.shape == (2, 5, TOY.d_model)

    def test_padding_masked(self, student):
        imgs, mask, _ = images_for("abc", "abcda")
        fs = image_encode(student, imgs)
        assert fs.mask.tolist() == mask.tolist()
        assert (fs.data[0, 3:] == 0).all()

    def test_features_independent_of_batch_padding(self, student):
        imgs, mask, _ = images_for("abc", "abcdab")
        alone, _, _ = images_for("abc")
        a = image_encode(student, imgs, mask).data[0, :3]
        b = image_encode(student, alone).data[0]
        torch.testing.assert_close(a, b, rtol=0, atol=1e-5)

    def test_deterministic(self):
        imgs, _, _ = images_for("abcd", "ba")
        a = image_encode(build_model("timt", TOY).eval(), imgs).data
        b = image_encode(build_model("timt", TOY).eval(), imgs).data
        assert torch.equal(a, b)

    @pytest.mark.parametrize("shape", [(1, 30, 16, 1), (1, 32, 16, 3), (1, 32, 12, 1)])
    def test_bad_shapes(self, student, shape):
        with pytest.raises(ModelError):
            image_encode(student, torch.zeros(shape))

    def test_wrong_model_kind(self):
        with pytest.raises(ModelError):
            image_encode(build_model("mt", TOY), torch.zeros(1, 32, 8, 1))


class TestTextEncoder:
    @pytest.fixture
    def mt(self):
        return build_model("mt", TOY).eval()

    def test_one_row_per_token(self, mt):
        assert text_encode(mt, torch.tensor([[4, 5]])).data.shape == (1, 2, TOY.d_model)

    def test_same_id_same_row(self, mt):
        fs = text_encode(mt, torch.tensor([[4, 6, 4]]))
        assert torch.equal(fs.data[0, 0], fs.data[0, 2])

    def test_pad_masked(self, mt):
        fs = text_encode(mt, torch.tensor([[4, 5, 0, 0]]))
        assert fs.mask.tolist() == [[True, True, False, False]]

    def test_out_of_range(self, mt):
        with pytest.raises(ModelError):
            text_encode(mt, torch.tensor([[4, 99]]))


class TestSequentialEncoder:
    def test_shape(self, student):
        fs = FeatureSeq(torch.randn(3, 5, TOY.d_model), torch.ones(3, 5, dtype=torch.bool))
        out = sequential_encode(student, fs)
        assert out.data.shape == (3, 5, TOY.d_model)

    def test_dim_mismatch(self, student):
        with pytest.raises(ModelError):
            sequential_encode(student, FeatureSeq(torch.randn(1, 2, 7), torch.ones(1, 2, dtype=torch.bool)))

    def test_permutation_equivariant_without_positions(self):
        torch.manual_seed(0)
        enc = SequentialEncoder(8, 2, 16, 2, 0.0, use_positions=False).eval()
        x = torch.randn(1, 4, 8)
        mask = torch.ones(1, 4, dtype=torch.bool)
        perm = torch.tensor([2, 0, 3, 1])
        out = enc(FeatureSeq(x, mask)).data
        out_p = enc(FeatureSeq(x[:, perm], mask)).data
        torch.testing.assert_close(out_p, out[:, perm], rtol=1e-5, atol=1e-6)

    def test_masked_rows_do_not_leak(self, student):
        torch.manual_seed(1)
        x = torch.randn(2, 6, TOY.d_model)
        mask = torch.tensor([[1, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 0]], dtype=torch.bool)
        y = x.clone()
        y[~mask] = torch.randn(int((~mask).sum()), TOY.d_model) * 10
        a = sequential_encode(student, FeatureSeq(x, mask)).data
        b = sequential_encode(student, FeatureSeq(y, mask)).data
        assert torch.equal(a[mask], b[mask])


class TestDecoder:
    def _memory(self, student):
        imgs, mask, _ = images_for("abcd")
        return student.encode(imgs, mask)[1]

    def test_shape_and_normalised(self, student):
        dists = decode_teacher_forced(student, self._memory(student), torch.tensor([[BOS, 4, 5, 6]]))
        assert dists.probs.shape == (1, 4, TOY.tgt_vocab)
        torch.testing.assert_close(dists.probs.sum(-1), torch.ones(1, 4), rtol=0, atol=1e-6)
        assert ((dists.probs >= 0) & (dists.probs <= 1)).all()

    def test_tir_vocab(self):
        tir = build_model("tir", ModelConfig(**{**TOY.__dict__, "src_vocab": 11})).eval()
        imgs, mask, _ = images_for("ab")
        mem = tir.encode(imgs, mask)[1]
        assert decode_teacher_forced(tir, mem, torch.tensor([[BOS, 4]])).logits.shape[-1] == 11

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_causal(self, student, k):
        mem = self._memory(student)
        a = torch.tensor([[BOS, 4, 5, 6, 7, 4]])
        b = a.clone()
        b[0, k] = 6 if a[0, k] != 6 else 5
        la = decode_teacher_forced(student, mem, a).logits
        lb = decode_teacher_forced(student, mem, b).logits
        assert torch.equal(la[:, :k], lb[:, :k])
        assert not torch.equal(la[:, k:], lb[:, k:])

    def test_prefix_must_start_with_bos(self, student):
        with pytest.raises(ModelError):
            decode_teacher_forced(student, self._memory(student), torch.tensor([[4, 5]]))

    def test_empty_prefix(self, student):
        with pytest.raises(ModelError):
            decode_teacher_forced(student, self._memory(student), torch.zeros(1, 0, dtype=torch.long))

    def test_out_of_range_prefix(self, student):
        with pytest.raises(ModelError):
            decode_teacher_forced(student, self._memory(student), torch.tensor([[BOS, 50]]))


class ConstantLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.register_buffer("logits", torch.tensor(logits, dtype=torch.float32))

    def forward(self, states):
        return self.logits.expand(*states.shape[:-1], -1)


class TestGreedy:
    def test_immediate_eos(self, student):
        logits = [0.0] * TOY.tgt_vocab
        logits[EOS] = 5.0
        student.decoder.out = ConstantLogits(logits)
        imgs, mask, _ = images_for("abc", "d")
        assert greedy_decode(student, imgs, 10, mask) == [[], []]

    def test_tie_goes_to_lowest_id(self, student):
        logits = [0.0] * TOY.tgt_vocab
        logits[5] = logits[7] = 3.0
        student.decoder.out = ConstantLogits(logits)
        imgs, mask, _ = images_for("ab")
        assert greedy_decode(student, imgs, 4, mask) == [[5, 5, 5, 5]]

    def test_max_len_validation(self, student):
        imgs, mask, _ = images_for("ab")
        with pytest.raises(ModelError):
            greedy_decode(student, imgs, 0, mask)

    def test_self_consistent_with_teacher_forcing(self, student):
        imgs, mask, _ = images_for("abcd", "dcb", "a")
        outs = greedy_decode(student, imgs, 6, mask)
        mem = student.encode(imgs, mask)[1]
        for i, seq in enumerate(outs):
            sub = FeatureSeq(mem.data[i : i + 1], mem.mask[i : i + 1])
            prefix = torch.tensor([[BOS] + seq])
            argmax = decode_teacher_forced(student, sub, prefix).logits.argmax(-1)[0].tolist()
            finished = len(seq) < 6
            assert argmax[: len(seq)] == seq
            if finished:
                assert argmax[len(seq)] == EOS

    def test_restores_training_mode(self, student):
        student.train()
        imgs, mask, _ = images_for("ab")
        greedy_decode(student, imgs, 3, mask)
        assert student.training


class TestCountParams:
    def test_linear(self):
        assert count_params(nn.Linear(4, 3)) == 15

    def test_embedding(self):
        assert count_params(nn.Embedding(6, 8)) == 48

    def test_student_smaller_than_pipeline(self):
        cfg = ModelConfig(src_vocab=20, tgt_vocab=20)
        student = count_params(build_model("timt", cfg))
        pipeline = count_params(build_model("tir", cfg)) + count_params(build_model("mt", cfg))
        assert student < pipeline

    def test_tir_equals_student_when_vocabs_match(self):
        cfg = ModelConfig(src_vocab=20, tgt_vocab=20)
        assert count_params(build_model("timt", cfg)) == count_params(build_model("tir", cfg))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        m = build_model("mt", TOY)
        path = save_checkpoint(m, tmp_path / "mt.ckpt")
        back = load_checkpoint(path)
        assert back.kind == "mt" and back.config == TOY
        for (n1, p1), (n2, p2) in zip(m.named_parameters(), back.named_parameters()):
            assert n1 == n2 and torch.equal(p1, p2)

    def test_byte_identical(self, tmp_path):
        a = save_checkpoint(build_model("tir", TOY), tmp_path / "a.ckpt").read_bytes()
        b = save_checkpoint(build_model("tir", TOY), tmp_path / "b.ckpt").read_bytes()
        assert a == b

    def _rewrite_header(self, path, edit):
        import json

        data = path.read_bytes()
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12 : 12 + hlen])
        edit(header)
        blob = json.dumps(header).encode()
        path.write_bytes(data[:8] + struct.pack("<I", len(blob)) + blob + data[12 + hlen :])

    def test_rejects_renamed_parameter(self, tmp_path):
        path = save_checkpoint(build_model("mt", TOY), tmp_path / "m.ckpt")
        self._rewrite_header(path, lambda h: h["params"][0].update(name="bogus"))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_wrong_shape(self, tmp_path):
        path = save_checkpoint(build_model("mt", TOY), tmp_path / "m.ckpt")

        def edit(h):
            h["params"][0]["shape"] = list(reversed(h["params"][0]["shape"])) + [1]

        self._rewrite_header(path, edit)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path):
        path = save_checkpoint(build_model("mt", TOY), tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt")
