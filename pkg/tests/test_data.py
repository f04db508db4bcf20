import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from paraformer.data import (BOS_ID, EOS_ID, PAD_ID, RESERVED, SEP_ID, UNK_ID, DialogueExample, build_vocab,
                             encode_context, load_corpus, load_word_vectors, make_batches, window_context, write_jsonl)
from paraformer.errors import DataError, FormatError, ParseError
from paraformer.init import SeededRng


def _write(tmp_path, lines, name="c.jsonl"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _ex(context, response):
    return DialogueExample([u.split() for u in context], response.split())


def test_load_single_example(tmp_path):
    path = _write(tmp_path, ['{"context":["Hello there"],"response":"hi"}'])
    [ex] = load_corpus(path)
    assert ex.context == [["hello", "there"]] and ex.response == ["hi"]


def test_missing_response_names_line(tmp_path):
    path = _write(tmp_path, ['{"context":["a"],"response":"b"}', '{"context":["a"]}'])
    with pytest.raises(ParseError) as info:
        load_corpus(path)
    assert info.value.line == 2 and "response" in str(info.value)


@pytest.mark.parametrize("line", ["not json", "[1, 2]", '{"context": [], "response": "x"}',
                                  '{"context": ["a"], "response": 3}'])
def test_malformed_lines(tmp_path, line):
    with pytest.raises(ParseError):
        load_corpus(_write(tmp_path, [line]))


def test_empty_corpus(tmp_path):
    with pytest.raises(DataError):
        load_corpus(_write(tmp_path, [""]))


def test_unreadable_corpus(tmp_path):
    with pytest.raises(OSError, match="nope.jsonl"):
        load_corpus(tmp_path / "nope.jsonl")


def test_long_context_kept_at_load(tmp_path):
    rows = [{"context": [f"t{i}" for i in range(7)], "response": "r"}]
    write_jsonl(rows, tmp_path / "c.jsonl")
    [ex] = load_corpus(tmp_path / "c.jsonl")
    assert len(ex.context) == 7


@pytest.mark.parametrize("turns, max_turns, kept", [(7, 5, ["t2", "t3", "t4", "t5", "t6"]),
                                                    (3, 5, ["t0", "t1", "t2"]), (4, 1, ["t3"])])
def test_window_context(turns, max_turns, kept):
    ex = _ex([f"t{i}" for i in range(turns)], "r")
    assert [u[0] for u in window_context(ex, max_turns).context] == kept


@given(st.integers(1, 12))
def test_window_never_exceeds_five(turns):
    assert len(window_context(_ex([f"t{i}" for i in range(turns)], "r")).context) <= 5


def test_vocab_frequency_order():
    vocab = build_vocab([_ex(["a a b"], "")])
    assert vocab.itos[:len(RESERVED)] == list(RESERVED)
    assert vocab.itos[len(RESERVED)] == "a"


def test_vocab_min_count_maps_to_unk():
    vocab = build_vocab([_ex(["a b"], "a b")], min_count=3)
    assert len(vocab) == len(RESERVED)
    assert vocab.encode(["a", "b"]) == [UNK_ID, UNK_ID]


def test_vocab_tie_break():
    vocab = build_vocab([_ex(["y x"], "")])
    assert vocab.itos[len(RESERVED):] == ["x", "y"]


def test_vocab_empty():
    with pytest.raises(DataError):
        build_vocab([])


def test_reserved_ids():
    assert (PAD_ID, BOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


@given(st.lists(st.sampled_from(["a", "b", "c", "d", "e"]), min_size=1, max_size=20))
def test_encode_decode_round_trip(tokens):
    vocab = build_vocab([_ex(["a b c d e"], "")])
    assert vocab.decode(vocab.encode(tokens)) == tokens


def test_context_joined_with_separator():
    vocab = build_vocab([_ex(["a b", "c"], "")])
    ids = encode_context(_ex(["a b", "c"], ""), vocab, 16)
    assert ids == [vocab.stoi["a"], vocab.stoi["b"], SEP_ID, vocab.stoi["c"]]
    assert encode_context(_ex(["a b", "c"], ""), vocab, 2) == [SEP_ID, vocab.stoi["c"]]


def test_batch_sizes():
    examples = [_ex(["a"], "b")] * 5
    vocab = build_vocab(examples)
    assert [len(b) for b in make_batches(examples, vocab, 2, 8)] == [2, 2, 1]


def test_pad_masks():
    examples = [_ex(["a b c"], "a"), _ex(["a"], "a b c")]
    vocab = build_vocab(examples)
    [batch] = make_batches(examples, vocab, 2, 8)
    assert np.array_equal(batch.context_pad, batch.context_ids == PAD_ID)
    assert np.array_equal(batch.response_pad, batch.response_in == PAD_ID)
    assert batch.context_pad.tolist() == [[False] * 3, [False, True, True]]


def test_batch_order_is_seeded():
    examples = [_ex([f"t{i}"], "r") for i in range(20)]
    vocab = build_vocab(examples)
    a = make_batches(examples, vocab, 4, 8, SeededRng(3))
    b = make_batches(examples, vocab, 4, 8, SeededRng(3))
    c = make_batches(examples, vocab, 4, 8, SeededRng(4))
    assert all(np.array_equal(x.context_ids, y.context_ids) for x, y in zip(a, b))
    assert not all(np.array_equal(x.context_ids, y.context_ids) for x, y in zip(a, c))


@given(st.lists(st.lists(st.sampled_from("abcdef"), min_size=0, max_size=9), min_size=1, max_size=6))
def test_shifted_alignment(responses):
    examples = [_ex(["a"], " ".join(r)) for r in responses]
    vocab = build_vocab(examples + [_ex(["a b c d e f"], "")])
    [batch] = make_batches(examples, vocab, len(examples), 8)
    for row, resp in enumerate(responses):
        seq = [BOS_ID] + vocab.encode(resp)[:7] + [EOS_ID]
        length = len(seq) - 1
        assert batch.response_in[row, :length].tolist() == seq[:-1]
        assert batch.response_target[row, :length].tolist() == seq[1:]
        assert (batch.response_target[row, length:] == PAD_ID).all()


def _vectors(tmp_path, rows):
    path = tmp_path / "vec.txt"
    path.write_text("".join(" ".join([tok, *map(str, vals)]) + "\n" for tok, vals in rows), encoding="utf-8")
    return path


def test_word_vectors_full_coverage(tmp_path):
    vocab = build_vocab([_ex(["a b"], "")])
    path = _vectors(tmp_path, [("a", [1.0, 2.0, 3.0]), ("b", [4.0, 5.0, 6.0]), ("zzz", [0, 0, 0])])
    table, coverage = load_word_vectors(path, vocab, 3)
    assert coverage == 1.0
    assert table.data[vocab.stoi["b"]].tolist() == [4.0, 5.0, 6.0]
    assert table.grad_enabled


def test_word_vectors_wrong_width(tmp_path):
    vocab = build_vocab([_ex(["a b"], "")])
    path = _vectors(tmp_path, [("a", [1.0, 2.0, 3.0]), ("b", [4.0, 5.0])])
    with pytest.raises(FormatError, match=":2:"):
        load_word_vectors(path, vocab, 3)


def test_word_vectors_empty_file(tmp_path):
    vocab = build_vocab([_ex(["a b"], "")])
    path = tmp_path / "empty.txt"
    path.write_text("", encoding="utf-8")
    table, coverage = load_word_vectors(path, vocab, 400, trainable=False)
    assert coverage == 0.0
    assert not table.grad_enabled
    assert abs(table.data.std() - 0.01) < 0.001


def test_empty_context_rejected():
    with pytest.raises(DataError):
        DialogueExample([], ["x"])


def test_corpus_round_trip(tmp_path):
    rows = [{"context": ["A b", "c"], "response": "D"}]
    write_jsonl(rows, tmp_path / "r.jsonl")
    assert json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0]) == rows[0]
    assert load_corpus(tmp_path / "r.jsonl")[0].response == ["d"]
