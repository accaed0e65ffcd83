import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuronedit.synthetic import DESK_GENDERS, DISTRACTORS, MARKER
from neuronedit.tokenizer import Tokenizer, TokenizerError, bytes_to_unicode, train_bpe

TEXTS = [
    "The ambitious member is a man",
    "Q: Is the nurse a man or a woman? A: The answer is woman",
    "12+35=47",
    "naïve café, 東京 and emoji 🙂!",
    "  leading and trailing   ",
    "it's they'll we've I'm you'd",
    "tabs\tand\nnewlines\n\n",
]


@settings(max_examples=1000, deadline=None)
@given(st.binary(max_size=64))
def test_arbitrary_bytes_round_trip(tok, data):
    assert tok.decode_bytes(tok.encode(data)) == data


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_text_round_trip(tok, text):
    assert tok.decode(tok.encode(text)) == text


def test_forced_words_are_single_tokens(tok):
    for w in [" " + g for g in DESK_GENDERS] + [MARKER, *DISTRACTORS]:
        assert len(tok.encode(w, add_bos=False)) == 1


def test_bos_handling(tok):
    ids = tok.encode("hi")
    assert ids[0] == tok.bos_token_id == tok.vocab_size - 1
    assert tok.encode("hi", add_bos=False) == ids[1:]
    assert tok.decode(ids) == "hi"
    assert tok.token_str(tok.bos_token_id) == "<|endoftext|>"


def test_pieces_are_printable(tok):
    assert tok.piece(tok.first_token(" man")) == "\u0120man"
    assert all(tok.piece(i).isprintable() for i in range(tok.vocab_size))


def test_byte_table_is_a_bijection():
    table = bytes_to_unicode()
    assert len(table) == 256 and len(set(table.values())) == 256


def test_training_is_deterministic():
    corpus = ["low lower lowest", "new newer newest", "wide wider widest"] * 3
    a = train_bpe(corpus, 20, force=[" newest"])
    b = train_bpe(corpus, 20, force=[" newest"])
    assert a.merges == b.merges and a.vocab == b.vocab
    assert len(a.encode(" newest", add_bos=False)) == 1


def test_save_and_load(tok, tmp_path):
    tok.save(tmp_path)
    back = Tokenizer.from_dir(tmp_path)
    assert back.vocab == tok.vocab and back.merges == tok.merges
    for t in TEXTS:
        assert back.encode(t) == tok.encode(t)


def test_matches_hugging_face_gpt2_tokenizer(tok, tmp_path):
    transformers = pytest.importorskip("transformers")
    tok.save(tmp_path)
    hf = transformers.GPT2Tokenizer(str(tmp_path / "vocab.json"), str(tmp_path / "merges.txt"))
    for t in TEXTS:
        assert tok.encode(t, add_bos=False) == hf.encode(t)


def test_unknown_ids_and_pieces_raise(tok):
    with pytest.raises(TokenizerError):
        tok.decode([10**6])
    small = Tokenizer({"a": 0, "<|endoftext|>": 1}, [])
    with pytest.raises(TokenizerError):
        small.encode("b")
    with pytest.raises(TokenizerError):
        Tokenizer({"a": 0, "b": 0}, [])
    with pytest.raises(TokenizerError):
        small.first_token("")
