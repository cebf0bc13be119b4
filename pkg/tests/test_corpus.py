import numpy as np
import pytest

from charflip import corpus


def test_default_vocab_size_is_96():
    v = corpus.default_vocab()
    assert v.size == 96
    assert v.pad_index == 96
    assert v.oov_index == 95


def test_vocab_roundtrip_every_member():
    v = corpus.default_vocab()
    for i in range(v.size):
        assert v.encode_char(v.decode_char(i)) == i


def test_encode_decode_char():
    v = corpus.default_vocab()
    assert v.decode_char(v.encode_char("a")) == "a"


def test_out_of_set_char_maps_to_oov():
    v = corpus.default_vocab()
    assert v.encode_char("é") == v.oov_index
    assert v.encode_char("\n") == v.oov_index


def test_pad_index_has_no_character():
    v = corpus.default_vocab()
    with pytest.raises(ValueError):
        v.decode_char(v.pad_index)


def test_custom_vocab():
    v = corpus.Vocab("abcdefg")
    assert v.size == 8
    assert v.encode("abz") == (0, 1, v.oov_index)


def test_encode_text_roundtrip():
    v = corpus.default_vocab()
    text = 'He said, "go now!" (twice) ~ 42%'
    assert v.decode(v.encode(text)) == text


def test_sentence_flip():
    v = corpus.default_vocab()
    s = corpus.sentence_from_text(v, "s1", "cat", 1)
    flipped = s.with_flip(1, v.encode_char("o"), v)
    assert flipped.text == "cot"
    assert flipped.chars == v.encode("cot")
    assert s.text == "cat"  # original untouched


def test_sentence_flip_out_of_range():
    v = corpus.default_vocab()
    s = corpus.sentence_from_text(v, "s1", "cat", 1)
    with pytest.raises(IndexError):
        s.with_flip(3, 0, v)


def test_length_cap_applied():
    v = corpus.default_vocab()
    s = corpus.sentence_from_text(v, "s1", "x" * 700, 0, max_chars=500)
    assert len(s) == 500


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def write_rows(path, rows, header="id,comment_text,toxic"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")


def test_ingest_three_row_fixture(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, ["a,hello there,0", "b,you absolute clown,1", "c,fine words,0"])
    res = corpus.ingest_csv(p, corpus.default_vocab())
    assert [s.id for s in res.sentences] == ["a", "b", "c"]
    assert [s.label for s in res.sentences] == [0, 1, 0]
    assert res.skipped == 0


def test_ingest_quoted_commas(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, ['a,"well, well, well",0'])
    res = corpus.ingest_csv(p, corpus.default_vocab())
    assert res.sentences[0].text == "well, well, well"


def test_ingest_reports_class_balance(tmp_path):
    p = tmp_path / "c.csv"
    rows = [f"r{i},word number {i},{1 if i < 19 else 0}" for i in range(200)]
    write_rows(p, rows)
    res = corpus.ingest_csv(p, corpus.default_vocab())
    assert res.toxic_fraction == pytest.approx(0.095)
    assert res.summary()["toxic_fraction"] == pytest.approx(0.095)


def test_ingest_lenient_skips_bad_rows(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, ["a,good row,0", "b,bad label,7", "c,,1", "d,another,1"])
    res = corpus.ingest_csv(p, corpus.default_vocab())
    assert len(res.sentences) == 2
    assert res.skipped == 2


def test_ingest_strict_aborts(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, ["a,good,0", "b,bad,7"])
    with pytest.raises(corpus.IngestError):
        corpus.ingest_csv(p, corpus.default_vocab(), strict=True)


def test_ingest_missing_column(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("id,body\n1,hi\n", encoding="utf-8")
    with pytest.raises(corpus.IngestError, match="missing columns"):
        corpus.ingest_csv(p, corpus.default_vocab())


def test_ingest_encode_decode_reproduces_text(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, ['a,"mixed: Case, digits 123 & symbols <>!",0'])
    v = corpus.default_vocab()
    res = corpus.ingest_csv(p, v)
    s = res.sentences[0]
    assert v.decode(s.chars) == s.text


def test_write_csv_roundtrip(tmp_path):
    v = corpus.default_vocab()
    sents = [
        corpus.sentence_from_text(v, "a", 'quote " and, comma', 1),
        corpus.sentence_from_text(v, "b", "plain", 0),
    ]
    p = tmp_path / "out.csv"
    corpus.write_csv(sents, p)
    back = corpus.ingest_csv(p, v)
    assert [(s.id, s.text, s.label) for s in back.sentences] == [
        (s.id, s.text, s.label) for s in sents
    ]


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def test_synth_exact_toxic_count():
    sents = corpus.synth_corpus(seed=1, n=100, toxic_fraction=0.5)
    assert sum(s.label for s in sents) == 50
    assert len(sents) == 100


def test_synth_toxic_iff_trigger():
    sents = corpus.synth_corpus(seed=2, n=200)
    for s in sents:
        has_trigger = any(t in s.text for t in corpus.DEFAULT_TRIGGERS)
        assert has_trigger == bool(s.label)


def test_synth_removing_trigger_detoxifies():
    sents = corpus.synth_corpus(seed=3, n=100)
    for s in sents:
        if not s.label:
            continue
        words = [w for w in s.text.split(" ") if w not in corpus.DEFAULT_TRIGGERS]
        rest = " ".join(words)
        assert not any(t in rest for t in corpus.DEFAULT_TRIGGERS)


def test_synth_extra_triggers_make_hard_tail():
    sents = corpus.synth_corpus(seed=9, n=400, extra_trigger_prob=0.4)
    multi = 0
    for s in sents:
        if not s.label:
            continue
        count = sum(s.text.split(" ").count(t) for t in corpus.DEFAULT_TRIGGERS)
        assert count >= 1
        multi += count >= 2
    assert multi > 0


def test_load_lexicon(tmp_path):
    p = tmp_path / "lex.txt"
    p.write_text("grump\n\nnitwit\n", encoding="utf-8")
    assert corpus.load_lexicon(p) == ("grump", "nitwit")
    empty = tmp_path / "empty.txt"
    empty.write_text("\n", encoding="utf-8")
    with pytest.raises(ValueError, match="empty"):
        corpus.load_lexicon(empty)


def test_synth_custom_lexicon():
    triggers = ("grump", "nitwit")
    sents = corpus.synth_corpus(seed=10, n=60, triggers=triggers)
    for s in sents:
        assert bool(s.label) == any(t in s.text for t in triggers)


def test_synth_deterministic():
    a = corpus.synth_corpus(seed=4, n=50)
    b = corpus.synth_corpus(seed=4, n=50)
    assert [(s.id, s.text, s.label) for s in a] == [(s.id, s.text, s.label) for s in b]
    c = corpus.synth_corpus(seed=5, n=50)
    assert [s.text for s in a] != [s.text for s in c]


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def ids(group):
    return {s.id for s in group}


def test_split_exact_sizes():
    sents = corpus.synth_corpus(seed=6, n=100)
    train, val, test = corpus.split(sents, corpus.SplitSpec((0.8, 0.1, 0.1), seed=0))
    assert (len(train), len(val), len(test)) == (80, 10, 10)


def test_split_same_seed_identical():
    sents = corpus.synth_corpus(seed=7, n=97)
    spec = corpus.SplitSpec((0.7, 0.2, 0.1), seed=3)
    a = corpus.split(sents, spec)
    b = corpus.split(list(reversed(sents)), spec)
    for ga, gb in zip(a, b):
        assert ids(ga) == ids(gb)


def test_split_disjoint_and_complete():
    rng = np.random.default_rng(8)
    for trial in range(5):
        n = int(rng.integers(10, 200))
        sents = corpus.synth_corpus(seed=100 + trial, n=n)
        train, val, test = corpus.split(sents, corpus.SplitSpec(seed=trial))
        assert ids(train) | ids(val) | ids(test) == ids(sents)
        assert not (ids(train) & ids(val))
        assert not (ids(train) & ids(test))
        assert not (ids(val) & ids(test))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        corpus.SplitSpec((0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        corpus.SplitSpec((1.0, -0.5, 0.5))
