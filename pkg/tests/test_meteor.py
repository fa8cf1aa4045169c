import pytest

from groundseg.meteor import MeteorParams, align, count_chunks, load_synonyms, meteor_score, tokenize


def test_identical_single_word():
    assert meteor_score("chair", "chair") == 0.5


def test_identical_eight_words():
    s = "the red chair sits left of the table"
    assert len(set(s.split())) == 7  # repeated "the" still aligns as one chunk
    assert meteor_score(s, s) == 0.9990234375
    distinct = "a red chair sits left of one table"
    assert meteor_score(distinct, distinct) == 1 - 0.5 / 512


@pytest.mark.parametrize("m", range(1, 12))
def test_identical_distinct_words_closed_form(m):
    s = " ".join(f"w{k}" for k in range(m))
    assert meteor_score(s, s) == 1 - 0.5 / m**3


def test_zero_overlap():
    assert meteor_score("red chair", "blue table") == 0.0


def test_empty_inputs_score_zero(caplog):
    assert meteor_score("", "a chair") == 0.0
    assert meteor_score("a chair", "   ") == 0.0
    assert "empty" in caplog.text


def test_porter_stem_stage():
    assert align(["running"], ["run"]) == [(0, 0)]
    assert meteor_score("running", "run") == 0.5
    assert meteor_score("running", "run", MeteorParams(use_stem=False)) == 0.0


def test_exact_beats_stem():
    # "run" exact-matches the second reference token; "running" stems onto the first
    assert align(["run", "running"], ["runs", "run"]) == [(0, 1), (1, 0)]


def test_synonym_stage(tmp_path):
    path = tmp_path / "syn.tsv"
    path.write_text("sofa\tcouch\n# comment\n", encoding="utf-8")
    params = MeteorParams(synonyms=load_synonyms(path))
    assert meteor_score("couch", "sofa") == 0.0
    assert meteor_score("couch", "sofa", params) == 0.5
    js = tmp_path / "syn.json"
    js.write_text('[["Sofa", "couch"]]', encoding="utf-8")
    assert load_synonyms(js) == load_synonyms(path)


def test_hand_computed_fragmented_score():
    # cand: "chair the red" vs ref: "the red chair": 3 matches, 2 chunks
    p = r = 1.0
    fmean = 10 * p * r / (r + 9 * p)
    want = fmean * (1 - 0.5 * (2 / 3) ** 3)
    assert meteor_score("chair the red", "the red chair") == pytest.approx(want, abs=1e-15)


def test_hand_computed_partial_overlap():
    # 2 of 4 candidate words match 2 of 3 reference words in one chunk
    p, r = 2 / 4, 2 / 3
    want = 10 * p * r / (r + 9 * p) * (1 - 0.5 * (1 / 2) ** 3)
    assert meteor_score("a red chair here", "red chair stands") == pytest.approx(want, abs=1e-15)


def test_count_chunks():
    assert count_chunks([]) == 0
    assert count_chunks([(0, 0), (1, 1), (2, 2)]) == 1
    assert count_chunks([(0, 2), (1, 0), (2, 1)]) == 2


def test_tokenize_strips_punctuation():
    assert tokenize("The chair, (left)!") == ["the", "chair", "left"]
