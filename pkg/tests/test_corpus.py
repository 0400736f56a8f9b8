import numpy as np
import pytest

from conceptmoe import corpus as C
from conceptmoe.errors import CapacityError, ConfigError, DataError, RealizationError
from conceptmoe.evaluation import RandomGuessPolicy, consistency_eval


def test_make_language_is_deterministic_and_bijective():
    a, b = C.make_language(3, "SOV"), C.make_language(3, "SOV")
    assert a == b
    assert len(set(a.lexicon.values())) == len(a.lexicon)
    assert set(a.lexicon) == set(C.CONCEPT_SYMBOLS)


def test_different_seeds_share_no_words_or_letters():
    specs = [C.make_language(s) for s in range(0, 6)]
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            wi, wj = set(specs[i].lexicon.values()), set(specs[j].lexicon.values())
            assert not wi & wj
            assert not set("".join(wi)) & set("".join(wj))


def test_identity_order_keeps_slot_order():
    spec = C.make_language(0, "SVO")
    st = C.ConceptStatement("attr", C.ENTITIES[0], "color", "red")
    assert C.realize(st, spec) == f"{C.ENTITIES[0]} color red"


def test_unknown_order_rule_is_config_error():
    with pytest.raises(ConfigError):
        C.make_language(1, "XYZ")


def test_generate_kb():
    assert len(C.generate_kb(0, 1)) == 1
    kb = C.generate_kb(5, 5000)
    assert len({st.meaning_key for st in kb}) == 5000
    assert kb == C.generate_kb(5, 5000)
    with pytest.raises(CapacityError):
        C.generate_kb(0, C.kb_capacity() + 1)


def test_realize_and_invert_round_trip():
    kb = C.generate_kb(1, 300)
    for spec in C.make_languages(4):
        for st in kb:
            assert C.invert(C.realize(st, spec), spec) == st


def test_same_statement_different_languages():
    st = C.generate_kb(2, 1)[0]
    a, b = C.make_language(1, "SOV"), C.make_language(2, "VSO")
    assert C.realize(st, a) != C.realize(st, b)


def test_missing_lexicon_entry_is_realization_error():
    spec = C.LanguageSpec("tiny", {"x": "y"}, "SVO", 99)
    with pytest.raises(RealizationError):
        C.realize(C.ConceptStatement("attr", "x", "color", "red"), spec)


def test_parallel_corpus_structure_and_splits(tmp_path):
    specs = C.make_languages(3)
    kb = C.generate_kb(3, 100)
    pc = C.build_parallel_corpus(kb, specs, (0.8, 0.1, 0.1), 3)
    assert len(pc.items) == 100
    assert all(len(it.texts) == 3 for it in pc.items)
    train, test = set(pc.splits["train"]), set(pc.splits["test"])
    assert not train & test
    assert len(train) + len(pc.splits["valid"]) + len(test) == 100
    path = tmp_path / "p.jsonl"
    pc.to_jsonl(path)
    again = C.ParallelCorpus.from_jsonl(path)
    assert again.items == pc.items and again.languages == pc.languages
    assert {k: set(v) for k, v in again.splits.items()} == {k: set(v) for k, v in pc.splits.items()}


def test_parallel_corpus_validation():
    specs = C.make_languages(2)
    kb = C.generate_kb(0, 10)
    with pytest.raises(ConfigError):
        C.build_parallel_corpus(kb, specs, (0.5, 0.1, 0.1))
    with pytest.raises(ConfigError):
        C.build_parallel_corpus(kb, specs[:1])


def test_qa_items_and_round_trip(tmp_path):
    specs = C.make_languages(3)
    kb = C.generate_kb(4, 500)
    qa = C.build_qa_corpus(kb, specs, 100, 4)
    for it in qa:
        for lang in it.question:
            opts = it.options[lang]
            assert len(opts) == 4 and len(set(opts)) == 4
            spec = next(s for s in specs if s.lang_id == lang)
            assert opts[it.answer] == spec.lexicon[it.statement.obj]
    path = tmp_path / "qa.jsonl"
    C.qa_to_jsonl(qa, path)
    assert C.qa_from_jsonl(path) == qa


def test_qa_text_uses_only_own_alphabet():
    specs = C.make_languages(3)
    qa = C.build_qa_corpus(C.generate_kb(4, 200), specs, 50, 4)
    letters = {s.lang_id: set("".join(s.lexicon.values())) | {" "} for s in specs}
    for it in qa:
        for lang, q in it.question.items():
            assert set(q) <= letters[lang]
            assert set("".join(it.options[lang])) <= letters[lang]


def test_qa_capacity_errors():
    specs = C.make_languages(2)
    kb = C.generate_kb(0, 5)
    with pytest.raises(CapacityError):
        C.build_qa_corpus(kb, specs, 6)
    tiny = [C.ConceptStatement("attr", C.ENTITIES[i], "color", "red") for i in range(5)]
    with pytest.raises(CapacityError):
        C.build_qa_corpus(tiny, specs, 2)


def test_qa_answer_mismatch_is_data_error(tmp_path):
    path = tmp_path / "qa.jsonl"
    path.write_text(
        '{"meaning_key":"k","lang":"a","question":"q","options":["1","2","3","4"],"answer":0}\n'
        '{"meaning_key":"k","lang":"b","question":"q","options":["1","2","3","4"],"answer":1}\n'
    )
    with pytest.raises(DataError):
        C.qa_from_jsonl(path)


def test_random_guessing_is_near_chance():
    specs = C.make_languages(3)
    kb = C.generate_kb(9, 2000)
    qa = C.build_qa_corpus(kb, specs, 2000, 9)
    rep = consistency_eval(RandomGuessPolicy(seed=1), qa, [s.lang_id for s in specs])
    for lang, acc in rep.accuracy.items():
        assert abs(acc - 0.25) <= 0.03, (lang, acc)


def test_generation_is_pure_function_of_seed():
    specs = C.make_languages(3)
    a = C.build_parallel_corpus(C.generate_kb(8, 50), specs, seed=8)
    b = C.build_parallel_corpus(C.generate_kb(8, 50), specs, seed=8)
    assert a == b
    assert np.array_equal(
        [it.answer for it in C.build_qa_corpus(C.generate_kb(8, 50), specs, 20, 8)],
        [it.answer for it in C.build_qa_corpus(C.generate_kb(8, 50), specs, 20, 8)],
    )
