import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3g.corpus import (
    Case,
    DatasetError,
    DiseaseDictionary,
    ReferenceResponse,
    build_disease_dictionary,
    derive_reference_weight,
    load_dataset,
    with_weights,
    write_dataset,
)


def _record(eid="E1", images=("a.jpg",), responses=None, **extra):
    rec = {
        "encounter_id": eid,
        "image_ids": list(images),
        "query_text": "itchy rash",
        "language": "en",
        "responses": responses if responses is not None else [
            {"text": "It is eczema.", "author_rank": 0, "validation_level": 1}
        ],
    }
    rec.update(extra)
    return rec


def _write(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


def test_load_three_lines(tmp_path):
    path = _write(tmp_path / "d.jsonl", [_record(f"E{i}", gold_label="eczema") for i in range(3)])
    cases = load_dataset(path, "train")
    assert len(cases) == 3
    c = cases[1]
    assert c.encounter_id == "E1"
    assert c.image_ids == ("a.jpg",)
    assert c.query_text == "itchy rash"
    assert c.responses[0] == ReferenceResponse("It is eczema.", 0, 1)
    assert c.gold_label == "eczema"


def test_empty_image_ids_cites_line(tmp_path):
    path = _write(tmp_path / "d.jsonl", [_record("E0"), _record("E1", images=())])
    with pytest.raises(DatasetError) as err:
        load_dataset(path, "train")
    assert err.value.line == 2
    assert ":2:" in str(err.value)


@pytest.mark.parametrize(
    "bad, line",
    [
        ({"image_ids": ["x"], "responses": [{"text": "t"}]}, 1),
        ({"encounter_id": "E9", "responses": [{"text": "t"}]}, 1),
    ],
)
def test_missing_fields(tmp_path, bad, line):
    path = _write(tmp_path / "d.jsonl", [bad])
    with pytest.raises(DatasetError) as err:
        load_dataset(path, "validation")
    assert err.value.line == line


def test_duplicate_encounter(tmp_path):
    path = _write(tmp_path / "d.jsonl", [_record("E1"), _record("E2"), _record("E1")])
    with pytest.raises(DatasetError, match="duplicate") as err:
        load_dataset(path, "train")
    assert err.value.line == 3


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nope.jsonl", "train")


def test_test_split_allows_no_responses(tmp_path):
    path = _write(tmp_path / "d.jsonl", [_record(responses=[])])
    assert load_dataset(path, "test")[0].responses == ()
    with pytest.raises(DatasetError):
        load_dataset(path, "validation")


def test_invalid_json_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(_record()) + "\n{not json\n")
    with pytest.raises(DatasetError) as err:
        load_dataset(path, "train")
    assert err.value.line == 2


def _synthetic_cases(n, seed=0):
    rng = random.Random(seed)
    words = ["red", "itchy", "patch", "palm", "scalp", "ça", "眼", "lump"]
    cases = []
    for i in range(n):
        responses = tuple(
            ReferenceResponse(
                " ".join(rng.choices(words, k=rng.randint(1, 6))),
                rng.randint(0, 3),
                rng.randint(0, 2),
            )
            for _ in range(rng.randint(1, 4))
        )
        cases.append(
            Case(
                f"ENC{i:05d}",
                tuple(f"IMG_{i}_{j}.jpg" for j in range(rng.randint(1, 3))),
                " ".join(rng.choices(words, k=rng.randint(0, 8))),
                "en",
                responses,
                rng.choice([None, "hand eczema", "psoriasis"]),
            )
        )
    return cases


def test_round_trip_842(tmp_path):
    cases = _synthetic_cases(842)
    write_dataset(cases, tmp_path / "train.jsonl")
    loaded = load_dataset(tmp_path / "train.jsonl", "train")
    assert len(loaded) == 842
    for a, b in zip(cases, loaded):
        assert a == b


def test_weight_sole_senior():
    r = ReferenceResponse("It is eczema.", 0)
    assert derive_reference_weight(r, [r]) == 1.0


def test_weight_unique_senior_among_duplicates():
    dup1 = ReferenceResponse("It is tinea.", 1)
    dup2 = ReferenceResponse("It is tinea.", 1)
    unique = ReferenceResponse("It is eczema.", 0)
    siblings = [dup1, dup2, unique]
    assert derive_reference_weight(unique, siblings) == pytest.approx(0.75)
    # duplicates: 0.5 * 1/2 + 0.5 * 1
    assert derive_reference_weight(dup1, siblings) == pytest.approx(0.75)


def test_weight_all_identical():
    rs = [ReferenceResponse("same text", 0) for _ in range(4)]
    assert all(derive_reference_weight(r, rs) == 1.0 for r in rs)


def test_weight_consistency_uses_tokenizer():
    a = ReferenceResponse("It is Eczema.", 2)
    b = ReferenceResponse("it is eczema .", 2)
    assert derive_reference_weight(a, [a, b], alpha=0.0) == 1.0


def test_weight_level_factor_hook():
    r = ReferenceResponse("x", 0, validation_level=2)
    assert derive_reference_weight(r, [r], level_factors={2: 0.5}) == 0.5
    assert derive_reference_weight(r, [r], level_factors={1: 0.5}) == 1.0


def test_weight_errors():
    r = ReferenceResponse("x", 0)
    with pytest.raises(ValueError):
        derive_reference_weight(r, [])
    with pytest.raises(ValueError):
        derive_reference_weight(r, [ReferenceResponse("y", 0)])


responses_st = st.lists(
    st.builds(
        ReferenceResponse,
        st.sampled_from(["eczema", "It is eczema.", "psoriasis", "tinea capitis"]),
        st.integers(0, 5),
        st.integers(0, 2),
    ),
    min_size=1,
    max_size=6,
)


@settings(max_examples=100, deadline=None)
@given(responses_st, st.floats(0, 1), st.randoms())
def test_weight_permutation_invariant_and_bounded(siblings, alpha, rnd):
    shuffled = list(siblings)
    rnd.shuffle(shuffled)
    for r in siblings:
        w = derive_reference_weight(r, siblings, alpha)
        assert 0.0 <= w <= 1.0
        assert w == derive_reference_weight(r, shuffled, alpha)


@settings(max_examples=100, deadline=None)
@given(responses_st, st.floats(0, 1), st.integers(0, 5))
def test_weight_monotone(siblings, alpha, bump):
    r = siblings[0]
    base = derive_reference_weight(r, siblings, alpha)
    junior = ReferenceResponse(r.text, r.author_rank + bump, r.validation_level)
    assert derive_reference_weight(junior, [junior, *siblings[1:]], alpha) <= base + 1e-15
    # one more copy of r's text: its duplicate count cannot drop
    more = [*siblings, ReferenceResponse(r.text, 9)]
    assert derive_reference_weight(r, more, alpha) >= base - 1e-15


def test_with_weights_fills_every_response():
    case = _synthetic_cases(1, seed=3)[0]
    assert all(0 <= r.weight <= 1 for r in with_weights(case).responses)


def _labelled(*labels):
    return [Case(f"E{i}", ("a",), gold_label=lab) for i, lab in enumerate(labels)]


def test_dictionary_dedup():
    d = build_disease_dictionary(_labelled("Hand Eczema", "hand eczema"))
    assert list(d.entries) == ["hand eczema"]
    assert d.entries["hand eczema"] == ("hand", "eczema")


def test_dictionary_paren_strip():
    d = build_disease_dictionary(_labelled("dyshidrotic eczema (pompholyx)"))
    assert "dyshidrotic eczema" in d


def test_dictionary_requires_labels():
    with pytest.raises(DatasetError, match="label extraction"):
        build_disease_dictionary(_labelled(None))
    with pytest.raises(DatasetError):
        build_disease_dictionary([])


def test_dictionary_idempotent_and_saved(tmp_path):
    cases = _labelled("Psoriasis", "tinea capitis", "Tinea", "", None)
    a = build_disease_dictionary(cases)
    b = build_disease_dictionary(cases)
    assert a == b
    assert "" not in a
    a.save(tmp_path / "d.json")
    assert DiseaseDictionary.load(tmp_path / "d.json") == a
