"""Catalog loading, splice algebra, and the fold oracle."""

import itertools
import json

import pytest

from hanzibench import (
    ParseError, UnknownCharacter, UnknownPart, ValidationError,
    assembly_plan, canonicalize, load_catalog, splice, verify_assembly,
)


def minimal_doc(**overrides):
    doc = {
        "version": 1,
        "parts": [
            {"id": "A", "label": "日", "kind": "primitive"},
            {"id": "B", "label": "月", "kind": "primitive"},
            {"id": "C", "label": "明", "kind": "composite"},
        ],
        "equivalence": [],
        "recipes": [{"a": "A", "b": "B", "result": "C"}],
        "decompositions": {},
        "lexicon": {},
    }
    doc.update(overrides)
    return doc


def load_doc(doc):
    return load_catalog(json.dumps(doc, ensure_ascii=False))


class TestLoadCatalog:
    def test_fixture_counts(self, catalog):
        assert len(catalog.parts) == 20
        assert len(catalog.recipes) == 8
        assert len(catalog.decompositions) == 6
        assert sum(1 for p in catalog.parts.values() if p.kind == "primitive") == 12

    def test_empty_parts_rejected(self):
        with pytest.raises(ValidationError):
            load_doc(minimal_doc(parts=[]))

    def test_malformed_json_is_parse_error(self):
        with pytest.raises(ParseError):
            load_catalog("{not json")

    def test_dangling_recipe_result_named(self):
        doc = minimal_doc()
        doc["recipes"][0]["result"] = "P999"
        with pytest.raises(ValidationError, match="P999"):
            load_doc(doc)

    def test_duplicate_part_id(self):
        doc = minimal_doc()
        doc["parts"].append({"id": "A", "label": "x", "kind": "primitive"})
        with pytest.raises(ValidationError, match="duplicate part id: A"):
            load_doc(doc)

    def test_part_in_two_classes(self):
        doc = minimal_doc(equivalence=[["A", "B"], ["B"]])
        with pytest.raises(ValidationError, match="two equivalence classes"):
            load_doc(doc)

    def test_recipe_cycle_detected(self):
        doc = minimal_doc()
        doc["parts"].append({"id": "D", "label": "朙", "kind": "composite"})
        doc["recipes"] = [
            {"a": "A", "b": "C", "result": "D"},
            {"a": "A", "b": "D", "result": "C"},
        ]
        with pytest.raises(ValidationError, match="cycle"):
            load_doc(doc)

    def test_result_must_be_composite(self):
        doc = minimal_doc()
        doc["recipes"][0]["result"] = "A"
        with pytest.raises(ValidationError, match="not a composite"):
            load_doc(doc)

    def test_unproduced_composite_rejected(self):
        doc = minimal_doc()
        doc["parts"].append({"id": "Z", "label": "好", "kind": "composite"})
        with pytest.raises(ValidationError, match="Z"):
            load_doc(doc)

    def test_conflicting_duplicate_recipes(self):
        doc = minimal_doc()
        doc["parts"].append({"id": "D", "label": "朙", "kind": "composite"})
        doc["recipes"].append({"a": "B", "b": "A", "result": "D"})
        with pytest.raises(ValidationError, match="conflicting recipes"):
            load_doc(doc)

    def test_version_required(self):
        with pytest.raises(ValidationError, match="version"):
            load_doc(minimal_doc(version=2))

    def test_depths(self, catalog):
        assert catalog.parts["P001"].depth == 0
        assert catalog.parts["P101"].depth == 1  # 明
        assert catalog.parts["P104"].depth == 1  # 苗
        assert catalog.parts["P106"].depth == 2  # 猫
        assert catalog.parts["P107"].depth == 2  # 想


class TestCanonicalize:
    def test_singleton_class(self, catalog):
        assert canonicalize(catalog, "P001") == "cls:P001"

    def test_declared_equivalents_share_class(self, catalog):
        assert canonicalize(catalog, "P008") == canonicalize(catalog, "P009")

    def test_unknown_part(self, catalog):
        with pytest.raises(UnknownPart):
            canonicalize(catalog, "PX")


class TestSplice:
    def test_sun_moon_bright(self, catalog):
        assert splice(catalog, "P001", "P002") == "P101"

    def test_symmetric(self, catalog):
        assert splice(catalog, "P002", "P001") == "P101"

    def test_no_recipe_for_self_pair(self, catalog):
        assert splice(catalog, "P001", "P001") is None

    def test_unknown_part(self, catalog):
        with pytest.raises(UnknownPart):
            splice(catalog, "P001", "PX")

    def test_equivalent_substitute(self, catalog):
        # 亻 and 人 share a class, so either pairs with 木 into 休
        assert splice(catalog, "P008", "P003") == "P103"
        assert splice(catalog, "P009", "P003") == "P103"

    def test_exhaustive_symmetry_and_substitution(self, catalog):
        parts = sorted(catalog.parts)
        for a, b in itertools.product(parts, parts):
            assert splice(catalog, a, b) == splice(catalog, b, a)
        by_class = {}
        for pid in parts:
            by_class.setdefault(canonicalize(catalog, pid), []).append(pid)
        for members in by_class.values():
            for a, a2 in itertools.combinations(members, 2):
                for b in parts:
                    assert splice(catalog, a, b) == splice(catalog, a2, b)

    def test_purity(self, catalog):
        assert all(splice(catalog, "P006", "P007") == "P102" for _ in range(5))


class TestVerifyAssembly:
    def test_match(self, catalog):
        assert verify_assembly(catalog, "P106", "猫") is True

    def test_mismatch(self, catalog):
        assert verify_assembly(catalog, "P101", "猫") is False

    def test_identity(self, catalog):
        assert verify_assembly(catalog, "P101", "明") is True


class TestAssemblyPlan:
    def test_bright(self, catalog):
        assert assembly_plan(catalog, "明") == [("P001", "P002", "P101")]

    def test_depth_two_plan_length(self, catalog):
        assert len(assembly_plan(catalog, "猫")) == 2
        assert len(assembly_plan(catalog, "想")) == 2

    def test_unknown_character(self, catalog):
        with pytest.raises(UnknownCharacter):
            assembly_plan(catalog, "Q")

    def test_fold_oracle_every_character(self, catalog):
        # brute-force: run every plan through splice step by step
        for char in catalog.decompositions:
            plan = assembly_plan(catalog, char)
            for a, b, expected in plan:
                assert splice(catalog, a, b) == expected
            final = plan[-1][2]
            assert catalog.parts[final].label == char

    def test_acyclicity_via_depth(self, catalog):
        members = {}
        for pid, cls in catalog.equivalence.items():
            members.setdefault(cls, []).append(pid)
        for key, result in catalog.recipes.items():
            for cls in key:
                for pid in members[cls]:
                    assert catalog.parts[result].depth > catalog.parts[pid].depth
