"""Part catalog: parts, equivalence classes, recipe table and decomposition trees.

A catalog is immutable after load. Splicing is a pure lookup: the unordered
pair of the two parts' equivalence classes either maps to a composite part or
it doesn't. Decomposition trees are strictly binary and double as the oracle
for assembly plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Optional, Union

CATALOG_VERSION = 1


class CatalogError(Exception):
    """Base for catalog loading/lookup failures."""


class ParseError(CatalogError):
    """Catalog file is not syntactically valid."""


class ValidationError(CatalogError):
    """Catalog parsed but violates an invariant; message names the entity."""


class UnknownPart(CatalogError):
    def __init__(self, part_id: str):
        super().__init__(f"unknown part: {part_id}")
        self.part_id = part_id


class UnknownCharacter(CatalogError):
    def __init__(self, char: str):
        super().__init__(f"no decomposition for character: {char}")
        self.char = char


@dataclass(frozen=True)
class Part:
    id: str
    label: str
    kind: str  # "primitive" | "composite"
    depth: int


@dataclass(frozen=True)
class TreeLeaf:
    part: str  # PartId of a primitive


@dataclass(frozen=True)
class TreeNode:
    op: str  # composition operator tag (⿰, ⿱, ...); layout hint only
    left: Union["TreeNode", TreeLeaf]
    right: Union["TreeNode", TreeLeaf]


Tree = Union[TreeNode, TreeLeaf]


@dataclass(frozen=True)
class PartCatalog:
    parts: dict[str, Part]
    equivalence: dict[str, str]  # PartId -> ClassId
    recipes: dict[frozenset, str]  # {ClassId, ClassId} -> result PartId
    decompositions: dict[str, Tree]  # character -> tree
    lexicon: dict[str, str]  # lowercase keyword -> character
    label_index: dict[str, str] = field(default_factory=dict)  # label -> PartId

    def part(self, part_id: str) -> Part:
        try:
            return self.parts[part_id]
        except KeyError:
            raise UnknownPart(part_id) from None


def canonicalize(catalog: PartCatalog, part_id: str) -> str:
    """Return the equivalence class id of a part."""
    catalog.part(part_id)
    return catalog.equivalence[part_id]


def splice(catalog: PartCatalog, a: str, b: str) -> Optional[str]:
    """Attempt to pair two parts. Returns the composite PartId, or None when
    the class pair has no recipe (a rejected splice, not a fault)."""
    key = frozenset((canonicalize(catalog, a), canonicalize(catalog, b)))
    return catalog.recipes.get(key)


def verify_assembly(catalog: PartCatalog, assembled: str, target: str) -> bool:
    """Structural verification: does the assembled part's label equal the
    target character exactly?"""
    return catalog.part(assembled).label == target


def assembly_plan(catalog: PartCatalog, target: str) -> list[tuple[str, str, str]]:
    """Post-order fold of the character's decomposition tree into splice steps.

    Each step is (left_part, right_part, result_part); executing them in order
    through splice() reassembles the character.
    """
    tree = catalog.decompositions.get(target)
    if tree is None:
        raise UnknownCharacter(target)
    steps: list[tuple[str, str, str]] = []

    def fold(node: Tree) -> str:
        if isinstance(node, TreeLeaf):
            return node.part
        left = fold(node.left)
        right = fold(node.right)
        result = splice(catalog, left, right)
        if result is None:
            raise ValidationError(
                f"decomposition of {target!r} has no recipe for pair ({left}, {right})"
            )
        steps.append((left, right, result))
        return result

    root = fold(tree)
    if catalog.parts[root].label != target:
        raise ValidationError(
            f"decomposition of {target!r} folds to {catalog.parts[root].label!r}"
        )
    return steps


def load_catalog(source: Union[str, bytes, IO]) -> PartCatalog:
    """Parse and validate a catalog file (see docs/catalog-format.md).

    All invariants are checked eagerly; the first violation raises
    ValidationError naming the offending entity.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ParseError("catalog root must be an object")
    if doc.get("version") != CATALOG_VERSION:
        raise ValidationError(f"unsupported catalog version: {doc.get('version')!r}")

    raw_parts = doc.get("parts")
    if not isinstance(raw_parts, list) or not raw_parts:
        raise ValidationError("catalog must declare a non-empty 'parts' array")

    parts_kind: dict[str, str] = {}
    labels: dict[str, str] = {}
    for entry in raw_parts:
        pid = entry.get("id")
        label = entry.get("label")
        kind = entry.get("kind")
        if not pid or not isinstance(pid, str):
            raise ValidationError(f"part with missing/empty id: {entry!r}")
        if pid in parts_kind:
            raise ValidationError(f"duplicate part id: {pid}")
        if not label:
            raise ValidationError(f"part {pid} has an empty label")
        if kind not in ("primitive", "composite"):
            raise ValidationError(f"part {pid} has unknown kind {kind!r}")
        parts_kind[pid] = kind
        labels[pid] = label

    # Equivalence: explicit classes, singletons implied for unlisted parts.
    equivalence: dict[str, str] = {}
    for i, group in enumerate(doc.get("equivalence", [])):
        if not isinstance(group, list) or not group:
            raise ValidationError(f"equivalence class #{i} must be a non-empty array")
        class_id = f"cls:{group[0]}"
        for pid in group:
            if pid not in parts_kind:
                raise ValidationError(f"equivalence class #{i} references unknown part {pid}")
            if pid in equivalence:
                raise ValidationError(f"part {pid} appears in two equivalence classes")
            equivalence[pid] = class_id
    for pid in parts_kind:
        equivalence.setdefault(pid, f"cls:{pid}")

    # Recipes: canonicalize to unordered class pairs, reject conflicts.
    recipes: dict[frozenset, str] = {}
    produced_by: dict[str, list[frozenset]] = {}
    for entry in doc.get("recipes", []):
        a, b, result = entry.get("a"), entry.get("b"), entry.get("result")
        for pid in (a, b):
            if pid not in parts_kind:
                raise ValidationError(f"recipe input references unknown part {pid}")
        if result not in parts_kind:
            raise ValidationError(f"recipe result references unknown part {result}")
        if parts_kind[result] != "composite":
            raise ValidationError(f"recipe result {result} is not a composite part")
        key = frozenset((equivalence[a], equivalence[b]))
        if key in recipes and recipes[key] != result:
            raise ValidationError(
                f"conflicting recipes for pair ({a}, {b}): {recipes[key]} vs {result}"
            )
        recipes[key] = result
        produced_by.setdefault(result, []).append(key)

    # Depths: primitives are 0; composite depth = 1 + max input depth over
    # every recipe producing it. Unresolvable parts signal a cycle or an
    # unproducible composite.
    class_members: dict[str, list[str]] = {}
    for pid, cid in equivalence.items():
        class_members.setdefault(cid, []).append(pid)

    depth: dict[str, int] = {p: 0 for p, k in parts_kind.items() if k == "primitive"}
    composites = [p for p, k in parts_kind.items() if k == "composite"]
    for pid in composites:
        if pid not in produced_by:
            raise ValidationError(f"composite part {pid} is not produced by any recipe")
    pending = set(composites)
    while pending:
        progressed = False
        for pid in sorted(pending):
            candidates = []
            for key in produced_by[pid]:
                inputs = [m for cid in key for m in class_members[cid]]
                if all(m in depth for m in inputs):
                    candidates.append(1 + max(depth[m] for m in inputs))
            if candidates and len(candidates) == len(produced_by[pid]):
                depth[pid] = max(candidates)
                pending.discard(pid)
                progressed = True
        if not progressed:
            raise ValidationError(
                "recipe cycle detected involving: " + ", ".join(sorted(pending))
            )

    parts = {
        pid: Part(id=pid, label=labels[pid], kind=parts_kind[pid], depth=depth[pid])
        for pid in parts_kind
    }

    # Acyclicity doubles as depth monotonicity: result strictly deeper than
    # every member of each input class.
    for key, result in recipes.items():
        for cid in key:
            for member in class_members[cid]:
                if parts[result].depth <= parts[member].depth:
                    raise ValidationError(
                        f"recipe for {result} violates depth monotonicity via {member}"
                    )

    label_index: dict[str, str] = {}
    for pid, part in parts.items():
        label_index.setdefault(part.label, pid)

    # Decomposition trees.
    def parse_tree(char: str, node) -> Tree:
        if not isinstance(node, dict):
            raise ValidationError(f"decomposition of {char!r}: node must be an object")
        if "part" in node:
            pid = node["part"]
            if pid not in parts:
                raise ValidationError(f"decomposition of {char!r} references unknown part {pid}")
            if parts[pid].kind != "primitive":
                raise ValidationError(
                    f"decomposition of {char!r}: leaf {pid} must be a primitive"
                )
            return TreeLeaf(part=pid)
        if not all(k in node for k in ("op", "left", "right")):
            raise ValidationError(f"decomposition of {char!r}: internal node needs op/left/right")
        return TreeNode(
            op=node["op"],
            left=parse_tree(char, node["left"]),
            right=parse_tree(char, node["right"]),
        )

    decompositions: dict[str, Tree] = {}
    for char, raw in doc.get("decompositions", {}).items():
        if char not in label_index:
            raise ValidationError(f"decomposed character {char!r} has no part with that label")
        decompositions[char] = parse_tree(char, raw)

    lexicon = {}
    for keyword, char in doc.get("lexicon", {}).items():
        if keyword != keyword.lower():
            raise ValidationError(f"lexicon keyword {keyword!r} must be lowercase")
        lexicon[keyword] = char

    catalog = PartCatalog(
        parts=parts,
        equivalence=equivalence,
        recipes=recipes,
        decompositions=decompositions,
        lexicon=lexicon,
        label_index=label_index,
    )

    # Fold each tree once so a bad catalog fails at load, not mid-session.
    for char in decompositions:
        assembly_plan(catalog, char)
    return catalog


def load_catalog_file(path: str) -> PartCatalog:
    with open(path, "rb") as f:
        return load_catalog(f)
