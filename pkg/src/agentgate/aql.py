"""Agent Query Language: parsing, canonical printing, and result pruning.

Grammar (whitespace permitted between any two tokens):

    query := intent [ "(" arg ("," arg)* ")" ] [ sel ]
    arg   := name "=" value
    sel   := "{" field ("," field)* "}"
    field := name [ sel ]
    value := string | integer | "true" | "false"

Names and intents match [A-Za-z][A-Za-z0-9_]*. Strings are double-quoted with
exactly two escapes, \\" and \\\\. Integers are decimal with an optional
leading '-'. Argument names must be unique per query and sibling field names
unique per selection level.

Canonical printed form: a single space after every comma, no other
whitespace. parse(print(q)) == q for every valid query.

ParseError positions are byte offsets into the UTF-8 encoding of the input.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from functools import lru_cache

Scalar = str | int | bool

_NAME_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_INT_RE = re.compile(r"-?[0-9]+")
_WS = " \t\r\n"

NO_SELECTION_DIGEST_TEXT = "∅"


class SelectionError(Exception):
    """Selection refers to a field outside the intent's schema."""


class FieldUnknown(SelectionError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"unknown field {path!r}")


@dataclass(frozen=True)
class ParseError(Exception):
    position: int  # byte offset of first failure
    expected: str

    def __str__(self) -> str:
        return f"parse error at byte {self.position}: expected {self.expected}"


@dataclass(frozen=True)
class SelectionNode:
    field: str
    children: tuple["SelectionNode", ...] = ()


@dataclass(frozen=True)
class AqlQuery:
    intent: str
    args: tuple[tuple[str, Scalar], ...] = ()
    selection: tuple[SelectionNode, ...] | None = None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    __slots__ = ("text", "pos", "length")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.length = len(text)

    def fail(self, expected: str) -> ParseError:
        # Positions are reported as byte offsets; conversion only runs on error.
        byte_pos = len(self.text[: self.pos].encode("utf-8"))
        return ParseError(position=byte_pos, expected=expected)

    def skip_ws(self) -> None:
        while self.pos < self.length and self.text[self.pos] in _WS:
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < self.length else ""

    def expect(self, char: str) -> None:
        if self.peek() != char:
            raise self.fail(f"'{char}'")
        self.pos += 1

    def name(self, what: str) -> str:
        match = _NAME_RE.match(self.text, self.pos)
        if not match:
            raise self.fail(what)
        self.pos = match.end()
        return match.group()

    def value(self) -> Scalar:
        ch = self.peek()
        if ch == '"':
            return self.string()
        if ch == "-" or ch.isdigit():
            match = _INT_RE.match(self.text, self.pos)
            if not match:
                raise self.fail("integer")
            self.pos = match.end()
            return int(match.group())
        match = _NAME_RE.match(self.text, self.pos)
        if match and match.group() in ("true", "false"):
            self.pos = match.end()
            return match.group() == "true"
        raise self.fail("value (string, integer, true or false)")

    def string(self) -> str:
        self.expect('"')
        out: list[str] = []
        while True:
            if self.pos >= self.length:
                raise self.fail("closing '\"'")
            ch = self.text[self.pos]
            if ch == '"':
                self.pos += 1
                return "".join(out)
            if ch == "\\":
                if self.pos + 1 >= self.length or self.text[self.pos + 1] not in '"\\':
                    self.pos += 1
                    raise self.fail("escape ('\\\"' or '\\\\')")
                out.append(self.text[self.pos + 1])
                self.pos += 2
            else:
                out.append(ch)
                self.pos += 1

    def arg(self, seen: set[str]) -> tuple[str, Scalar]:
        start = self.pos
        arg_name = self.name("argument name")
        if arg_name in seen:
            self.pos = start
            raise self.fail("unique argument name")
        self.skip_ws()
        self.expect("=")
        self.skip_ws()
        return arg_name, self.value()

    def selection(self) -> tuple[SelectionNode, ...]:
        self.expect("{")
        nodes: list[SelectionNode] = []
        seen: set[str] = set()
        while True:
            self.skip_ws()
            start = self.pos
            field_name = self.name("field name")
            if field_name in seen:
                self.pos = start
                raise self.fail("unique field name")
            seen.add(field_name)
            self.skip_ws()
            children: tuple[SelectionNode, ...] = ()
            if self.peek() == "{":
                children = self.selection()
                self.skip_ws()
            nodes.append(SelectionNode(field=field_name, children=children))
            if self.peek() == ",":
                self.pos += 1
                continue
            self.expect("}")
            return tuple(nodes)

    def query(self) -> AqlQuery:
        self.skip_ws()
        intent = self.name("intent name")
        self.skip_ws()

        args: list[tuple[str, Scalar]] = []
        if self.peek() == "(":
            self.pos += 1
            seen: set[str] = set()
            while True:
                self.skip_ws()
                name, value = self.arg(seen)
                seen.add(name)
                args.append((name, value))
                self.skip_ws()
                if self.peek() == ",":
                    self.pos += 1
                    continue
                self.expect(")")
                break
            self.skip_ws()

        selection = None
        if self.peek() == "{":
            selection = self.selection()
            self.skip_ws()

        if self.pos != self.length:
            raise self.fail("end of input")
        return AqlQuery(intent=intent, args=tuple(args), selection=selection)


@lru_cache(maxsize=2048)
def parse(text: str) -> AqlQuery:
    """Parse AQL text; raises ParseError with the first-failure byte offset.

    Pure function over immutable results, so repeats are memoized (failures
    are never cached — lru_cache stores successful returns only).
    """
    return _Parser(text).query()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _print_scalar(value: Scalar) -> str:
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, int):
        return str(value)
    escaped = value.replace("\\", "\\\\").replace('"', '\\"')
    return f'"{escaped}"'


def _print_selection(nodes: tuple[SelectionNode, ...]) -> str:
    parts = []
    for node in nodes:
        text = node.field
        if node.children:
            text += _print_selection(node.children)
        parts.append(text)
    return "{" + ", ".join(parts) + "}"


def print_query(query: AqlQuery) -> str:
    """Canonical text form; parse(print_query(q)) == q."""
    out = query.intent
    if query.args:
        out += "(" + ", ".join(f"{n}={_print_scalar(v)}" for n, v in query.args) + ")"
    if query.selection is not None:
        out += _print_selection(query.selection)
    return out


def canonical_selection_text(selection: tuple[SelectionNode, ...] | None) -> str:
    """Selection in canonical form; a lone '∅' when the query has none."""
    if selection is None:
        return NO_SELECTION_DIGEST_TEXT
    return _print_selection(selection)


@lru_cache(maxsize=4096)
def args_digest(args: tuple[tuple[str, Scalar], ...]) -> str:
    """Hex SHA-256 over the canonical argument document (sorted names).

    Shared identity for cache keys and session history: two queries with the
    same arguments in any order digest identically.
    """
    doc = json.dumps(dict(sorted(args)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode("utf-8")).hexdigest()


@lru_cache(maxsize=4096)
def selection_digest(selection: tuple[SelectionNode, ...] | None) -> str:
    return hashlib.sha256(canonical_selection_text(selection).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def validate_selection(selection: tuple[SelectionNode, ...], schema: dict, path: str = "") -> None:
    """Check every selected field exists in the schema; FieldUnknown otherwise."""
    for node in selection:
        node_path = f"{path}.{node.field}" if path else node.field
        if node.field not in schema:
            raise FieldUnknown(node_path)
        if node.children:
            validate_selection(node.children, schema[node.field] or {}, node_path)


def prune(result, selection: tuple[SelectionNode, ...], schema: dict, path: str = ""):
    """Project a result tree onto the selection.

    Output contains exactly the selected fields in selection order. A field
    legal per the schema but absent from the result appears as null; lists
    are pruned element-wise. Selecting outside the schema raises FieldUnknown
    with the offending dotted path.
    """
    if isinstance(result, list):
        return [prune(item, selection, schema, path) for item in result]

    out: dict = {}
    for node in selection:
        node_path = f"{path}.{node.field}" if path else node.field
        if node.field not in schema:
            raise FieldUnknown(node_path)
        value = result.get(node.field) if isinstance(result, dict) else None
        if not node.children:
            out[node.field] = value
        elif isinstance(value, (dict, list)):
            out[node.field] = prune(value, node.children, schema[node.field] or {}, node_path)
        else:
            # Schema promises children but the value cannot be descended into.
            validate_selection(node.children, schema[node.field] or {}, node_path)
            out[node.field] = None
    return out
