"""Encoding-rule schemas and rule-constrained correction of decoded strings.

A billet number is a fixed-length concatenation of fields, each restricted
to a character class (letters, digits, or one literal character).  Knowing
the schema lets obvious confusions be corrected after decoding: a digit
recognized where only letters may appear is replaced by the most probable
letter among the classifier's remaining candidates for that position.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .ctc import DecodeResult, Provenance

RankedCandidates = list[list[tuple[str, float]]]


@dataclass(frozen=True)
class CharClass:
    """Admissible characters for one schema position."""

    kind: str  # "letter" | "digit" | "literal"
    literal: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("letter", "digit", "literal"):
            raise ValueError(f"unknown character class {self.kind!r}")
        if self.kind == "literal":
            if self.literal is None or len(self.literal) != 1:
                raise ValueError("literal class needs exactly one character")
        elif self.literal is not None:
            raise ValueError(f"{self.kind} class takes no literal")

    def admits(self, ch: str) -> bool:
        if self.kind == "letter":
            return ch.isascii() and ch.isalpha()
        if self.kind == "digit":
            return ch.isascii() and ch.isdigit()
        return ch == self.literal

    def describe(self) -> str:
        if self.kind == "literal":
            return f"LITERAL({self.literal})"
        return self.kind.upper()


LETTER = CharClass("letter")
DIGIT = CharClass("digit")


def literal(ch: str) -> CharClass:
    return CharClass("literal", ch)


@dataclass(frozen=True)
class FieldSpec:
    name: str
    char_class: CharClass
    length: int

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("field name must be non-empty")
        if self.length < 1:
            raise ValueError(f"field {self.name!r} needs length >= 1")


@dataclass(frozen=True)
class Violation:
    """One schema violation.  ``position`` is -1 and ``expected`` None for a
    whole-string length mismatch; ``found`` then carries the actual length."""

    position: int
    expected: CharClass | None
    found: str


@dataclass(frozen=True)
class EncodingRules:
    fields: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        if not self.fields:
            raise ValueError("schema needs at least one field")

    @property
    def total_length(self) -> int:
        return sum(f.length for f in self.fields)

    def position_class(self, i: int) -> CharClass:
        """Character class governing string position ``i``."""
        if i < 0:
            raise ValueError(f"position {i} out of range")
        offset = 0
        for f in self.fields:
            if i < offset + f.length:
                return f.char_class
            offset += f.length
        raise ValueError(
            f"position {i} out of range for length-{self.total_length} schema"
        )

    def validate(self, text: str) -> list[Violation]:
        """All violations, in position order; empty means conforming.

        A wrong-length string yields the single length violation and no
        per-position checks, since positions no longer line up with fields.
        """
        if len(text) != self.total_length:
            return [Violation(-1, None, str(len(text)))]
        return [
            Violation(i, cls, ch)
            for i, ch in enumerate(text)
            if not (cls := self.position_class(i)).admits(ch)
        ]


def parse_rules(text: str) -> EncodingRules:
    """Parse a schema description.

    One field per line: ``<name> <LETTER|DIGIT|LITERAL(c)> <length>``.
    Blank lines and ``#`` comments are ignored.
    """
    fields: list[FieldSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'name class length'")
        name, cls_text, len_text = parts
        if cls_text == "LETTER":
            cls = LETTER
        elif cls_text == "DIGIT":
            cls = DIGIT
        elif cls_text.startswith("LITERAL(") and cls_text.endswith(")"):
            inner = cls_text[len("LITERAL(") : -1]
            if len(inner) != 1:
                raise ValueError(
                    f"line {lineno}: LITERAL takes exactly one character"
                )
            cls = literal(inner)
        else:
            raise ValueError(f"line {lineno}: unknown class {cls_text!r}")
        try:
            length = int(len_text)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad length {len_text!r}") from exc
        try:
            fields.append(FieldSpec(name, cls, length))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if not fields:
        raise ValueError("schema file defines no fields")
    return EncodingRules(tuple(fields))


def load_rules(path: str | Path) -> EncodingRules:
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def correct(
    result: DecodeResult, candidates: RankedCandidates, rules: EncodingRules
) -> DecodeResult:
    """Replace class-violating characters by their best class-valid candidate.

    Valid positions are never touched.  At a violating position the ranked
    candidate list is walked top-down until a symbol admitted by the class is
    found; if none exists the character stays and the position is flagged
    unresolved.  Only defined for length-conforming results.
    """
    if len(result.text) != rules.total_length:
        raise ValueError(
            f"cannot correct a {len(result.text)}-char string against a "
            f"{rules.total_length}-char schema"
        )
    if len(candidates) != len(result.text):
        raise ValueError("need one candidate list per character")
    chars = list(result.chars)
    unresolved = list(result.unresolved)
    for v in rules.validate(result.text):
        pick = next(
            (sym for sym, _ in candidates[v.position] if v.expected.admits(sym)),
            None,
        )
        if pick is None:
            if v.position not in unresolved:
                unresolved.append(v.position)
            continue
        chars[v.position] = replace(
            chars[v.position], symbol=pick, provenance=Provenance.RULE_CORRECTED
        )
    return DecodeResult(
        "".join(c.symbol for c in chars), tuple(chars), tuple(sorted(unresolved))
    )
