"""Schema parsing, validation, and rule-constrained correction."""

import pytest

from billetdec.ctc import DecodedChar, DecodeResult, Provenance
from billetdec.rules import (
    DIGIT,
    LETTER,
    CharClass,
    EncodingRules,
    FieldSpec,
    correct,
    literal,
    load_rules,
    parse_rules,
)

BILLET11 = EncodingRules(
    (
        FieldSpec("company", LETTER, 1),
        FieldSpec("date", DIGIT, 6),
        FieldSpec("furnace", LETTER, 2),
        FieldSpec("sequence", DIGIT, 2),
    )
)


def make_result(text, frames=None):
    frames = frames if frames is not None else range(len(text))
    chars = tuple(
        DecodedChar(ch, f, Provenance.NORMAL) for ch, f in zip(text, frames)
    )
    return DecodeResult(text, chars)


def uniform_candidates(text, ranked):
    """Same ranked candidate list at every position."""
    return [list(ranked) for _ in text]


class TestCharClass:
    def test_letter_admits_ascii_letters_only(self):
        assert LETTER.admits("B")
        assert LETTER.admits("z")
        assert not LETTER.admits("8")
        assert not LETTER.admits("É")

    def test_digit_admits_ascii_digits_only(self):
        assert DIGIT.admits("0") and DIGIT.admits("9")
        assert not DIGIT.admits("A")
        assert not DIGIT.admits("٣")  # arabic-indic digit

    def test_literal(self):
        dash = literal("-")
        assert dash.admits("-")
        assert not dash.admits("x")
        assert dash.describe() == "LITERAL(-)"

    def test_bad_kind_raises(self):
        with pytest.raises(ValueError):
            CharClass("vowel")

    def test_literal_needs_one_char(self):
        with pytest.raises(ValueError):
            CharClass("literal", "AB")
        with pytest.raises(ValueError):
            CharClass("literal", None)

    def test_non_literal_takes_no_literal(self):
        with pytest.raises(ValueError):
            CharClass("letter", "A")


class TestEncodingRules:
    def test_total_length(self):
        assert BILLET11.total_length == 11

    def test_position_class_walks_fields(self):
        assert BILLET11.position_class(0) is LETTER
        assert BILLET11.position_class(1) is DIGIT
        assert BILLET11.position_class(6) is DIGIT
        assert BILLET11.position_class(7) is LETTER
        assert BILLET11.position_class(8) is LETTER
        assert BILLET11.position_class(9) is DIGIT
        assert BILLET11.position_class(10) is DIGIT

    def test_position_class_out_of_range(self):
        with pytest.raises(ValueError):
            BILLET11.position_class(11)
        with pytest.raises(ValueError):
            BILLET11.position_class(-1)

    def test_conforming_string_has_no_violations(self):
        assert BILLET11.validate("B636021BB06") == []

    def test_class_violations_carry_position_and_found(self):
        vs = BILLET11.validate("86360218B06")
        # position 0 must be a letter ('8' found), position 7 a letter ('8' ok? no:
        # '8' at index 7 violates LETTER), position 8 'B' is fine
        assert [(v.position, v.found) for v in vs] == [(0, "8"), (7, "8")]
        assert vs[0].expected is LETTER

    def test_wrong_length_is_single_violation(self):
        vs = BILLET11.validate("B63")
        assert len(vs) == 1
        assert vs[0].position == -1
        assert vs[0].expected is None
        assert vs[0].found == "3"

    def test_empty_schema_rejected(self):
        with pytest.raises(ValueError):
            EncodingRules(())

    def test_field_validation(self):
        with pytest.raises(ValueError):
            FieldSpec("", LETTER, 1)
        with pytest.raises(ValueError):
            FieldSpec("x", LETTER, 0)


class TestParseRules:
    def test_parses_demo_schema(self):
        rules = parse_rules(
            "company LETTER 1\ndate DIGIT 6\nfurnace LETTER 2\nsequence DIGIT 2\n"
        )
        assert rules == BILLET11

    def test_comments_and_blanks_ignored(self):
        rules = parse_rules("# header\n\nf LETTER 2  # trailing\n")
        assert rules.total_length == 2

    def test_literal_field(self):
        rules = parse_rules("sep LITERAL(-) 1\n")
        assert rules.fields[0].char_class == literal("-")

    def test_errors_carry_line_numbers(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_rules("a LETTER 1\nb VOWEL 2\n")
        with pytest.raises(ValueError, match="line 1"):
            parse_rules("a LETTER x\n")
        with pytest.raises(ValueError, match="line 3"):
            parse_rules("a LETTER 1\n# fine\nb DIGIT\n")

    def test_empty_file_rejected(self):
        with pytest.raises(ValueError):
            parse_rules("# nothing here\n")

    def test_load_rules_round_trip(self, tmp_path):
        p = tmp_path / "demo.rules"
        p.write_text("company LETTER 1\ndate DIGIT 6\nfurnace LETTER 2\nsequence DIGIT 2\n")
        assert load_rules(p) == BILLET11


class TestCorrect:
    def test_digit_in_letter_slot_replaced_by_best_letter(self):
        # classic confusion: '8' recognized where only letters are allowed,
        # runner-up candidate 'B' wins
        res = make_result("86360218B06")
        cands = uniform_candidates(res.text, [("8", 0.5), ("B", 0.3), ("0", 0.2)])
        fixed = correct(res, cands, BILLET11)
        assert fixed.text == "B636021BB06"
        assert fixed.chars[0].provenance is Provenance.RULE_CORRECTED
        assert fixed.chars[7].provenance is Provenance.RULE_CORRECTED
        assert fixed.unresolved == ()

    def test_valid_positions_untouched(self):
        res = make_result("B636021BB06")
        cands = uniform_candidates(res.text, [("Z", 1.0)])
        fixed = correct(res, cands, BILLET11)
        assert fixed.text == res.text
        assert all(c.provenance is Provenance.NORMAL for c in fixed.chars)

    def test_walks_ranking_past_invalid_candidates(self):
        rules = EncodingRules((FieldSpec("f", LETTER, 1),))
        res = make_result("7")
        cands = [[("7", 0.6), ("1", 0.3), ("T", 0.1)]]
        fixed = correct(res, cands, rules)
        assert fixed.text == "T"

    def test_no_valid_candidate_flags_unresolved(self):
        rules = EncodingRules((FieldSpec("f", LETTER, 1),))
        res = make_result("7")
        fixed = correct(res, [[("7", 0.8), ("1", 0.2)]], rules)
        assert fixed.text == "7"
        assert fixed.unresolved == (0,)
        assert fixed.chars[0].provenance is Provenance.NORMAL

    def test_source_frames_preserved(self):
        res = make_result("86360218B06", frames=[3 * i + 1 for i in range(11)])
        cands = uniform_candidates(res.text, [("B", 0.9), ("8", 0.1)])
        fixed = correct(res, cands, BILLET11)
        assert [c.source_frame for c in fixed.chars] == [
            c.source_frame for c in res.chars
        ]

    def test_length_mismatch_raises(self):
        res = make_result("B63")
        with pytest.raises(ValueError):
            correct(res, uniform_candidates("B63", [("A", 1.0)]), BILLET11)

    def test_candidate_count_mismatch_raises(self):
        res = make_result("B636021BB06")
        with pytest.raises(ValueError):
            correct(res, [[("A", 1.0)]], BILLET11)
