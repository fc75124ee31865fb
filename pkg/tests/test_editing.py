from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import edit_ratio_oracle, levenshtein_tokens
from sftgen.core import Instruction
from sftgen.editing import capture_baseline, edit_ratio, emit_triple, revise_answer
from sftgen.errors import EmptyAnswerError, NoEvidenceError
from sftgen.gateway import Gateway, prompt_hash, script_mock


def make_instruction(text="Who currently chairs the city council?"):
    return Instruction.create(text, origin="seed")


class TestCaptureBaseline:
    def _gateway(self, template, inst, reply):
        request = template.build_request({"instruction": inst.text})
        return Gateway(script_mock({prompt_hash(request.user_prompt): reply}))

    def test_pass_through(self, template_store):
        template = template_store.get("plain")
        inst = make_instruction()
        gateway = self._gateway(template, inst, "The mayor is Lena Holm.")
        assert capture_baseline(inst, gateway, template) == "The mayor is Lena Holm."

    def test_empty_raises(self, template_store):
        template = template_store.get("plain")
        inst = make_instruction()
        gateway = self._gateway(template, inst, "   ")
        with pytest.raises(EmptyAnswerError):
            capture_baseline(inst, gateway, template)

    def test_cache_makes_repeat_identical(self, template_store, tmp_path):
        template = template_store.get("plain")
        inst = make_instruction()
        request = template.build_request({"instruction": inst.text})
        config = script_mock(
            {prompt_hash(request.user_prompt): "Stable answer."}, cache_dir=str(tmp_path / "cache")
        )
        gateway = Gateway(config)
        first = capture_baseline(inst, gateway, template)
        second = capture_baseline(inst, gateway, template)
        assert first == second


class TestReviseAnswer:
    def _gateway(self, template, inst, rejected, context, reply):
        request = template.build_request({"instruction": inst.text, "rejected": rejected, "context": context})
        return Gateway(script_mock({prompt_hash(request.user_prompt): reply}))

    def test_single_span_swap(self, template_store):
        template = template_store.get("edit")
        inst = make_instruction()
        rejected = "The current city council chair is Lena Holm since 2021."
        chosen = "The current city council chair is Arne Berg since 2021."
        context = "[source: news] Arne Berg won the 2024 runoff."
        gateway = self._gateway(template, inst, rejected, context, chosen)
        revised = revise_answer(inst, rejected, context, gateway, template)
        assert revised == chosen
        # Token-diff oracle: the change is confined to the two-token name span.
        assert levenshtein_tokens(rejected, revised) == 2
        before, after = rejected.split(), revised.split()
        assert before[:6] == after[:6]
        assert before[8:] == after[8:]
        assert before[6:8] != after[6:8]

    def test_empty_context_refused(self, template_store):
        template = template_store.get("edit")
        inst = make_instruction()
        with pytest.raises(NoEvidenceError):
            revise_answer(inst, "old answer", "", Gateway(script_mock({})), template)

    def test_echoed_draft_returns_same_text(self, template_store):
        template = template_store.get("edit")
        inst = make_instruction()
        rejected = "Everything here is already correct."
        context = "[source: doc] confirms the draft"
        gateway = self._gateway(template, inst, rejected, context, rejected)
        assert revise_answer(inst, rejected, context, gateway, template) == rejected

    def test_empty_revision_raises(self, template_store):
        template = template_store.get("edit")
        inst = make_instruction()
        gateway = self._gateway(template, inst, "draft", "ctx", "")
        with pytest.raises(EmptyAnswerError):
            revise_answer(inst, "draft", "ctx", gateway, template)


class TestEditRatio:
    def test_identical_zero(self):
        assert edit_ratio("same text here", "same text here") == 0.0

    def test_one_in_ten_tokens(self):
        rejected = "City A holds rank four among all eight options today"
        chosen = "City A holds rank nine among all eight options today"
        assert len(rejected.split()) == 10
        assert edit_ratio(rejected, chosen) == pytest.approx(0.1, abs=1e-12)

    def test_fully_disjoint(self):
        assert edit_ratio("a b c", "x y z w") == pytest.approx(1.0, abs=1e-12)
        assert levenshtein_tokens("a b c", "x y z w") == 4

    def test_empty_both_sides(self):
        assert edit_ratio("", "") == 0.0

    def test_one_side_empty(self):
        assert edit_ratio("", "three new tokens") == 1.0

    @given(st.text("abc xy ", max_size=50), st.text("abc xy ", max_size=50))
    @settings(max_examples=150)
    def test_matches_full_matrix_oracle(self, a, b):
        from sftgen.core import canonicalize

        assert edit_ratio(a, b) == pytest.approx(
            edit_ratio_oracle(canonicalize(a), canonicalize(b)), abs=1e-12
        )

    @given(st.text("ab c", max_size=40), st.text("ab c", max_size=40))
    @settings(max_examples=100)
    def test_symmetric(self, a, b):
        assert edit_ratio(a, b) == edit_ratio(b, a)

    def test_self_ratio_zero_for_any_text(self):
        for text in ("", "one", "one two", "a b c d e f g"):
            assert edit_ratio(text, text) == 0.0


class TestEmitTriple:
    def test_small_edit_goes_to_main(self, tmp_path):
        main = tmp_path / "preferences.jsonl"
        quarantine = tmp_path / "quarantine.jsonl"
        inst = make_instruction()
        triple = emit_triple(
            inst,
            "one two three four five six seven eight nine ten",
            "one two three four five SIX seven eight nine ten",
            ["ctx1"],
            max_ratio=0.5,
            main_path=main,
            quarantine_path=quarantine,
        )
        assert triple.flag is None
        assert main.exists() and not quarantine.exists()
        row = json.loads(main.read_text().splitlines()[0])
        assert set(row) == {"prompt", "rejected", "chosen", "edit_ratio", "context_ids"}

    def test_large_edit_quarantined(self, tmp_path):
        main = tmp_path / "preferences.jsonl"
        quarantine = tmp_path / "quarantine.jsonl"
        triple = emit_triple(
            make_instruction(),
            "alpha beta gamma delta epsilon",
            "completely different words now appear",
            [],
            max_ratio=0.5,
            main_path=main,
            quarantine_path=quarantine,
        )
        assert triple.flag == "edit_ratio_exceeded"
        assert quarantine.exists() and not main.exists()
        row = json.loads(quarantine.read_text().splitlines()[0])
        assert row["flag"] == "edit_ratio_exceeded"

    def test_identical_pair_flagged_no_change(self, tmp_path):
        main = tmp_path / "preferences.jsonl"
        quarantine = tmp_path / "quarantine.jsonl"
        triple = emit_triple(
            make_instruction(),
            "nothing to fix here",
            "nothing to fix here",
            [],
            max_ratio=0.5,
            main_path=main,
            quarantine_path=quarantine,
        )
        assert triple.flag == "no_change_needed"
        assert not main.exists()
        assert json.loads(quarantine.read_text().splitlines()[0])["flag"] == "no_change_needed"

    def test_stored_ratio_recomputable(self, tmp_path):
        main = tmp_path / "preferences.jsonl"
        rng = random.Random(5)
        words = ["w%d" % i for i in range(30)]
        for trial in range(20):
            rejected_tokens = [rng.choice(words) for _ in range(rng.randint(5, 15))]
            chosen_tokens = list(rejected_tokens)
            chosen_tokens[rng.randrange(len(chosen_tokens))] = "swapped%d" % trial
            emit_triple(
                make_instruction(f"q number {trial}"),
                " ".join(rejected_tokens),
                " ".join(chosen_tokens),
                [],
                max_ratio=0.5,
                main_path=main,
            )
        for line in main.read_text().splitlines():
            row = json.loads(line)
            assert row["edit_ratio"] == pytest.approx(
                edit_ratio(row["rejected"], row["chosen"]), abs=0
            )
            assert row["edit_ratio"] <= 0.5

    def test_boundary_ratio_equal_to_max_stays_main(self):
        triple = emit_triple(
            make_instruction(),
            "a b",
            "a c",
            [],
            max_ratio=0.5,
        )
        assert triple.edit_ratio == pytest.approx(0.5)
        assert triple.flag is None
