import itertools
import json
import random
import threading
import time
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diagrobust.amcv import (
    UNPARSEABLE,
    AnswerSet,
    OrchestratorConfig,
    PreconditionError,
    ResolutionMode,
    ViewAnswer,
    ViewInput,
    answer_set_records,
    build_self_correction_prompt,
    consistency_score,
    normalize_answer,
    resolve_final,
    run_multi_view,
)
from diagrobust.backend import Backend, ConfigError, ConstantBackend, TableBackend, TransportError
from diagrobust.image import Image
from diagrobust.records import QuestionRecord

MC = "multiple_choice"


def question(qid="q", answer_type=MC, gt="B", choices=("red", "green", "blue", "black")):
    return QuestionRecord(
        id=qid,
        image_path="x.png",
        question_text="Which colour?",
        answer_type=answer_type,
        ground_truth=gt,
        domain="Physics",
        choices=list(choices) if choices else None,
    )


def views(n=10):
    out = [ViewInput(0, Image.filled(2, 2, (255, 255, 255)))]
    for i in range(1, n + 1):
        out.append(ViewInput(i, Image.filled(2, 2, (i, i, i)), "rotation", "low"))
    return out


class Recorder(TableBackend):
    """TableBackend that records every request it serves."""

    def __init__(self, answers, corrections=None, delay=None):
        super().__init__(answers, corrections)
        self.requests = []
        self.delay = delay
        self._lock = threading.Lock()

    def _infer(self, req):
        if self.delay:
            time.sleep(self.delay(req))
        with self._lock:
            self.requests.append(req)
        return super()._infer(req)


# Normalisation ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "raw, kind, choices, expected",
    [
        ("Answer: B.", MC, ["a", "b", "c", "d"], "B"),
        ("B", MC, ["a", "b", "c", "d"], "B"),
        ("(b)", MC, ["a", "b", "c", "d"], "B"),
        ("B.", MC, ["a", "b", "c", "d"], "B"),
        ("green", MC, ["red", "green", "blue"], "B"),
        ("The answer is (C) because of the shading.", MC, ["a", "b", "c", "d"], "C"),
        ("Final answer: D", MC, ["a", "b", "c", "d"], "D"),
        ("I think answer: A ... final answer: C", MC, ["a", "b", "c", "d"], "C"),
        ("E", MC, ["a", "b", "c", "d"], UNPARSEABLE),
        ("no idea", MC, ["a", "b", "c", "d"], UNPARSEABLE),
        ("", MC, ["a", "b"], UNPARSEABLE),
        ("  The Photosynthesis. ", "short_answer", None, "photosynthesis"),
        ("1,250.0", "fill_in_blank", None, "1250"),
        ("5.0", "fill_in_blank", None, "5"),
        ("0.50 kg", "fill_in_blank", None, "0.5 kg"),
        ("Answer: 40", "fill_in_blank", None, "40"),
        ("An   Apple!", "short_answer", None, "apple"),
        ("Yes.", "short_answer", None, "yes"),
    ],
)
def test_normalize_answer(raw, kind, choices, expected):
    assert normalize_answer(raw, kind, choices) == expected


def test_ambiguous_choice_text_is_unparseable():
    assert normalize_answer("same", MC, ["same", "same", "other"]) == UNPARSEABLE


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=40))
def test_normalize_is_idempotent_for_free_form(text):
    once = normalize_answer(text, "short_answer")
    assert normalize_answer(once, "short_answer") == once


# Consistency score ----------------------------------------------------------------------


def test_consistency_examples():
    assert consistency_score(["X", "X", "X"]) == (1, "X")
    assert consistency_score(["X", "X", "Y"]) == (Fraction(2, 3), "X")
    assert consistency_score(["X", "Y"]) == (Fraction(1, 2), "X")
    assert consistency_score(["Y", "X"]) == (Fraction(1, 2), "Y")
    with pytest.raises(ValueError):
        consistency_score([])


def brute_force_mode(answers):
    best = None
    for i, a in enumerate(answers):
        count = sum(1 for b in answers if b == a)
        if best is None or count > best[0]:
            best = (count, a)
    return Fraction(best[0], len(answers)), best[1]


def test_consistency_matches_brute_force_exhaustively():
    for n in range(1, 7):
        for combo in itertools.product("XYZ", repeat=n):
            assert consistency_score(list(combo)) == brute_force_mode(list(combo))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["A", "B", "C", UNPARSEABLE]), min_size=1, max_size=16))
def test_consistency_bounds(answers):
    c, mode = consistency_score(answers)
    assert Fraction(1, len(answers)) <= c <= 1
    assert Counter(answers)[mode] == c * len(answers)


# Orchestration --------------------------------------------------------------------------


def test_unanimous_constant_backend():
    aset = run_multi_view(question(), views(), ConstantBackend("B"), OrchestratorConfig())
    assert (aset.c_q, aset.a_mode, aset.triggered_correction, aset.a_final) == (1, "B", False, "B")
    assert aset.total_calls == 11 and aset.extra_calls == 0


def test_seven_of_eleven_keeps_mode():
    be = Recorder({"q": list("BBBBBBBCCCC")})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig(tau=0.6))
    assert aset.c_q == Fraction(7, 11)
    assert aset.a_final == "B" and not aset.triggered_correction
    assert len(be.requests) == 11


def test_six_of_eleven_triggers_correction():
    be = Recorder({"q": list("BBBBBBCCCCC")}, corrections={"q": "After review. Final answer: C"})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig(tau=0.6))
    assert aset.c_q == Fraction(6, 11) and aset.a_mode == "B"
    assert aset.triggered_correction and aset.extra_calls == 1
    assert aset.a_final == "C" and aset.total_calls == 12
    assert len(be.requests) == 12
    corr = be.requests[-1]
    assert corr.prompt_template_id == "verbatim"
    assert corr.image == views()[0].image
    assert corr.prompt == build_self_correction_prompt(question(), aset)


def test_tau_zero_never_corrects():
    rng = random.Random(0)
    for _ in range(50):
        answers = [rng.choice("ABCD") for _ in range(11)]
        be = Recorder({"q": answers})
        aset = run_multi_view(question(), views(), be, OrchestratorConfig(tau=0.0))
        assert not aset.triggered_correction and len(be.requests) == 11


def test_tau_one_corrects_any_disagreement():
    be = Recorder({"q": list("BBBBBBBBBBC")}, corrections={"q": "B"})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig(tau=1.0))
    assert aset.triggered_correction and aset.total_calls == 12


def test_single_view_makes_one_call():
    be = Recorder({"q": list("CBBBBBBBBBB")})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig(resolution_mode="single_view"))
    assert len(be.requests) == 1 and be.requests[0].view_index == 0
    assert aset.a_final == "C" and aset.total_calls == 1


def test_majority_vote_never_corrects():
    be = Recorder({"q": list("BCDABCDABCD")})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig(tau=1.0, resolution_mode="majority_vote"))
    assert not aset.triggered_correction and len(be.requests) == 11
    assert aset.a_final == aset.a_mode == "B"


@pytest.mark.parametrize("mode", list(ResolutionMode))
def test_unanimous_answers_final_under_every_mode(mode):
    for tau in (0.0, 0.6, 1.0):
        aset = run_multi_view(question(), views(), ConstantBackend("D"), OrchestratorConfig(tau=tau, resolution_mode=mode))
        assert aset.a_final == "D"


def test_completion_order_does_not_matter():
    answers = list("BCBCBCBDBBA")
    fast = run_multi_view(question(), views(), Recorder({"q": answers}), OrchestratorConfig())
    slow_first = Recorder({"q": answers}, delay=lambda r: 0.002 * (11 - r.view_index))
    shuffled = run_multi_view(question(), list(reversed(views())), slow_first, OrchestratorConfig())
    assert [a.canonical for a in shuffled.answers] == [a.canonical for a in fast.answers]
    assert [a.view_index for a in shuffled.answers] == list(range(11))
    assert (shuffled.c_q, shuffled.a_mode, shuffled.a_final) == (fast.c_q, fast.a_mode, fast.a_final)


def test_unparseable_correction_falls_back_to_mode():
    be = Recorder({"q": list("BBBBBBCCCCC")}, corrections={"q": "I cannot tell."})
    aset = run_multi_view(question(), views(), be, OrchestratorConfig())
    assert aset.triggered_correction and aset.a_final == "B"
    assert aset.correction_raw == "I cannot tell."


class FailingCorrection(TableBackend):
    def _infer(self, req):
        if req.prompt_template_id == "verbatim":
            raise TransportError("connection reset")
        return super()._infer(req)


def test_correction_transport_failure_falls_back():
    aset = run_multi_view(question(), views(), FailingCorrection({"q": list("BBBBBBCCCCC")}), OrchestratorConfig())
    assert aset.a_final == "B" and aset.triggered_correction
    assert "connection reset" in aset.correction_error and not aset.failed


class FlakyView(TableBackend):
    def _infer(self, req):
        if req.view_index == 4:
            raise TransportError("timeout")
        return super()._infer(req)


def test_view_failure_marks_question_failed_keeping_partials():
    aset = run_multi_view(question(), views(), FlakyView({"q": list("B" * 11)}), OrchestratorConfig())
    assert aset.failed and "view 4" in aset.error
    assert len(aset.answers) == 10 and aset.a_final is None
    summary = answer_set_records(question(), aset, OrchestratorConfig(), 10)[-1]
    assert summary["status"] == "failed"


class Forbidden(Backend):
    def _infer(self, req):
        raise ConfigError("HTTP 401")


def test_config_error_propagates():
    with pytest.raises(ConfigError):
        run_multi_view(question(), views(), Forbidden(), OrchestratorConfig())


def test_missing_clean_view_rejected():
    with pytest.raises(PreconditionError):
        run_multi_view(question(), views()[1:], ConstantBackend("A"), OrchestratorConfig())


def test_resolve_final_requires_score():
    with pytest.raises(PreconditionError):
        resolve_final(question(), AnswerSet("q"), ConstantBackend("A"), OrchestratorConfig(), views()[0].image)


def test_free_form_question_flow():
    q = question(answer_type="fill_in_blank", gt="40", choices=None)
    be = Recorder({"q": ["40", "40.0", "Answer: 40", "1,000", "38", "40", "38", "38", "38", "38", "40"]})
    aset = run_multi_view(q, views(), be, OrchestratorConfig())
    assert aset.canonical[:4] == ["40", "40", "40", "1000"]
    assert aset.c_q == Fraction(5, 11) and aset.triggered_correction


# Prompt ---------------------------------------------------------------------------------


def answer_set(canon):
    aset = AnswerSet("q")
    for i, c in enumerate(canon):
        kind, level = (None, None) if i == 0 else ("gaussian_noise", "high")
        aset.answers.append(ViewAnswer(i, c, c, kind, level))
    return aset


def test_prompt_lists_both_answers_with_provenance():
    p = build_self_correction_prompt(question(), answer_set(["B", "C"]))
    assert "A_0 (original, unperturbed diagram): B" in p
    assert "A_1 (perturbed view 1: gaussian_noise, high intensity): C" in p
    assert "Which colour?" in p and "(B) green" in p
    assert "identify the most consistent and likely correct answer among them" in p
    assert p.rstrip().splitlines()[-1].startswith("End your reply")


def test_prompt_enumerates_all_eleven():
    p = build_self_correction_prompt(question(), answer_set(list("BBBBBBCCCCC")))
    assert all(f"- A_{i} " in p for i in range(11))
    assert p.count("unperturbed") == 1


def test_prompt_rejects_identical_answers():
    with pytest.raises(PreconditionError):
        build_self_correction_prompt(question(), answer_set(["B"] * 11))


# Log records ----------------------------------------------------------------------------


def test_answer_set_records_shape():
    be = Recorder({"q": list("BBBBBBCCCCC")}, corrections={"q": "C"})
    cfg = OrchestratorConfig()
    aset = run_multi_view(question(), views(), be, cfg)
    recs = answer_set_records(question(), aset, cfg, 10)
    assert [r["record"] for r in recs] == ["view"] * 11 + ["summary"]
    assert [r["view_index"] for r in recs[:-1]] == list(range(11))
    s = recs[-1]
    assert s["c_q"] == "6/11" and s["triggered"] and s["a_final"] == "C" and s["total_calls"] == 12
    assert s["gt_canonical"] == "B"
    json.dumps(recs)
