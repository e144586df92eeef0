import pytest
from hypothesis import given
from hypothesis import strategies as st

from afford3d.errors import ContractViolation, ParseError
from afford3d.query import (ActionClass, ParsedQuery, SpatialDescriptor, parse_query,
                            parse_spatial_descriptor, parse_stage1_response, stage1_prompt)


class ScriptedModel:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, system_prompt, text):
        self.prompts.append((system_prompt, text))
        return self.replies.pop(0) if len(self.replies) > 1 else self.replies[0]


def test_worked_example_without_backend():
    q = "the handle of the second drawer from the top"
    p = parse_query(q)
    assert (p.context_label, p.interaction_label) == ("drawer", "handle")
    assert p.spatial == SpatialDescriptor.ordinal(2, "top")
    assert p.original_prompt == q


@pytest.mark.parametrize("text, expected", [
    ("second from the top", SpatialDescriptor.ordinal(2, "top")),
    ("the 3rd knob from the left", SpatialDescriptor.ordinal(3, "left")),
    ("first drawer from the bottom", SpatialDescriptor.ordinal(1, "bottom")),
    ("tenth from the right", SpatialDescriptor.ordinal(10, "right")),
    ("left of the window", SpatialDescriptor.related("left_of", "window")),
    ("the switch to the right of the door", SpatialDescriptor.related("right_of", "door")),
    ("the handle nearest to the lamp", SpatialDescriptor.nearest("lamp")),
    ("the knob above the oven", SpatialDescriptor.related("above", "oven")),
    ("the outlet under the desk", SpatialDescriptor.related("below", "desk")),
    ("the button next to the sink", SpatialDescriptor.related("next_to", "sink")),
    ("the top drawer", SpatialDescriptor.ordinal(1, "top")),
    ("N/A", SpatialDescriptor()),
    ("", SpatialDescriptor()),
    ("open it", SpatialDescriptor()),
])
def test_descriptor_grammar(text, expected):
    assert parse_spatial_descriptor(text) == expected


@given(st.text(max_size=80))
def test_grammar_is_total(text):
    assert parse_spatial_descriptor(text).kind in ("none", "ordinal", "relation", "nearest")


@given(st.text(min_size=1, max_size=60).filter(str.strip))
def test_prompt_preserved_verbatim(text):
    reply = "None\nhandle\nN/A\nhook_pull\nN/A\nwhatever"
    assert parse_query(text, ScriptedModel(reply)).original_prompt == text


def test_backend_pass_through_and_prompt_sent_verbatim():
    reply = "None\npower button\nN/A\ntip_push\nN/A\npress the power button"
    model = ScriptedModel(reply)
    p = parse_query("press the power button", model)
    assert p.action is ActionClass.TIP_PUSH
    assert p.interaction_label == "power button"
    assert model.prompts == [(stage1_prompt(), "press the power button")]


def test_named_field_reply():
    raw = ("contextual_object: cabinet\ninteractive_objects: handles, knob\n"
           "functional_object_candidates: drawer\naction: hook_pull\n"
           "spatial_relation [X, Y]: [cabinet, lamp]\noriginal_prompt: x")
    p = parse_stage1_response(raw, "pull the handle nearest to the lamp")
    assert p.context_label == "cabinet"
    assert p.interaction_label == "handle"
    assert p.functional_candidates == ("knob", "drawer")
    assert p.spatial == SpatialDescriptor.nearest("lamp")


def test_unknown_action_rejected():
    with pytest.raises(ParseError):
        parse_stage1_response("None\nhandle\nN/A\nyank\nN/A\nq", "q")


def test_malformed_reply_retried_then_fails():
    model = ScriptedModel("garbage")
    with pytest.raises(ParseError) as info:
        parse_query("pull the handle", model)
    assert len(model.prompts) == 3
    assert info.value.raw == "garbage"


def test_retry_recovers():
    model = ScriptedModel("garbage", "None\nhandle\nN/A\nhook_pull\nN/A\npull the handle")
    assert parse_query("pull the handle", model).interaction_label == "handle"


def test_empty_query():
    with pytest.raises(ContractViolation):
        parse_query("   ")


def test_parsed_query_round_trip():
    p = parse_query("pull the handle to the left of the lamp")
    assert ParsedQuery.from_dict(p.to_dict()) == p
    assert p.spatial == SpatialDescriptor.related("left_of", "lamp")
    assert p.context_label is None or p.context_label != "lamp"
