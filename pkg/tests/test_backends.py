import base64
import io
import json

import httpx
import numpy as np
import pytest
from PIL import Image

from afford3d.backends import make_backends
from afford3d.backends.base import (BoundingBox2D, GroundingRequest, SelectionRequest, grounding_prompt,
                                    parse_grounding_response, parse_selection_response, selection_prompt,
                                    template)
from afford3d.backends.http import (ChatClient, HTTPGrounder, HTTPSegmenter, HTTPSelector, RetryPolicy,
                                    post_with_retries)
from afford3d.backends.mocks import (OracleGrounder, OracleLanguageModel, OracleSegmenter, OracleSelector,
                                     ReplayBackend)
from afford3d.errors import BackendError, ContractViolation, ParseError, SelectionError, ValidationError
from afford3d.query import parse_query
from afford3d.scene_graph import serialize_graph
from afford3d.synthetic import save_synthetic

from graphs import golden_lamp


def test_box_validation():
    with pytest.raises(ValidationError):
        BoundingBox2D(5, 5, 5, 9)
    with pytest.raises(ValidationError):
        BoundingBox2D(0, 0, 1, 1, part_index=2)
    assert BoundingBox2D(0, 0, 10, 10).iou(BoundingBox2D(5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_grounding_parser():
    raw = ('Sure:\n[{"bbox_2d": [10, 20, 30, 40], "part_index": 1},'
           ' {"bbox_2d": [30, 40, 10, 20], "part_index": 0},'
           ' {"bbox_2d": [5, 5, 5, 9]}, {"bbox_2d": [500, 500, 600, 600]},'
           ' {"bbox_2d": [-5, 2, 400, 8]}]')
    boxes = parse_grounding_response(raw, 320, 240)
    assert [(b.as_list(), b.part_index) for b in boxes] == [
        ([10, 20, 30, 40], 1), ([10, 20, 30, 40], 0), ([0, 2, 319, 8], 1)]


def test_grounding_parser_norm1000():
    (b,) = parse_grounding_response('[{"bbox_2d": [0, 0, 1000, 500]}]', 321, 241, scale="norm1000")
    assert b.as_list() == [0, 0, 320, 120]


@pytest.mark.parametrize("raw", ["no boxes", "[{not json}]", '[{"bbox": [1,2,3,4]}]'])
def test_grounding_parser_errors(raw):
    with pytest.raises(ParseError):
        parse_grounding_response(raw, 10, 10)


def test_selection_parser():
    assert parse_selection_response(" 2.\n", 3) == 2
    with pytest.raises(SelectionError):
        parse_selection_response("7", 3)
    with pytest.raises(ParseError):
        parse_selection_response("node 2", 3)


def test_prompt_templates_filled():
    p = grounding_prompt("open the drawer", "handle")
    assert "open the drawer" in p and "{instruction}" not in p and "{category}" not in p
    assert grounding_prompt("x", "handle", adversarial=False) != p
    g = serialize_graph(golden_lamp())
    s = selection_prompt("pull it", g, 3)
    assert g in s and "{len(affordance_nodes)}" not in s
    assert template("stage1_parse").startswith("You translate")


@pytest.fixture(scope="module")
def oracle(synth7):
    return OracleGrounder(synth7), OracleSegmenter(synth7)


def test_oracle_grounder_pairs_positive_and_negative(synth7, oracle):
    grounder, _ = oracle
    frame = synth7.scene.frames[12]
    boxes = grounder.ground(GroundingRequest(frame, (), "handle", "pull a handle", synth7.scene.scene_id))
    parts = [b.part_index for b in boxes]
    assert parts == [1, 0] * (len(boxes) // 2) and len(boxes) >= 2
    for pos, neg in zip(boxes[::2], boxes[1::2]):
        assert pos.iou(neg) < 1.0 and neg.within(320, 240)
    plain = grounder.ground(GroundingRequest(frame, (), "handle", "pull a handle", synth7.scene.scene_id,
                                             adversarial=False))
    assert [b.as_list() for b in plain] == [b.as_list() for b in boxes[::2]]


def test_oracle_segmenter_box_mask_matches_instance(synth7, oracle):
    grounder, seg = oracle
    frame = synth7.scene.frames[12]
    ids = synth7.instance_map(frame)
    boxes = grounder.ground(GroundingRequest(frame, (), "handle", "pull", synth7.scene.scene_id))
    for pos in boxes[::2]:
        m = seg.segment_by_box(frame, pos)
        inst = np.unique(ids[m])
        assert len(inst) == 1 and synth7.boxes[int(inst[0]) - 1].label == "handle"
        assert m.sum() == (ids == inst[0]).sum()


def test_segment_by_box_rejects_negative(synth7, oracle):
    _, seg = oracle
    with pytest.raises(ContractViolation):
        seg.segment_by_box(synth7.scene.frames[0], BoundingBox2D(0, 0, 10, 10, 0))


def test_noise_mode_adds_ring(synth7):
    frame = synth7.scene.frames[12]
    clean = OracleSegmenter(synth7).segment_by_text(frame, "handle")
    noisy = OracleSegmenter(synth7, noise=True).segment_by_text(frame, "handle")
    assert len(noisy) == len(clean) + 1
    assert not (noisy[-1] & np.logical_or.reduce(clean)).any()


def test_oracle_selector_and_language(synth7):
    q = synth7.queries[0]
    parsed = parse_query(q["text"], OracleLanguageModel(synth7))
    assert (parsed.interaction_label, parsed.context_label) == ("handle", "drawer")
    assert parsed.spatial.kind == "ordinal"
    g = golden_lamp()
    req = SelectionRequest(serialize_graph(g), q["text"], int_label="handle")
    assert req.affordance_nodes() == [3, 4, 5]
    assert OracleSelector(synth7).select(req, 3) in (3, 4, 5)


def test_replay_backend(synth7):
    g = serialize_graph(golden_lamp())
    records = {
        "language": {"pull it": "None\nhandle\nN/A\nhook_pull\nN/A\npull it"},
        "grounding": {"s|12|handle": '[{"bbox_2d": [1, 2, 30, 40], "part_index": 1}, '
                                     '{"bbox_2d": [0, 0, 50, 50], "part_index": 0}]'},
        "selection": {"s|pull it": "2"},
    }
    rb = ReplayBackend(records)
    assert parse_query("pull it", rb).interaction_label == "handle"
    req = GroundingRequest(synth7.scene.frames[12], (), "handle", "pull it", "s")
    assert [b.part_index for b in rb.ground(req)] == [1, 0]
    sreq = SelectionRequest(g, "pull it", int_label="handle", scene_id="s")
    assert rb.select(sreq, 3) == 4  # "2" is the second affordance node
    with pytest.raises(BackendError):
        rb.complete("", "unknown")
    with pytest.raises(BackendError):
        rb.segment_by_text(synth7.scene.frames[0], "handle")


def test_make_backends(synth7, tmp_path):
    root = save_synthetic(synth7, tmp_path / "s")
    _, ident = make_backends("mock-oracle", root)
    assert ident.startswith("mock-oracle:") and ident.endswith(":0")
    with pytest.raises(ValidationError):
        make_backends("mock-oracle", None)
    with pytest.raises(ValidationError):
        make_backends("gpt")


# ---------------------------------------------------------------------------
# HTTP, offline via httpx.MockTransport


def chat_reply(content):
    return httpx.Response(200, json={"choices": [{"message": {"content": content}}]})


def client_with(handler, sleeps=None):
    return ChatClient("http://model.test/v1", "m", "key", transport=httpx.MockTransport(handler),
                      sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_retries_then_backend_error():
    calls, sleeps = [], []

    def handler(request):
        calls.append(request)
        return httpx.Response(500)

    with pytest.raises(BackendError) as info:
        client_with(handler, sleeps).chat([{"role": "user", "content": "hi"}])
    assert info.value.attempts == 3 and len(calls) == 3
    assert sleeps == [1.0, 2.0]


def test_client_error_not_retried():
    calls = []

    def handler(request):
        calls.append(request)
        return httpx.Response(401, text="nope")

    with pytest.raises(BackendError) as info:
        client_with(handler).chat([])
    assert info.value.attempts == 1 and len(calls) == 1


def test_transport_error_then_success():
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ConnectError("down")
        body = json.loads(request.content)
        assert request.headers["authorization"] == "Bearer key" and body["model"] == "m"
        return chat_reply("ok")

    assert client_with(handler).chat([{"role": "user", "content": "x"}]) == "ok"


def test_malformed_payload():
    with pytest.raises(ParseError):
        client_with(lambda r: httpx.Response(200, json={"x": 1})).chat([])


def test_post_with_retries_on_429():
    codes = iter([429, 200])
    http = httpx.Client(base_url="http://x", transport=httpx.MockTransport(lambda r: httpx.Response(next(codes))))
    assert post_with_retries(http, "/p", {}, RetryPolicy(), sleep=lambda s: None).status_code == 200


def test_http_grounder_sends_exemplars_and_frame(synth7, bank):
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        return chat_reply('[{"bbox_2d": [10, 10, 20, 20], "part_index": 1}, '
                          '{"bbox_2d": [5, 5, 40, 40], "part_index": 0}]')

    ex = tuple(bank.recall("handle")[:2])
    req = GroundingRequest(synth7.scene.frames[0], ex, "handle", "pull", "s", adversarial=False)
    boxes = HTTPGrounder(client_with(handler)).ground(req)
    assert [b.part_index for b in boxes] == [1]
    content = seen["body"]["messages"][0]["content"]
    assert [c["type"] for c in content] == ["text", "image_url", "image_url", "image_url", "text"]


def test_http_selector_retries_unparseable_once():
    replies = iter(["the second one", "2"])
    sel = HTTPSelector(client_with(lambda r: chat_reply(next(replies))))
    req = SelectionRequest(serialize_graph(golden_lamp()), "pull", node_crops={3: np.zeros((4, 4, 3), np.uint8)},
                           int_label="handle")
    assert sel.select(req, 3) == 4


def test_http_segmenter(synth7):
    frame = synth7.scene.frames[0]
    mask = np.zeros(frame.shape, dtype=np.uint8)
    mask[5:9, 5:9] = 255
    buf = io.BytesIO()
    Image.fromarray(mask).save(buf, format="PNG")
    blob = base64.b64encode(buf.getvalue()).decode()

    def handler(request):
        body = json.loads(request.content)
        assert body["image"].startswith("data:image/png;base64,")
        return httpx.Response(200, json={"masks": [blob] if "box" in body else []})

    seg = HTTPSegmenter("http://seg.test", transport=httpx.MockTransport(handler), sleep=lambda s: None)
    assert seg.segment_by_box(frame, BoundingBox2D(0, 0, 20, 20)).sum() == 16
    assert seg.segment_by_text(frame, "handle") == []
    with pytest.raises(ContractViolation):
        seg.segment_by_box(frame, BoundingBox2D(0, 0, 20, 20, 0))
