"""Contact derivation, prompt/parse round trips, text encoding, service client."""

import http.server
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duomotion.annotation import (AnnotationParseError, ContactPair,
                                  InteractionCaption, InvalidSpanError,
                                  MalformedPairError, MissingCaptionError,
                                  ServiceConfig, ServiceEnvelopeError,
                                  ServiceStatusError, UnknownJointError,
                                  annotate_via_service, build_prompt,
                                  derive_contacts, encode_text, pairs_to_mask,
                                  parse_response, read_annotation,
                                  render_caption, vocabulary, write_annotation)
from duomotion.body import load_default_tree

from oracles import run_length_contacts

TREE = load_default_tree()


def _joint_tracks(dist_profile, joint_a="right_wrist", joint_b="right_wrist"):
    """Two joint tracks where only (joint_a, joint_b) can come near."""
    L = len(dist_profile)
    ja = np.zeros((L, 24, 3))
    jb = np.zeros((L, 24, 3))
    for j in range(24):
        ja[:, j] = [0.0, j * 1.0, 0.0]
        jb[:, j] = [50.0, j * 1.0, 0.0]
    ia, ib = TREE.joint_index(joint_a), TREE.joint_index(joint_b)
    jb[:, ib] = ja[:, ia] + np.array([[d, 0, 0] for d in dist_profile])
    return ja, jb


# -- derive_contacts ------------------------------------------------------------


def test_far_apart_no_contacts():
    ja, jb = _joint_tracks([5.0] * 8)
    assert derive_contacts(ja, jb, threshold=0.10) == []


def test_single_run_detected():
    profile = [1.0] * 4 + [0.05] * 6 + [1.0] * 6
    ja, jb = _joint_tracks(profile)
    pairs = derive_contacts(ja, jb, threshold=0.10)
    assert pairs == [ContactPair("right_wrist", "right_wrist", 4, 9)]
    # brute-force run-length oracle agrees
    dist = np.linalg.norm(
        ja[:, TREE.joint_index("right_wrist")] - jb[:, TREE.joint_index("right_wrist")],
        axis=1)
    assert run_length_contacts(dist, 0.10) == [(4, 9)]


def test_two_runs_stay_separate():
    profile = [1, 1, 0.04, 0.04, 1, 1, 1, 0.04, 0.04, 1]
    ja, jb = _joint_tracks(profile)
    pairs = derive_contacts(ja, jb, threshold=0.10)
    assert [(p.begin, p.end) for p in pairs] == [(2, 3), (7, 8)]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_derive_matches_runlength_oracle(seed):
    rng = np.random.default_rng(seed)
    profile = rng.uniform(0.0, 0.3, size=12)
    ja, jb = _joint_tracks(profile, joint_a="left_elbow", joint_b="head")
    pairs = derive_contacts(ja, jb, threshold=0.10)
    runs = run_length_contacts(np.asarray(profile), 0.10)
    got = [(p.begin, p.end) for p in pairs
           if (p.joint_a, p.joint_b) == ("left_elbow", "head")]
    assert got == runs


# -- prompt -----------------------------------------------------------------------


def test_prompt_contains_required_fragments():
    doc = build_prompt()
    assert "Human has JOINTS" in doc
    assert "{left_wrist, right_wrist, 11, 15}" in doc
    for name in vocabulary():
        assert name in doc


def test_prompt_byte_stable():
    assert build_prompt("clip_7", 16) == build_prompt("clip_7", 16)


def test_prompt_example_block_parses():
    caption = parse_response(build_prompt())
    assert ContactPair("left_wrist", "right_wrist", 11, 15) in caption.pairs
    assert len(caption.pairs) == 3
    assert caption.text_1.startswith("a person dance")


# -- parse ------------------------------------------------------------------------


def test_parse_appendix_example_pair():
    cap = parse_response("{left_wrist, right_wrist, 11, 15}")
    assert cap.pairs == [ContactPair("left_wrist", "right_wrist", 11, 15)]


def test_parse_unknown_joint_rejected():
    with pytest.raises(UnknownJointError):
        parse_response("{left_pinky, head, 0, 1}")


def test_parse_bad_span_rejected():
    with pytest.raises(InvalidSpanError):
        parse_response("{head, head, 9, 3}")


def test_parse_noninteger_rejected():
    with pytest.raises(MalformedPairError):
        parse_response("{head, head, 1.5, 3}")


def test_parse_arbitrary_whitespace():
    cap = parse_response("{  left_wrist ,right_wrist,\t11 , 15 }")
    assert cap.pairs == [ContactPair("left_wrist", "right_wrist", 11, 15)]


def test_strict_mode_rejects_unknown_content():
    text = "some chatter\ntext 1: hi\ntext 2: yo\n{head, head, 0, 1}"
    assert parse_response(text).pairs  # lenient ignores the chatter
    with pytest.raises(AnnotationParseError):
        parse_response(text, strict=True)


def test_strict_mode_requires_captions():
    with pytest.raises(MissingCaptionError):
        parse_response("{head, head, 0, 1}", strict=True)


def test_render_parse_round_trip():
    cap = InteractionCaption(
        "a person hugs others.", "a person is hugged by others.",
        [ContactPair("left_wrist", "right_shoulder", 2, 9),
         ContactPair("head", "head", 4, 4)])
    again = parse_response(render_caption(cap))
    assert again.text_1 == cap.text_1
    assert again.text_2 == cap.text_2
    assert again.pairs == cap.pairs
    assert render_caption(again) == render_caption(cap)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_random_pair_round_trip(data):
    vocab = list(vocabulary())
    ja = data.draw(st.sampled_from(vocab))
    jb = data.draw(st.sampled_from(vocab))
    b = data.draw(st.integers(0, 200))
    e = data.draw(st.integers(b, 220))
    p = ContactPair(ja, jb, b, e)
    parsed = parse_response(p.render()).pairs
    assert parsed == [p]
    assert parsed[0].render() == p.render()


# -- text encoding --------------------------------------------------------------------


def test_encode_text_deterministic_unit_norm():
    v1 = encode_text("two people hug closely")
    v2 = encode_text("two people hug closely")
    assert np.array_equal(v1, v2)
    assert v1.shape == (256,)
    assert np.isclose(np.linalg.norm(v1), 1.0)


def test_encode_text_distinguishes_captions():
    sim = float(encode_text("hug") @ encode_text("handshake"))
    assert sim < 0.99


def test_encode_text_empty_is_zero():
    assert np.array_equal(encode_text(""), np.zeros(256))
    assert np.array_equal(encode_text("  ,,  "), np.zeros(256))


def test_encode_text_fixture_vocabulary_no_collisions():
    words = ["hug", "handshake", "dance", "high", "five", "approach", "person",
             "arms", "right", "left", "wrist", "shoulder", "waist", "embrace"]
    vecs = np.stack([encode_text(w) for w in words])
    sims = vecs @ vecs.T - np.eye(len(words))
    assert sims.max() < 0.99


# -- masks -------------------------------------------------------------------------------


def test_pairs_to_mask_empty():
    mask = pairs_to_mask([], 16)
    assert mask.person1.shape == (24, 16)
    assert not mask.person1.any() and not mask.person2.any()


def test_pairs_to_mask_marks_span():
    mask = pairs_to_mask([ContactPair("left_wrist", "right_wrist", 4, 9)], 16)
    lw = TREE.joint_index("left_wrist")
    rw = TREE.joint_index("right_wrist")
    expect1 = np.zeros((24, 16))
    expect1[lw, 4:10] = 1
    assert np.array_equal(mask.person1, expect1)
    assert mask.person2[rw, 4:10].all()
    assert mask.person2.sum() == 6


def test_pairs_to_mask_idempotent_overlap():
    pairs = [ContactPair("head", "head", 2, 6), ContactPair("head", "head", 4, 8)]
    mask = pairs_to_mask(pairs, 12)
    h = TREE.joint_index("head")
    assert mask.person1[h].max() == 1.0
    assert mask.person1[h, 2:9].all()


def test_pairs_to_mask_span_bound():
    with pytest.raises(InvalidSpanError):
        pairs_to_mask([ContactPair("head", "head", 2, 20)], 16)


# -- service ------------------------------------------------------------------------------


def test_stub_mode_canned_by_scenario():
    cfg = ServiceConfig(stub=True)
    text = annotate_via_service("ignored", cfg, clip_id="hug_0001")
    cap = parse_response(text)
    assert "hug" in cap.text_1
    assert cap.pairs
    again = annotate_via_service("ignored", cfg, clip_id="hug_0001")
    assert text == again


def test_stub_mode_fixture_dir_override(tmp_path):
    (tmp_path / "clip_x.txt").write_text("text 1: custom\ntext 2: canned\n")
    cfg = ServiceConfig(stub=True, stub_dir=str(tmp_path))
    assert "custom" in annotate_via_service("p", cfg, clip_id="clip_x")


class _Handler(http.server.BaseHTTPRequestHandler):
    behavior = "ok"

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        assert body["messages"][0]["role"] == "user"
        if self.behavior == "ok":
            reply = {"choices": [{"message": {"content":
                     "text 1: live\ntext 2: wire\n{head, head, 0, 1}"}}]}
            payload = json.dumps(reply).encode()
            self.send_response(200)
        elif self.behavior == "bad_envelope":
            payload = json.dumps({"nope": 1}).encode()
            self.send_response(200)
        else:
            payload = b"server error"
            self.send_response(500)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def live_server():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_live_mode_round_trip(live_server):
    _Handler.behavior = "ok"
    cfg = ServiceConfig(endpoint=live_server, stub=False, retries=1, timeout=5)
    text = annotate_via_service(build_prompt(), cfg)
    cap = parse_response(text)
    assert cap.text_1 == "live"
    assert cap.pairs == [ContactPair("head", "head", 0, 1)]


def test_live_mode_status_error(live_server):
    _Handler.behavior = "status_500"
    cfg = ServiceConfig(endpoint=live_server, stub=False, retries=2,
                        timeout=5, backoff=0.01)
    with pytest.raises(ServiceStatusError):
        annotate_via_service("p", cfg)


def test_live_mode_envelope_error(live_server):
    _Handler.behavior = "bad_envelope"
    cfg = ServiceConfig(endpoint=live_server, stub=False, retries=2,
                        timeout=5, backoff=0.01)
    with pytest.raises(ServiceEnvelopeError) as exc_info:
        annotate_via_service("p", cfg)
    assert exc_info.value.raw_text is not None


def test_unreachable_endpoint_no_partial_output():
    cfg = ServiceConfig(endpoint="http://127.0.0.1:9/none", stub=False,
                        retries=2, timeout=0.2, backoff=0.01)
    with pytest.raises(Exception):
        annotate_via_service("p", cfg)


# -- files -----------------------------------------------------------------------------------


def test_annotation_file_round_trip(tmp_path):
    cap = InteractionCaption("a person waves.", "a person waves back.",
                             [ContactPair("left_wrist", "right_wrist", 1, 3)])
    path = tmp_path / "clip42.annotation.json"
    write_annotation(path, "clip42", cap, config_hash="abc")
    clip_id, back = read_annotation(path)
    assert clip_id == "clip42"
    assert back.pairs == cap.pairs
    doc = json.loads(path.read_text())
    assert list(doc)[:4] == ["clip_id", "text_1", "text_2", "pairs"]
    assert doc["schema_version"] == 1
    assert doc["config_hash"] == "abc"
