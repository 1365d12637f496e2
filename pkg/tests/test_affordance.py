import json
import socket
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest
from hypothesis import given, strategies as st

from affordpose.affordance import (
    COND_DIM, ELEMENTS, EMBED_DIMS, UNK, AffordanceDescription, ConnectivityError, ImageRef, ParseError,
    ServiceError, TextServiceClient, VocabularyTable, build_step1_prompt, build_step2_prompt, caption,
    element_slices, encode_description, init_embedding_tables, parse_step1_response, render_elements,
    write_fixture,
)

RESPONSE = """category: Mug
shape: cylindrical
size: tiny
interaction: holding
intention: to drink
taxonomy: 3"""

IMG = ImageRef("frame_0001.jpg", 640, 480)
HAND, OBJ = (100, 120, 300, 360), (250, 200, 400, 380)


def test_parse_labeled_lines():
    d = parse_step1_response(RESPONSE)
    assert d == AffordanceDescription("mug", "cylindrical", "small", "holding", "to drink", 3)


def test_parse_tolerates_bullets_and_markup():
    text = "Here you go:\n- **Category**: Bottle\n2. shape: Elongated\n* size: Big\ninteraction: pouring\n" \
           "intention: to pour\ntaxonomy: class 12"
    d = parse_step1_response(text)
    assert (d.object_category, d.object_size, d.grasp_taxonomy) == ("bottle", "large", 12)


@pytest.mark.parametrize("drop", ELEMENTS)
def test_parse_names_missing_label(drop):
    text = "\n".join(line for line in RESPONSE.splitlines() if not line.startswith(drop))
    with pytest.raises(ParseError) as info:
        parse_step1_response(text)
    assert info.value.label == drop and drop in str(info.value)


@pytest.mark.parametrize("line,label", [("size: gargantuan-ish blob", "size"), ("taxonomy: 28", "taxonomy"),
                                        ("taxonomy: none", "taxonomy")])
def test_parse_rejects_bad_values(line, label):
    key = line.split(":")[0]
    text = "\n".join(line if l.startswith(key) else l for l in RESPONSE.splitlines())
    with pytest.raises(ParseError) as info:
        parse_step1_response(text)
    assert info.value.label == label


def test_prompts_mention_each_label_once():
    p1 = build_step1_prompt(IMG, HAND, OBJ)
    p2 = build_step2_prompt(parse_step1_response(RESPONSE))
    for label in ELEMENTS:
        assert sum(line.startswith(f"{label}:") for line in p1.splitlines()) == 1
        assert sum(line.startswith(f"{label}:") for line in p2.splitlines()) == 1
    assert "(100, 120, 300, 360)" in p1 and "640x480" in p1


@pytest.mark.parametrize("box", [(300, 120, 100, 360), (-1, 0, 10, 10), (0, 0, 641, 10), (0, 0, 10, 481)])
def test_prompt_rejects_bad_boxes(box):
    with pytest.raises(ValueError):
        build_step1_prompt(IMG, box, OBJ)


def _fixture_client(tmp_path, step1=RESPONSE, summary="A hand holds a small mug to drink."):
    client = TextServiceClient(fixtures_dir=tmp_path / "fx")
    req1 = client.make_request(build_step1_prompt(IMG, HAND, OBJ), IMG.payload())
    write_fixture(client.fixtures_dir, req1, step1)
    return client, summary


def _add_summary(client, elements, summary):
    write_fixture(client.fixtures_dir, client.make_request(build_step2_prompt(elements)), summary)


def test_caption_replays_fixtures(tmp_path):
    client, summary = _fixture_client(tmp_path)
    _add_summary(client, parse_step1_response(RESPONSE), summary)
    d = caption(client, IMG, HAND, OBJ)
    assert d.grasp_taxonomy == 3 and d.summary == summary


def test_ground_truth_taxonomy_overrides_parsed(tmp_path):
    client, summary = _fixture_client(tmp_path)
    elements = parse_step1_response(RESPONSE)
    _add_summary(client, AffordanceDescription(**{**elements.to_dict(), "grasp_taxonomy": 12}), summary)
    d = caption(client, IMG, HAND, OBJ, gt_taxonomy=12)
    assert d.grasp_taxonomy == 12


def test_caption_cache_skips_service(tmp_path):
    client, summary = _fixture_client(tmp_path)
    _add_summary(client, parse_step1_response(RESPONSE), summary)
    first = caption(client, IMG, HAND, OBJ, cache_dir=tmp_path / "cache")
    for f in client.fixtures_dir.iterdir():
        f.unlink()
    assert caption(client, IMG, HAND, OBJ, cache_dir=tmp_path / "cache") == first


def test_missing_fixture_without_endpoint(tmp_path):
    with pytest.raises(ServiceError, match="no fixture"):
        TextServiceClient(fixtures_dir=tmp_path).complete({"prompt": "x"})


def _closed_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_unreachable_service_retries_then_fails():
    delays = []
    client = TextServiceClient(endpoint=f"http://127.0.0.1:{_closed_port()}/v1", attempts=3, timeout=2.0,
                               sleep=delays.append)
    with pytest.raises(ConnectivityError, match="3 attempts"):
        client.complete(client.make_request("hello"))
    assert delays == [0.5, 1.0]


class _Server:
    def __init__(self, statuses):
        self.statuses = list(statuses)
        self.bodies = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                outer.bodies.append(json.loads(self.rfile.read(int(self.headers["Content-Length"]))))
                outer.auth = self.headers.get("Authorization")
                status = outer.statuses.pop(0) if outer.statuses else 200
                payload = json.dumps({"text": "category: ok"} if status == 200 else {"error": "x"}).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}/complete"

    def __enter__(self):
        threading.Thread(target=self.httpd.serve_forever, daemon=True).start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def test_transient_error_is_retried(tmp_path, monkeypatch):
    monkeypatch.setenv("AFP_TEST_KEY", "secret")
    with _Server([503]) as srv:
        client = TextServiceClient(endpoint=srv.url, api_key_env="AFP_TEST_KEY", fixtures_dir=tmp_path,
                                   record=True, sleep=lambda s: None)
        req = client.make_request("hello")
        assert client.complete(req) == "category: ok"
        assert len(srv.bodies) == 2 and srv.bodies[-1] == req
        assert srv.auth == "Bearer secret"
    # recorded fixture answers without the server
    assert TextServiceClient(fixtures_dir=tmp_path).complete(req) == "category: ok"


def test_client_error_is_not_retried():
    with _Server([400]) as srv:
        client = TextServiceClient(endpoint=srv.url, sleep=lambda s: None)
        with pytest.raises(ServiceError, match="HTTP 400") as info:
            client.complete(client.make_request("hello"))
        assert not isinstance(info.value, ConnectivityError)
        assert len(srv.bodies) == 1


def test_encoder_slices_and_unknown_tokens():
    known = parse_step1_response(RESPONSE)
    vocab = VocabularyTable.build([known])
    assert all(vocab.tokens[el][0] == UNK for el in ELEMENTS)
    tables = init_embedding_tables(vocab, np.random.default_rng(0))
    vec = encode_description(known, vocab, tables)
    assert vec.shape == (COND_DIM,)
    for el, sl in element_slices().items():
        assert np.array_equal(vec[sl], tables[el][1])
    assert not np.any(vec[sum(EMBED_DIMS.values()):])
    novel = AffordanceDescription("teapot", "round", "large", "pouring", "to pour", 20)
    vec2 = encode_description(novel, vocab, tables)
    for el, sl in element_slices().items():
        assert np.array_equal(vec2[sl], tables[el][0])


def test_encoder_checks_table_shapes():
    d = parse_step1_response(RESPONSE)
    vocab = VocabularyTable.build([d])
    tables = init_embedding_tables(vocab, np.random.default_rng(0))
    tables["size"] = tables["size"][:, :8]
    with pytest.raises(ValueError, match="size"):
        encode_description(d, vocab, tables)


def test_description_validation():
    with pytest.raises(ValueError):
        AffordanceDescription("mug", "round", "huge", "holding", "to lift", 3)
    with pytest.raises(ValueError):
        AffordanceDescription("mug", "round", "small", "holding", "to lift", 28)
    with pytest.raises(ValueError):
        AffordanceDescription(" ", "round", "small", "holding", "to lift", 3)


_word = st.text(alphabet="abcdefghij ", min_size=1, max_size=12).filter(lambda s: s.strip())


@given(_word, _word, st.sampled_from(["small", "medium", "large"]), _word, _word, st.integers(0, 27))
def test_render_then_parse_round_trip(cat, shape, size, inter, intent, tax):
    d = AffordanceDescription(" ".join(cat.split()), " ".join(shape.split()), size,
                              " ".join(inter.split()), " ".join(intent.split()), tax)
    assert parse_step1_response(render_elements(d)) == d
