"""HTTP service tests over the in-process test client."""

import threading

import pytest
from fastapi.testclient import TestClient

from dialoflow.server import create_app
from dialoflow.training import checkpoint_hash, save_checkpoint


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_setup, tmp_path_factory):
    params, cfg, vocab, _, _ = tiny_setup
    path = tmp_path_factory.mktemp("svc") / "model.ckpt"
    save_checkpoint(params, cfg, vocab, path)
    return str(path)


@pytest.fixture(scope="module")
def client(tiny_ckpt):
    with TestClient(create_app(tiny_ckpt)) as c:
        yield c


def start_session(client, **options):
    resp = client.post("/sessions", json=options or None)
    assert resp.status_code == 201
    return resp.json()["session_id"]


class TestHealthAndProvenance:
    def test_healthz(self, client, tiny_ckpt):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        body = resp.json()
        assert body["status"] == "ok"
        assert body["checkpoint_hash"] == checkpoint_hash(tiny_ckpt)

    def test_every_response_carries_hash_header(self, client, tiny_ckpt):
        expected = checkpoint_hash(tiny_ckpt)
        for resp in (client.get("/healthz"), client.post("/sessions")):
            assert resp.headers["X-Checkpoint-Hash"] == expected

    def test_missing_checkpoint_rejected(self, monkeypatch):
        monkeypatch.delenv("DIALOFLOW_CKPT", raising=False)
        with pytest.raises(ValueError, match="checkpoint"):
            create_app(None)

    def test_env_var_checkpoint(self, tiny_ckpt, monkeypatch):
        monkeypatch.setenv("DIALOFLOW_CKPT", tiny_ckpt)
        with TestClient(create_app(None)) as c:
            assert c.get("/healthz").status_code == 200


class TestSessions:
    def test_create_with_options(self, client):
        sid = start_session(client, strategy="beam", beam_width=3, max_new_tokens=8)
        assert sid

    def test_bad_options_rejected_with_field_path(self, client):
        resp = client.post("/sessions", json={"strategy": "sampling"})
        assert resp.status_code == 400
        assert any("strategy" in f for f in resp.json()["fields"])

    def test_unknown_session_404(self, client):
        resp = client.post("/sessions/nope/message", json={"text": "hi"})
        assert resp.status_code == 404
        assert client.get("/sessions/nope/trajectory").status_code == 404

    def test_capacity_limit(self, tiny_ckpt):
        with TestClient(create_app(tiny_ckpt, max_sessions=1)) as c:
            assert c.post("/sessions").status_code == 201
            assert c.post("/sessions").status_code == 429

    def test_idle_expiry(self, tiny_ckpt):
        with TestClient(create_app(tiny_ckpt, idle_seconds=0.0)) as c:
            sid = start_session(c)
            resp = c.post(f"/sessions/{sid}/message", json={"text": "t0 w0 w1"})
            assert resp.status_code == 404


class TestMessages:
    def test_message_contract(self, client):
        sid = start_session(client, max_new_tokens=8)
        resp = client.post(f"/sessions/{sid}/message", json={"text": "t0 w0 w1"})
        assert resp.status_code == 200
        body = resp.json()
        assert isinstance(body["reply"], str) and body["reply"]
        assert body["turn_index"] == 1
        assert -1.0 <= body["s_k"] <= 1.0
        assert body["flow_running"] >= 1.0
        assert body["influence_norms"]["predicted"] >= 0
        assert body["influence_norms"]["realized"] >= 0
        assert body["truncated"] is False

    def test_malformed_body_reports_field(self, client):
        sid = start_session(client)
        resp = client.post(f"/sessions/{sid}/message", json={"text": ""})
        assert resp.status_code == 400
        assert any("text" in f for f in resp.json()["fields"])
        resp = client.post(f"/sessions/{sid}/message", json={})
        assert resp.status_code == 400

    def test_identical_histories_identical_replies(self, client):
        def run():
            sid = start_session(client, max_new_tokens=8)
            replies = []
            for text in ("t0 w0 w1", "t0 w2 w5"):
                body = client.post(f"/sessions/{sid}/message", json={"text": text}).json()
                replies.append((body["reply"], body["s_k"], body["flow_running"]))
            return replies

        assert run() == run()

    def test_concurrent_messages_same_session_serialized(self, client):
        sid = start_session(client, max_new_tokens=6)
        results = []

        def send(text):
            resp = client.post(f"/sessions/{sid}/message", json={"text": text})
            results.append(resp.json()["turn_index"])

        threads = [threading.Thread(target=send, args=(f"t{i} w{i} w{i}",)) for i in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == [1, 2]

    def test_distinct_sessions_independent(self, client):
        a = start_session(client, max_new_tokens=6)
        b = start_session(client, max_new_tokens=6)
        ra = client.post(f"/sessions/{a}/message", json={"text": "t0 w0 w1"}).json()
        rb = client.post(f"/sessions/{b}/message", json={"text": "t1 w1 w2"}).json()
        assert ra["turn_index"] == rb["turn_index"] == 1


class TestTrajectory:
    def test_empty_session(self, client):
        sid = start_session(client)
        assert client.get(f"/sessions/{sid}/trajectory").json() == {"points": []}

    def test_point_count_grows_two_per_exchange(self, client):
        sid = start_session(client, max_new_tokens=6)
        for i, expected in [(0, 3), (1, 5)]:
            client.post(f"/sessions/{sid}/message", json={"text": f"t{i} w{i} w{i + 1}"})
            points = client.get(f"/sessions/{sid}/trajectory").json()["points"]
            assert len(points) == expected
            assert points[0]["speaker"] == "start"
            assert {"k", "x", "y", "speaker"} <= set(points[0])


class TestScore:
    def test_score_endpoint(self, client):
        resp = client.post(
            "/score",
            json={
                "turns": [
                    {"speaker": "human", "text": "t0 w0 w1"},
                    {"speaker": "bot", "text": "t0 w1 w3"},
                ]
            },
        )
        assert resp.status_code == 200
        body = resp.json()
        assert body["bot_turn_count"] == 1
        assert body["flow"] >= 1.0
        assert all(-1.0 <= s <= 1.0 for s in body["similarities"])

    def test_no_bot_turns_400(self, client):
        resp = client.post(
            "/score", json={"turns": [{"speaker": "human", "text": "t0 w0 w1"}]}
        )
        assert resp.status_code == 400

    def test_bad_speaker_field_path(self, client):
        resp = client.post(
            "/score", json={"turns": [{"speaker": "alien", "text": "hi"}]}
        )
        assert resp.status_code == 400
        assert any("speaker" in f for f in resp.json()["fields"])
