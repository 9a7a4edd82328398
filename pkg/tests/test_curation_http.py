"""Review server endpoints: auth, CORS, decision flow, finalize."""

import json
import threading
import urllib.error
import urllib.request

import pytest

from tomforge import construction_pipeline as cp
from tomforge.chain_model import NodeKind, NodeStatus, Polarity, Topic
from tomforge.curation import CurationService
from tomforge.curation_http import load_roster, make_server
from tomforge.errors import ConfigError

TOKENS = {"tok-alice": "alice", "tok-erin": "erin"}
ROSTER = {"alice": False, "erin": True}


def build_pool():
    pool = cp.CandidatePool()
    s = pool.add(NodeKind.SITUATION, "my final exam is tomorrow",
                 topic=Topic.SCHOOL, status=NodeStatus.ACCEPTED,
                 parent_ids=("event:000000000001",))
    t = pool.add(NodeKind.THOUGHT, "I am going to fail it",
                 polarity=Polarity.NEGATIVE, status=NodeStatus.ACCEPTED,
                 parent_ids=(s.id,))
    pool.add(NodeKind.CLUE, "I skipped most lectures",
             polarity=Polarity.NEGATIVE, parent_ids=(s.id, t.id))
    pool.add(NodeKind.CLUE, "the mock test went badly",
             polarity=Polarity.NEGATIVE, parent_ids=(s.id, t.id))
    pool.add(NodeKind.ACTION, "I cram through the night",
             polarity=Polarity.NEGATIVE, parent_ids=(s.id, t.id))
    pool.add(NodeKind.EMOTION, "Love", polarity=Polarity.NEGATIVE,
             status=NodeStatus.FLAGGED, parent_ids=(s.id, t.id))
    return pool


@pytest.fixture()
def env(tmp_path):
    pool = build_pool()
    service = CurationService(pool, roster=ROSTER,
                              log_path=str(tmp_path / "decisions.jsonl"))
    out_dir = tmp_path / "graph"
    server = make_server(service, TOKENS, out_dir=str(out_dir))
    thread = threading.Thread(target=server.serve_forever,
                              kwargs={"poll_interval": 0.05}, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_address[1]}"
    yield {"base": base, "service": service, "pool": pool, "out_dir": out_dir}
    server.shutdown()
    server.server_close()


def call(base, method, path, token=None, body=None):
    request = urllib.request.Request(base + path, method=method)
    if token:
        request.add_header("Authorization", f"Bearer {token}")
    if body is not None:
        request.data = json.dumps(body).encode("utf-8")
        request.add_header("Content-Type", "application/json")
    try:
        with urllib.request.urlopen(request, timeout=5) as response:
            raw = response.read()
            return response.status, json.loads(raw) if raw else {}, response.headers
    except urllib.error.HTTPError as err:
        raw = err.read()
        return err.code, json.loads(raw) if raw else {}, err.headers


class TestAuth:
    def test_missing_token(self, env):
        status, payload, _ = call(env["base"], "GET", "/stats")
        assert status == 401
        assert payload["error"]["type"] == "Unauthorized"

    def test_unknown_token(self, env):
        status, _, _ = call(env["base"], "GET", "/stats", token="tok-nobody")
        assert status == 401

    def test_preflight_needs_no_token(self, env):
        status, _, headers = call(env["base"], "OPTIONS", "/decisions")
        assert status == 204
        assert headers["Access-Control-Allow-Origin"] == "*"
        assert "POST" in headers["Access-Control-Allow-Methods"]
        assert "Authorization" in headers["Access-Control-Allow-Headers"]

    def test_cors_on_ordinary_responses(self, env):
        _, _, headers = call(env["base"], "GET", "/stats", token="tok-alice")
        assert headers["Access-Control-Allow-Origin"] == "*"


class TestQueue:
    def test_claims_for_caller(self, env):
        status, payload, _ = call(env["base"], "GET", "/queue?size=2",
                                  token="tok-alice")
        assert status == 200
        items = payload["items"]
        assert len(items) == 2
        assert all(item["claimed_by"] == "alice" for item in items)
        assert items[0]["situation"] == "my final exam is tomorrow"

    def test_kind_filter(self, env):
        status, payload, _ = call(env["base"], "GET", "/queue?kind=Action",
                                  token="tok-alice")
        assert status == 200
        assert {item["kind"] for item in payload["items"]} == {"Action"}

    def test_bad_kind_value(self, env):
        status, payload, _ = call(env["base"], "GET", "/queue?kind=Sonnet",
                                  token="tok-alice")
        assert status == 400
        assert payload["error"]["type"] == "BadRequest"

    def test_unknown_route(self, env):
        status, _, _ = call(env["base"], "GET", "/nope", token="tok-alice")
        assert status == 404


class TestDecisions:
    def claim_one(self, env, **filters):
        query = "".join(f"&{k}={v}" for k, v in filters.items())
        _, payload, _ = call(env["base"], "GET", f"/queue?size=1{query}",
                             token="tok-alice")
        return payload["items"][0]["id"]

    def test_accept_round_trip(self, env):
        item_id = self.claim_one(env)
        status, payload, _ = call(env["base"], "POST", "/decisions",
                                  token="tok-alice",
                                  body={"item": item_id, "verdict": "Accept"})
        assert status == 200
        assert payload["item"]["status"] == "Accepted"
        assert env["pool"].get(item_id).status is NodeStatus.ACCEPTED

    def test_revise_with_text(self, env):
        item_id = self.claim_one(env, kind="Clue")
        status, payload, _ = call(env["base"], "POST", "/decisions",
                                  token="tok-alice",
                                  body={"item": item_id, "verdict": "Revise",
                                        "text": "I never studied at all"})
        assert status == 200
        assert payload["item"]["source"] == "HumanRevised"

    def test_unclaimed_is_conflict(self, env):
        pending = env["service"].pending_items()
        status, payload, _ = call(env["base"], "POST", "/decisions",
                                  token="tok-alice",
                                  body={"item": pending[0].id, "verdict": "Accept"})
        assert status == 409
        assert payload["error"]["type"] == "StaleClaim"

    def test_bad_verdict(self, env):
        item_id = self.claim_one(env)
        status, _, _ = call(env["base"], "POST", "/decisions", token="tok-alice",
                            body={"item": item_id, "verdict": "Maybe"})
        assert status == 400

    def test_unknown_item(self, env):
        status, payload, _ = call(env["base"], "POST", "/decisions",
                                  token="tok-alice",
                                  body={"item": "cand-999999", "verdict": "Accept"})
        assert status == 404
        assert payload["error"]["type"] == "UnknownItem"

    def test_garbage_body(self, env):
        request = urllib.request.Request(env["base"] + "/decisions", method="POST",
                                         data=b"{nope", headers={
                                             "Authorization": "Bearer tok-alice"})
        with pytest.raises(urllib.error.HTTPError) as exc_info:
            urllib.request.urlopen(request, timeout=5)
        assert exc_info.value.code == 400


class TestExpertResolve:
    def flagged_id(self, env):
        _, payload, _ = call(env["base"], "GET", "/flagged", token="tok-erin")
        return payload["items"][0]["id"]

    def test_flagged_listing(self, env):
        _, payload, _ = call(env["base"], "GET", "/flagged", token="tok-alice")
        assert len(payload["items"]) == 1
        assert payload["items"][0]["status"] == "Flagged"

    def test_non_expert_forbidden(self, env):
        item_id = self.flagged_id(env)
        status, payload, _ = call(env["base"], "POST", "/expert/resolve",
                                  token="tok-alice",
                                  body={"item": item_id, "verdict": "Reject"})
        assert status == 403
        assert payload["error"]["type"] == "RoleDenied"

    def test_relabel(self, env):
        item_id = self.flagged_id(env)
        status, payload, _ = call(env["base"], "POST", "/expert/resolve",
                                  token="tok-erin",
                                  body={"item": item_id, "verdict": "Revise",
                                        "relabel": "Fearful"})
        assert status == 200
        assert payload["item"]["text"] == "Fearful"
        assert payload["item"]["status"] == "Revised"

    def test_relabel_wrong_polarity(self, env):
        item_id = self.flagged_id(env)
        status, payload, _ = call(env["base"], "POST", "/expert/resolve",
                                  token="tok-erin",
                                  body={"item": item_id, "verdict": "Revise",
                                        "relabel": "Joyful"})
        assert status == 400
        assert payload["error"]["type"] == "LabelPolarityMismatch"

    def test_not_flagged_item(self, env):
        pending = env["service"].pending_items()
        status, payload, _ = call(env["base"], "POST", "/expert/resolve",
                                  token="tok-erin",
                                  body={"item": pending[0].id, "verdict": "Accept"})
        assert status == 400
        assert payload["error"]["type"] == "NotFlagged"


class TestReleaseAndStats:
    def test_release(self, env):
        call(env["base"], "GET", "/queue?size=3", token="tok-alice")
        status, payload, _ = call(env["base"], "POST", "/claims/release",
                                  token="tok-alice", body={})
        assert status == 200
        assert payload["released"] == 3

    def test_stats_shape(self, env):
        status, payload, _ = call(env["base"], "GET", "/stats", token="tok-alice")
        assert status == 200
        assert payload["by_kind"]["Clue"]["pending"] == 2
        assert payload["flagged"] == 1
        assert "retention" in payload


class TestFinalize:
    def decide_all(self, env):
        while True:
            _, payload, _ = call(env["base"], "GET", "/queue?size=5",
                                 token="tok-alice")
            if not payload["items"]:
                break
            for item in payload["items"]:
                call(env["base"], "POST", "/decisions", token="tok-alice",
                     body={"item": item["id"], "verdict": "Accept"})
        flagged_id = call(env["base"], "GET", "/flagged",
                          token="tok-erin")[1]["items"][0]["id"]
        call(env["base"], "POST", "/expert/resolve", token="tok-erin",
             body={"item": flagged_id, "verdict": "Revise", "relabel": "Sad"})

    def test_pending_items_conflict(self, env):
        status, payload, _ = call(env["base"], "POST", "/finalize",
                                  token="tok-alice", body={})
        assert status == 409
        assert payload["error"]["type"] == "PendingItemsRemain"

    def test_finalize_writes_graph(self, env):
        self.decide_all(env)
        status, payload, _ = call(env["base"], "POST", "/finalize",
                                  token="tok-alice", body={})
        assert status == 200
        assert payload["nodes"] == 6
        assert payload["chains"] == 2
        assert payload["written_to"] == str(env["out_dir"])
        assert (env["out_dir"] / "nodes.jsonl").exists()
        assert (env["out_dir"] / "chains.jsonl").exists()

    def test_force_finalize(self, env):
        status, payload, _ = call(env["base"], "POST", "/finalize",
                                  token="tok-alice", body={"force": True})
        assert status == 200
        # only the pre-accepted situation and thought survive
        assert payload["nodes"] == 2
        assert payload["chains"] == 0


class TestRosterFile:
    def write(self, tmp_path, data):
        path = tmp_path / "roster.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        return str(path)

    def test_round_trip(self, tmp_path):
        path = self.write(tmp_path, {"annotators": [
            {"id": "alice", "token": "tok-a"},
            {"id": "erin", "token": "tok-e", "expert": True}]})
        roster, tokens = load_roster(path)
        assert roster == {"alice": False, "erin": True}
        assert tokens == {"tok-a": "alice", "tok-e": "erin"}

    def test_missing_annotators(self, tmp_path):
        with pytest.raises(ConfigError):
            load_roster(self.write(tmp_path, {"people": []}))

    def test_duplicate_token(self, tmp_path):
        with pytest.raises(ConfigError):
            load_roster(self.write(tmp_path, {"annotators": [
                {"id": "a", "token": "same"}, {"id": "b", "token": "same"}]}))

    def test_entry_without_token(self, tmp_path):
        with pytest.raises(ConfigError):
            load_roster(self.write(tmp_path, {"annotators": [{"id": "a"}]}))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "roster.json"
        path.write_text("{nope", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_roster(str(path))
