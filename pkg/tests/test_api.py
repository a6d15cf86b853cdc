import json
import urllib.error
import urllib.request

import pytest

from contactsim.api import UNAVAILABLE, ApiServer
from contactsim.harness.runner import Killable
from contactsim.model import ContactRecord, Position, ReportMessage
from contactsim.store import DocumentStore, document_from_report

TS = "2020-12-02 16:19:00.000000"
IDS = [f"00000000-0000-4000-8000-{i:012d}" for i in range(3)]


def get(url):
    try:
        with urllib.request.urlopen(url, timeout=5) as resp:
            return resp.status, json.load(resp)
    except urllib.error.HTTPError as exc:
        return exc.code, json.load(exc)


@pytest.fixture
def setup(tmp_path):
    store = Killable("store", lambda: DocumentStore(tmp_path))
    for i, uuid in enumerate(reversed(IDS)):
        r = ReportMessage(uuid, Position(i, i), i == 0, TS, i != 1, (ContactRecord(IDS[0], TS),))
        store.upsert(document_from_report(r, TS))
    for k in range(5):
        store.append_snapshot(TS, store.get_all(), k + 1)
    api = ApiServer(store, port=0).start()
    yield store, api
    api.kill()
    if store.up:
        store.kill()


def test_health(setup):
    _, api = setup
    assert get(f"{api.url}/health") == (200, {"status": "ok"})


def test_data_sorted_with_stats(setup):
    _, api = setup
    status, body = get(f"{api.url}/data")
    assert status == 200
    assert [n["uuid"] for n in body["nodes"]] == IDS
    assert body["stats"] == {"total_nodes": 3, "zombies": 1, "deaths": 1, "dead_zombies": 0}


def test_snapshots_paging(setup):
    _, api = setup
    status, body = get(f"{api.url}/snapshots?from=1&limit=2")
    assert status == 200
    assert [s["sequence"] for s in body["snapshots"]] == [1, 2]
    assert set(body["snapshots"][0]) == {"sequence", "taken_at", "stats", "nodes"}


@pytest.mark.parametrize("query", ["from=-1", "limit=0", "limit=1001", "from=abc"])
def test_snapshots_bad_query(setup, query):
    _, api = setup
    status, body = get(f"{api.url}/snapshots?{query}")
    assert status == 400 and "error" in body


def test_unknown_path(setup):
    _, api = setup
    assert get(f"{api.url}/nope")[0] == 404


def test_store_down_is_opaque_503(setup):
    store, api = setup
    store.kill()
    status, body = get(f"{api.url}/data")
    assert (status, body) == (503, UNAVAILABLE)
    assert get(f"{api.url}/snapshots")[0] == 503
    assert get(f"{api.url}/health")[0] == 200
    store.restore()
    assert get(f"{api.url}/data")[0] == 200
