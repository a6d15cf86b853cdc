"""HTTP query service over the document store.

    GET /data                      latest node documents plus statistics
    GET /snapshots?from=N&limit=M  snapshot history with per-snapshot stats
    GET /health                    liveness of this process only

Failures never say which component is down; a 5xx body is always one of two
fixed generic objects.
"""

from __future__ import annotations

import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .model import compute_stats

log = logging.getLogger(__name__)

DEFAULT_PORT = 8080
MAX_SNAPSHOT_LIMIT = 1000

UNAVAILABLE = {"error": "unavailable"}
INTERNAL = {"error": "internal"}


class BadRequest(ValueError):
    pass


def data_view(store) -> dict:
    nodes = sorted(store.get_all(), key=lambda d: d["uuid"])
    return {"nodes": nodes, "stats": compute_stats(nodes).to_dict()}


def snapshots_view(store, query: str) -> dict:
    params = parse_qs(query, keep_blank_values=True)
    start = _int_param(params, "from", 0)
    limit = _int_param(params, "limit", 100)
    if start < 0:
        raise BadRequest("from must be >= 0")
    if not 1 <= limit <= MAX_SNAPSHOT_LIMIT:
        raise BadRequest(f"limit must be in [1, {MAX_SNAPSHOT_LIMIT}]")
    out = []
    for snap in store.get_snapshots(start, limit):
        out.append({
            "sequence": snap.sequence,
            "taken_at": snap.taken_at,
            "stats": compute_stats(snap.documents).to_dict(),
            "nodes": snap.documents,
        })
    return {"snapshots": out}


def _int_param(params: dict, name: str, default: int) -> int:
    values = params.get(name)
    if not values:
        return default
    try:
        return int(values[-1])
    except ValueError:
        raise BadRequest(f"{name} must be an integer") from None


class ApiServer:
    """Serves the endpoints above for ``store`` (anything with get_all / get_snapshots)."""

    def __init__(self, store, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.store = store
        api = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self):
                url = urlsplit(self.path)
                try:
                    if url.path == "/health":
                        status, body = 200, {"status": "ok"}
                    elif url.path == "/data":
                        status, body = 200, data_view(api.store)
                    elif url.path == "/snapshots":
                        status, body = 200, snapshots_view(api.store, url.query)
                    else:
                        status, body = 404, {"error": "not found"}
                except BadRequest as exc:
                    status, body = 400, {"error": str(exc)}
                except ConnectionError:
                    status, body = 503, UNAVAILABLE
                except Exception:
                    log.exception("request %s failed", self.path)
                    status, body = 500, INTERNAL
                data = json.dumps(body, separators=(",", ":")).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, fmt, *args):
                log.debug("%s - %s", self.address_string(), fmt % args)

        class Server(ThreadingHTTPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        name="api-server", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever(poll_interval=0.1)

    def kill(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)

    stop = kill
