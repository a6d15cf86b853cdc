"""Dump snapshot history from the API as one JSON frame per snapshot."""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from pathlib import Path

from ..model import compute_stats

PAGE = 1000


class ApiUnreachable(RuntimeError):
    pass


def node_label(doc: dict) -> str:
    if not doc["alive"]:
        return "dead"
    return "infected" if doc["infected"] else "safe"


def build_frame(snapshot: dict, scale_factor: int) -> dict:
    nodes = [{
        "uuid": d["uuid"],
        "position": [d["position"][0] * scale_factor, d["position"][1] * scale_factor],
        "state": node_label(d),
        "infected": d["infected"],
        "alive": d["alive"],
    } for d in snapshot["nodes"]]
    return {
        "sequence": snapshot["sequence"],
        "taken_at": snapshot["taken_at"],
        "stats": compute_stats(snapshot["nodes"]).to_dict(),
        "nodes": nodes,
    }


def _get(url: str, timeout: float) -> dict:
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return json.load(resp)
    except (urllib.error.URLError, OSError) as exc:
        raise ApiUnreachable(f"{url}: {exc}") from exc


def export_frames(api_address: str, out_dir, scale_factor: int = 1, timeout: float = 10.0) -> list[Path]:
    """Write ``frame_NNNNNN.json`` per snapshot plus ``index.json``; returns every path written."""
    base = api_address if api_address.startswith("http") else f"http://{api_address}"
    base = base.rstrip("/")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written, names = [], []
    start = 0
    while True:
        page = _get(f"{base}/snapshots?from={start}&limit={PAGE}", timeout)["snapshots"]
        for snap in page:
            name = f"frame_{snap['sequence']:06d}.json"
            path = out / name
            path.write_text(json.dumps(build_frame(snap, scale_factor), separators=(",", ":")), encoding="utf-8")
            written.append(path)
            names.append(name)
        if len(page) < PAGE:
            break
        start += len(page)
    index = out / "index.json"
    index.write_text(json.dumps({
        "frames": names,
        "count": len(names),
        "scale_factor": scale_factor,
        "colors": {"safe": "blue", "infected": "red", "dead": "gray"},
    }, indent=2), encoding="utf-8")
    written.append(index)
    return written
