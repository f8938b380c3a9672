"""Two-alternative forced-choice study backend.

Generates blinded pair manifests from a degradation corpus, serves pairs
and images over a small HTTP/JSON API (image URLs are opaque tokens that
never reveal provenance), captures one choice per (pair, reader) in an
append-only crash-safe log, and computes the agreement statistics between
reader preferences and no-reference scores.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import threading
import time
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .errors import ParameterError, SchemaError, UsqmError
from .stats import binomial_test_two_sided, wilson_ci
from .store import read_degradation_manifest, read_jsonl, write_json

PAIRS_VERSION = "usqm-pairs/1"
DEFAULT_PSNR_TOLERANCE_DB = 0.1


def _ref(row: dict) -> dict:
    return {
        "path": row["output_path"],
        "source": row["source"],
        "kind": row["kind"],
        "theta": row["theta"],
        "psnr": row["achieved_psnr"],
    }


def pairgen(
    degradation_manifest: list[dict] | str,
    n_pairs: int,
    sanity_fraction: float,
    seed: int,
    psnr_tolerance_db: float = DEFAULT_PSNR_TOLERANCE_DB,
    duplicates: int = 1,
) -> dict:
    """Build a blinded pair manifest from a degradation corpus.

    Cross pairs share a source image and achieved PSNR (within tolerance)
    but differ in distortion kind. Sanity pairs share source and kind but
    differ in PSNR (their objectively correct answer is the higher-PSNR
    side). Duplicate pairs repeat a chosen cross pair with byte-identical
    image references so reader self-consistency can be measured. Pair
    order and left/right assignment are seeded and independent of
    degradation identity.
    """
    if isinstance(degradation_manifest, str):
        rows = read_degradation_manifest(degradation_manifest)
    else:
        rows = degradation_manifest
    if n_pairs < 1:
        raise ParameterError(f"need n_pairs >= 1, got {n_pairs}")
    if not 0 <= sanity_fraction <= 1:
        raise ParameterError(f"sanity fraction must be in [0,1], got {sanity_fraction}")
    rng = np.random.default_rng([int(seed), 0x2AFC])

    by_source: dict[str, list[dict]] = {}
    for row in rows:
        by_source.setdefault(str(row["source"]), []).append(row)

    cross_candidates = []
    sanity_candidates = []
    per_kind_counts: dict[str, int] = {}
    for source in sorted(by_source):
        group = sorted(by_source[source], key=lambda r: (r["kind"], r["theta"], r["output_path"]))
        for row in group:
            per_kind_counts[row["kind"]] = per_kind_counts.get(row["kind"], 0) + 1
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                a, b = group[i], group[j]
                if a["kind"] != b["kind"]:
                    if abs(a["achieved_psnr"] - b["achieved_psnr"]) <= psnr_tolerance_db:
                        cross_candidates.append((a, b))
                else:
                    if abs(a["achieved_psnr"] - b["achieved_psnr"]) > psnr_tolerance_db:
                        sanity_candidates.append((a, b))

    if len(cross_candidates) < n_pairs:
        counts = ", ".join(f"{k}: {v}" for k, v in sorted(per_kind_counts.items()))
        raise UsqmError(
            f"only {len(cross_candidates)} PSNR-matched cross-kind candidates for "
            f"{n_pairs} requested pairs (rows per kind: {counts})"
        )
    n_sanity = int(round(sanity_fraction * n_pairs))
    if len(sanity_candidates) < n_sanity:
        raise UsqmError(
            f"only {len(sanity_candidates)} sanity candidates for {n_sanity} requested"
        )

    chosen_cross = [cross_candidates[i] for i in rng.permutation(len(cross_candidates))[:n_pairs]]
    chosen_sanity = [
        sanity_candidates[i] for i in rng.permutation(len(sanity_candidates))[:n_sanity]
    ]

    pairs = []
    type_pair_counts: dict[str, int] = {}

    def add_pair(a: dict, b: dict, klass: str, dup_of: str | None = None) -> dict:
        flip = bool(rng.integers(2))  # left/right never depends on degradation identity
        left, right = (b, a) if flip else (a, b)
        rec = {
            "pair_id": f"p{len(pairs):04d}",
            "class": klass,
            "left": _ref(left),
            "right": _ref(right),
        }
        if klass == "sanity":
            rec["correct"] = "A" if left["achieved_psnr"] > right["achieved_psnr"] else "B"
        if dup_of is not None:
            rec["dup_of"] = dup_of
        pairs.append(rec)
        return rec

    for a, b in chosen_cross:
        rec = add_pair(a, b, "cross")
        key = "|".join(sorted((a["kind"], b["kind"])))
        type_pair_counts[key] = type_pair_counts.get(key, 0) + 1
    for a, b in chosen_sanity:
        add_pair(a, b, "sanity")
    cross_recs = [p for p in pairs if p["class"] == "cross"]
    for _ in range(max(0, duplicates)):
        origin = cross_recs[int(rng.integers(len(cross_recs)))]
        src_rows = {r["output_path"]: r for r in (by_source[origin["left"]["source"]])}
        a = src_rows[origin["left"]["path"]]
        b = src_rows[origin["right"]["path"]]
        add_pair(a, b, "duplicate", dup_of=origin["pair_id"])

    order = rng.permutation(len(pairs))
    pairs = [pairs[i] for i in order]
    return {
        "version": PAIRS_VERSION,
        "seed": int(seed),
        "psnr_tolerance_db": psnr_tolerance_db,
        "counts_per_type_pair": dict(sorted(type_pair_counts.items())),
        "pairs": pairs,
    }


def load_pairs(path: str) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != PAIRS_VERSION:
        raise SchemaError(f"{path}: unsupported pair manifest version {manifest.get('version')!r}")
    return manifest


_FALLBACK_PAGE = b"""<!doctype html>
<html><head><meta charset="utf-8"><title>2AFC study</title></head>
<body><p>Study backend is running. Build the frontend and pass --assets to
serve the full reader interface; the JSON API lives under /api/.</p></body></html>
"""


class StudyState:
    """Shared server state: pair sequence, token map, append-only response log."""

    def __init__(self, manifest: dict, responses_path: str, images_root: str):
        self.manifest = manifest
        self.pairs = manifest["pairs"]
        self.by_id = {p["pair_id"]: p for p in self.pairs}
        self.images_root = images_root
        self.responses_path = responses_path
        self.lock = threading.Lock()
        self.answered: set[tuple[str, str]] = set()
        self.tokens: dict[str, str] = {}
        self.token_of: dict[tuple[str, str], str] = {}
        salt = str(manifest.get("seed", 0))
        for pair in self.pairs:
            for side in ("left", "right"):
                material = f"{salt}:{pair['pair_id']}:{side}:{pair[side]['path']}"
                token = hashlib.sha256(material.encode()).hexdigest()[:20]
                self.tokens[token] = pair[side]["path"]
                self.token_of[(pair["pair_id"], side)] = token
        if os.path.exists(responses_path):
            for row in read_jsonl(responses_path):
                self.answered.add((str(row["pair_id"]), str(row["reader"])))
        self._log = open(responses_path, "a", encoding="utf-8")

    def close(self):
        self._log.close()

    def next_pair(self, reader: str) -> dict:
        answered = sum(1 for pid, r in self.answered if r == reader)
        for pair in self.pairs:
            if (pair["pair_id"], reader) not in self.answered:
                return {
                    "pair_id": pair["pair_id"],
                    "left": f"/img/{self.token_of[(pair['pair_id'], 'left')]}",
                    "right": f"/img/{self.token_of[(pair['pair_id'], 'right')]}",
                    "answered": answered,
                    "total": len(self.pairs),
                }
        return {"done": True, "answered": answered, "total": len(self.pairs)}

    def record_choice(self, pair_id: str, reader: str, choice: str, elapsed_ms=None) -> int:
        if pair_id not in self.by_id:
            return HTTPStatus.BAD_REQUEST
        if choice not in ("A", "B"):
            return HTTPStatus.BAD_REQUEST
        if not reader:
            return HTTPStatus.BAD_REQUEST
        with self.lock:
            key = (pair_id, reader)
            if key in self.answered:
                return HTTPStatus.CONFLICT
            row = {
                "pair_id": pair_id,
                "reader": reader,
                "choice": choice,
                "unix_ms": int(time.time() * 1000),
            }
            if elapsed_ms is not None:
                row["elapsed_ms"] = int(elapsed_ms)
            self._log.write(json.dumps(row, sort_keys=True) + "\n")
            self._log.flush()
            os.fsync(self._log.fileno())
            self.answered.add(key)
        return HTTPStatus.OK

    def image_path(self, token: str) -> str | None:
        rel = self.tokens.get(token)
        if rel is None:
            return None
        if os.path.isabs(rel):
            return rel
        return os.path.join(self.images_root, rel)


class _StudyHandler(BaseHTTPRequestHandler):
    state: StudyState
    assets_dir: str | None = None

    def log_message(self, fmt, *args):  # quiet by default; diagnostics on stderr only
        pass

    def _send_json(self, status: int, obj: dict):
        payload = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.send_header("Cache-Control", "no-store")
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        parsed = urlparse(self.path)
        if parsed.path == "/api/next":
            reader = parse_qs(parsed.query).get("reader", [""])[0]
            if not reader:
                self._send_json(HTTPStatus.BAD_REQUEST, {"error": "missing reader id"})
                return
            self._send_json(HTTPStatus.OK, self.state.next_pair(reader))
            return
        if parsed.path.startswith("/img/"):
            token = parsed.path[len("/img/") :]
            path = self.state.image_path(token)
            if path is None or not os.path.exists(path):
                self._send_json(HTTPStatus.NOT_FOUND, {"error": "unknown image token"})
                return
            with open(path, "rb") as fh:
                payload = fh.read()
            self.send_response(HTTPStatus.OK)
            self.send_header("Content-Type", "image/png")
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
            return
        self._serve_static(parsed.path)

    def _serve_static(self, path: str):
        if self.assets_dir is None:
            if path in ("/", "/index.html"):
                self.send_response(HTTPStatus.OK)
                self.send_header("Content-Type", "text/html")
                self.send_header("Content-Length", str(len(_FALLBACK_PAGE)))
                self.end_headers()
                self.wfile.write(_FALLBACK_PAGE)
                return
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        rel = path.lstrip("/") or "index.html"
        full = os.path.realpath(os.path.join(self.assets_dir, rel))
        root = os.path.realpath(self.assets_dir)
        if not full.startswith(root + os.sep) and full != root:
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        if os.path.isdir(full):
            full = os.path.join(full, "index.html")
        if not os.path.exists(full):
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        ctype = {
            ".html": "text/html",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
            ".png": "image/png",
        }.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            payload = fh.read()
        self.send_response(HTTPStatus.OK)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_POST(self):
        parsed = urlparse(self.path)
        if parsed.path != "/api/choice":
            self._send_json(HTTPStatus.NOT_FOUND, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode() or "{}")
        except (ValueError, json.JSONDecodeError):
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "malformed body"})
            return
        status = self.state.record_choice(
            str(body.get("pair_id", "")),
            str(body.get("reader", "")),
            body.get("choice", ""),
            body.get("elapsed_ms"),
        )
        if status == HTTPStatus.OK:
            self._send_json(HTTPStatus.OK, {"ok": True})
        elif status == HTTPStatus.CONFLICT:
            self._send_json(HTTPStatus.CONFLICT, {"error": "pair already answered"})
        else:
            self._send_json(HTTPStatus.BAD_REQUEST, {"error": "invalid choice payload"})


def create_server(
    pairs_path: str,
    responses_path: str,
    port: int = 0,
    assets_dir: str | None = None,
    images_root: str | None = None,
) -> tuple[ThreadingHTTPServer, StudyState]:
    """Build the HTTP server (port 0 picks a free port); caller runs serve_forever."""
    manifest = load_pairs(pairs_path)
    root = images_root if images_root is not None else os.path.dirname(os.path.abspath(pairs_path))
    state = StudyState(manifest, responses_path, root)
    handler = type("BoundStudyHandler", (_StudyHandler,), {"state": state, "assets_dir": assets_dir})
    server = ThreadingHTTPServer(("127.0.0.1", port), handler)
    return server, state


def _choice_to_path(pair: dict, choice: str) -> str:
    return pair["left"]["path"] if choice == "A" else pair["right"]["path"]


def load_nrq_scores(path: str) -> dict[str, float]:
    scores = {}
    for row in read_jsonl(path):
        if "path" not in row or "final" not in row:
            raise SchemaError(f"{path}: nrq score rows need 'path' and 'final'")
        scores[str(row["path"])] = float(row["final"])
    return scores


def analyze_agreement(responses_path: str, pairs_path: str, nrq_scores_path: str) -> dict:
    """Agreement between reader choices and no-reference scores.

    Cross-degradation headline: accuracy of "higher score wins" against
    reader choices, Wilson CI, and the exact two-sided binomial p versus
    chance. Score ties are excluded from the denominator and counted.
    Sanity pairs (objective correct answer) and duplicate consistency are
    reported separately and never enter the headline number.
    """
    manifest = load_pairs(pairs_path)
    pairs = {p["pair_id"]: p for p in manifest["pairs"]}
    scores = load_nrq_scores(nrq_scores_path)
    responses = read_jsonl(responses_path)

    agree = total = ties = 0
    sanity_ok = sanity_n = 0
    dup_choices: dict[str, dict[str, str]] = {}
    for i, resp in enumerate(responses):
        pid = str(resp.get("pair_id"))
        pair = pairs.get(pid)
        if pair is None:
            raise SchemaError(f"{responses_path}: response {i} references unknown pair {pid!r}")
        choice = resp.get("choice")
        if choice not in ("A", "B"):
            raise SchemaError(f"{responses_path}: response {i} has invalid choice {choice!r}")
        if pair["class"] == "sanity":
            sanity_n += 1
            sanity_ok += int(choice == pair["correct"])
            continue
        chosen_path = _choice_to_path(pair, choice)
        if pair["class"] == "duplicate":
            key = pair["dup_of"]
            dup_choices.setdefault(key, {})[f"dup:{pid}:{resp.get('reader')}"] = chosen_path
            continue
        dup_choices.setdefault(pid, {})[f"orig:{resp.get('reader')}"] = chosen_path
        left = pair["left"]["path"]
        right = pair["right"]["path"]
        for p in (left, right):
            if p not in scores:
                raise SchemaError(f"{nrq_scores_path}: no score for image {p!r}")
        if math.isclose(scores[left], scores[right], rel_tol=0.0, abs_tol=0.0):
            ties += 1
            continue
        predicted = "A" if scores[left] > scores[right] else "B"
        total += 1
        agree += int(choice == predicted)

    dup_groups = 0
    dup_consistent = 0
    for pid, picks in dup_choices.items():
        origs = {k: v for k, v in picks.items() if k.startswith("orig:")}
        dups = {k: v for k, v in picks.items() if k.startswith("dup:")}
        if not origs or not dups:
            continue
        dup_groups += 1
        chosen = set(origs.values()) | set(dups.values())
        dup_consistent += int(len(chosen) == 1)

    accuracy = agree / total if total else None
    ci = wilson_ci(agree, total) if total else None
    pvalue = binomial_test_two_sided(agree, total, 0.5) if total else None
    return {
        "accuracy": accuracy,
        "agree": agree,
        "n": total,
        "ties_excluded": ties,
        "wilson_ci": list(ci) if ci else None,
        "binomial_p": pvalue,
        "per_class": [
            {
                "class": "cross",
                "n": total,
                "accuracy": accuracy,
                "ties_excluded": ties,
            },
            {
                "class": "sanity",
                "n": sanity_n,
                "accuracy": (sanity_ok / sanity_n) if sanity_n else None,
            },
            {
                "class": "duplicate",
                "groups": dup_groups,
                "consistency": (dup_consistent / dup_groups) if dup_groups else None,
            },
        ],
    }


def write_pairs(manifest: dict, path: str) -> None:
    write_json(path, manifest)
