"""Black-box transfer: attack locally, score against an external endpoint.

The attack loop only ever consults the local source model; the external
scoring API is hit exactly twice per sentence (before and after). A
bundled mock server speaks the same minimal JSON protocol (POST /score
{"text": ...} -> {"toxicity": p}) around any checkpointed model, so the
whole harness runs offline.
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests

from . import corpus as corpus_mod
from . import distill, hotflip

TOXIC_ABOVE = 0.7
NON_TOXIC_BELOW = 0.3


def label(score):
    """Three-way label with strict inequalities; boundaries are uncertain."""
    if score > TOXIC_ABOVE:
        return "toxic"
    if score < NON_TOXIC_BELOW:
        return "non-toxic"
    return "uncertain"


class ApiError(RuntimeError):
    """Endpoint kept failing after all retries."""


class ApiClient:
    """Rate-limited, retrying client for the toxicity-scoring protocol."""

    def __init__(self, endpoint, timeout=10.0, retries=3, backoff=0.25,
                 rate_limit_rps=10.0, token=None):
        self.url = endpoint.rstrip("/") + "/score"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.min_interval = 1.0 / rate_limit_rps if rate_limit_rps else 0.0
        self.token = token
        self.calls = 0
        self.http_attempts = 0
        self._session = requests.Session()
        self._lock = threading.Lock()
        self._last_request = 0.0

    def _wait_slot(self):
        with self._lock:
            now = time.monotonic()
            wait = self._last_request + self.min_interval - now
            if wait > 0:
                time.sleep(wait)
                now = time.monotonic()
            self._last_request = now

    def score(self, text):
        """Toxicity of ``text`` per the endpoint; raises ApiError when it
        stays unreachable."""
        with self._lock:
            self.calls += 1
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error = None
        for attempt in range(self.retries):
            self._wait_slot()
            with self._lock:
                self.http_attempts += 1
            try:
                resp = self._session.post(
                    self.url, json={"text": text}, headers=headers, timeout=self.timeout
                )
                if resp.status_code == 200:
                    value = float(resp.json()["toxicity"])
                    if not 0.0 <= value <= 1.0:
                        raise ValueError(f"toxicity {value} outside [0, 1]")
                    return value
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
            except (requests.RequestException, ValueError, KeyError) as e:
                last_error = repr(e)
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * (2**attempt))
        raise ApiError(f"{self.url}: {last_error}")


# ---------------------------------------------------------------------------
# Mock server
# ---------------------------------------------------------------------------


class MockServer:
    """Tiny HTTP server exposing a model (or scoring function) at /score."""

    def __init__(self, model_or_fn, host="127.0.0.1", port=0):
        if callable(model_or_fn):
            score_fn = model_or_fn
        else:
            model = model_or_fn

            def score_fn(text):
                s = corpus_mod.sentence_from_text(model.vocab, "api", text, 0)
                return model.score(s)

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def _reply(self, code, payload):
                body = json.dumps(payload).encode("utf-8")
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path != "/score":
                    self._reply(404, {"error": "unknown path"})
                    return
                try:
                    length = int(self.headers.get("Content-Length", 0))
                    payload = json.loads(self.rfile.read(length).decode("utf-8"))
                except (ValueError, UnicodeDecodeError):
                    self._reply(400, {"error": "body is not valid JSON"})
                    return
                text = payload.get("text") if isinstance(payload, dict) else None
                if not isinstance(text, str) or not text:
                    self._reply(400, {"error": 'missing or empty "text" field'})
                    return
                try:
                    self._reply(200, {"toxicity": float(score_fn(text))})
                except Exception as e:  # scoring failure -> server error
                    self._reply(500, {"error": repr(e)})

        self._httpd = ThreadingHTTPServer((host, port), Handler)
        self.host, self.port = self._httpd.server_address[:2]
        self._thread = None

    @property
    def url(self):
        return f"http://{self.host}:{self.port}"

    def start(self):
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._httpd.serve_forever()

    def stop(self):
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, exc_type, exc, tb):
        self.stop()


# ---------------------------------------------------------------------------
# Transfer attack
# ---------------------------------------------------------------------------


@dataclass
class SentenceTransfer:
    id: str
    before: float
    after: float
    flips: int
    text_before: str
    text_after: str

    @property
    def label_before(self):
        return label(self.before)

    @property
    def label_after(self):
        return label(self.after)

    @property
    def label_flipped(self):
        return self.label_before == "toxic" and self.label_after != "toxic"

    def to_dict(self):
        return {
            "id": self.id,
            "before": self.before,
            "after": self.after,
            "flips": self.flips,
            "label_before": self.label_before,
            "label_after": self.label_after,
            "text_after": self.text_after,
        }


@dataclass
class TransferResult:
    results: list = field(default_factory=list)
    excluded: list = field(default_factory=list)

    def summary(self):
        n = len(self.results)
        if n == 0:
            return {
                "sentences": 0,
                "excluded": len(self.excluded),
                "mean_before": None,
                "mean_after": None,
                "mean_flips": None,
                "label_flip_rate": None,
            }
        toxic_before = [r for r in self.results if r.label_before == "toxic"]
        flip_rate = (
            sum(r.label_flipped for r in toxic_before) / len(toxic_before)
            if toxic_before
            else None
        )
        return {
            "sentences": n,
            "excluded": len(self.excluded),
            "mean_before": sum(r.before for r in self.results) / n,
            "mean_after": sum(r.after for r in self.results) / n,
            "mean_flips": sum(r.flips for r in self.results) / n,
            "label_flip_rate": flip_rate,
        }


def transfer_attack(attacker, source, client, sentences, stop=None, max_flips=None,
                    exclude_oov=True, concurrency=1, attack_fn=None):
    """Attack with the local models, score before/after via the endpoint.

    Exactly two API calls per evaluated sentence. Sentences whose API
    calls keep failing are excluded from aggregates and listed in the
    result. ``attack_fn(sentence) -> trace`` overrides the default
    distilled attack (used for the equal-budget Random comparison).
    """
    stop = stop or hotflip.prob_below(0.5)
    if attack_fn is None:
        def attack_fn(s):
            return distill.distflip_attack(
                attacker, source, s, stop=stop, max_flips=max_flips, exclude_oov=exclude_oov
            )

    def job(s):
        try:
            before = client.score(s.text)
        except ApiError as e:
            return ("excluded", s.id, f"before: {e}")
        trace = attack_fn(s)
        final = trace.sentences[-1]
        try:
            after = client.score(final.text)
        except ApiError as e:
            return ("excluded", s.id, f"after: {e}")
        return (
            "ok",
            s.id,
            SentenceTransfer(s.id, before, after, trace.n_flips, s.text, final.text),
        )

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(job, sentences))
    else:
        outcomes = [job(s) for s in sentences]

    result = TransferResult()
    for kind, sid, payload in outcomes:
        if kind == "ok":
            result.results.append(payload)
        else:
            result.excluded.append({"id": sid, "reason": payload})
    return result


def write_transfer(path, result, config_dict=None):
    """JSON-lines: per-sentence records then a trailing summary record."""
    with open(path, "w", encoding="utf-8") as f:
        if config_dict is not None:
            f.write(json.dumps({"config": config_dict}, sort_keys=True) + "\n")
        for r in result.results:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        for e in result.excluded:
            f.write(json.dumps({"excluded": e}, sort_keys=True) + "\n")
        f.write(json.dumps({"summary": result.summary()}, sort_keys=True) + "\n")
