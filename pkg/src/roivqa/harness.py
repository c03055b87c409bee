"""End-to-end evaluation: requests -> model adapter -> per-item scores -> report.

Adapters:

* ``mock``: answers looked up by qa_id in a JSONL fixture.
* ``subprocess``: a child process speaking JSON lines on stdin/stdout.
  Request ``{"qa_id", "prompt", "image_b64"}``, response ``{"qa_id", "answer"}``.
* ``http``: POST the same request body, expect ``{"answer": ...}`` back.

Failed items score 0 so denominators never shrink. A run where more than
half the items fail is aborted; the partial report is still written.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import queue
import shlex
import socket
import subprocess
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from roivqa.corpus import Dataset, QAPair, load_dataset, resolve_file, sha256_hex
from roivqa.metrics import (
    EvalReport,
    ScoredItem,
    aggregate,
    closed_correct,
    extract_choice,
    localization_correct,
    markdown_table,
    token_recall,
)

log = logging.getLogger(__name__)

ENDPOINT_ENV = "ROIVQA_HTTP_ENDPOINT"


class AdapterError(RuntimeError):
    """A single item could not be answered."""


class AdapterUnavailable(RuntimeError):
    """The adapter cannot be used at all (checked before any item is sent)."""


class RunAborted(RuntimeError):
    def __init__(self, message: str, report: EvalReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class InferenceRequest:
    qa_id: str
    prompt: str
    image: bytes

    def __post_init__(self):
        if not self.prompt:
            raise ValueError(f"{self.qa_id}: empty prompt")

    def to_json(self) -> dict:
        return {"qa_id": self.qa_id, "prompt": self.prompt,
                "image_b64": base64.b64encode(self.image).decode("ascii")}


class ModelAdapter:
    model_id = "adapter"

    def check(self) -> None:
        """Raise AdapterUnavailable if the model cannot be reached."""

    def answer(self, req: InferenceRequest) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class MockAdapter(ModelAdapter):
    def __init__(self, answers: dict[str, str], model_id: str = "mock"):
        self.answers = dict(answers)
        self.model_id = model_id

    def answer(self, req: InferenceRequest) -> str:
        return self.answers.get(req.qa_id, "")


def mock_adapter(fixture: str | Path) -> MockAdapter:
    fixture = Path(fixture)
    answers: dict[str, str] = {}
    for lineno, line in enumerate(fixture.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"{fixture}:{lineno}: invalid JSON ({e.msg})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("qa_id"), str) or not isinstance(obj.get("answer"), str):
            raise ValueError(f"{fixture}:{lineno}: expected {{qa_id: str, answer: str}}")
        if obj["qa_id"] in answers:
            raise ValueError(f"{fixture}:{lineno}: duplicate fixture id {obj['qa_id']!r}")
        answers[obj["qa_id"]] = obj["answer"]
    return MockAdapter(answers, model_id=f"mock:{fixture.name}")


_EOF = object()


class SubprocessAdapter(ModelAdapter):
    """One long-lived child; requests are serialized over its pipes."""

    def __init__(self, command: str | Sequence[str], timeout: float = 30.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self.model_id = "subprocess:" + " ".join(self.command)
        self._proc: subprocess.Popen | None = None
        self._lines: queue.Queue = queue.Queue()
        self._lock = threading.Lock()
        self._dead = False

    def check(self) -> None:
        if self._proc is not None:
            return
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, encoding="utf-8", bufsize=1,
            )
        except OSError as e:
            raise AdapterUnavailable(f"cannot spawn {self.command!r}: {e}") from e
        threading.Thread(target=self._pump, daemon=True).start()

    def _pump(self) -> None:
        assert self._proc is not None and self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(_EOF)

    def answer(self, req: InferenceRequest) -> str:
        self.check()
        with self._lock:
            if self._dead:
                raise AdapterError("model process has exited")
            try:
                self._proc.stdin.write(json.dumps(req.to_json()) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError, ValueError) as e:
                self._dead = True
                raise AdapterError(f"model process has exited ({e})") from None
            deadline = time.monotonic() + self.timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise AdapterError(f"timeout after {self.timeout}s")
                try:
                    line = self._lines.get(timeout=remaining)
                except queue.Empty:
                    raise AdapterError(f"timeout after {self.timeout}s") from None
                if line is _EOF:
                    self._dead = True
                    log.warning("model process exited mid-run; remaining items score 0")
                    raise AdapterError("model process has exited")
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError:
                    log.error("protocol error for %s: malformed line %r", req.qa_id, line[:200])
                    raise AdapterError("protocol error: malformed JSON line") from None
                if not isinstance(obj, dict) or not isinstance(obj.get("answer"), str):
                    log.error("protocol error for %s: %r", req.qa_id, obj)
                    raise AdapterError("protocol error: response lacks a string 'answer'")
                if obj.get("qa_id") != req.qa_id:
                    # a late reply to an item that already timed out
                    log.warning("discarding stale response for %r", obj.get("qa_id"))
                    continue
                return obj["answer"]

    def close(self) -> None:
        if self._proc is None:
            return
        try:
            if self._proc.stdin:
                self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        self._proc = None


class HttpAdapter(ModelAdapter):
    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 3, backoff: float = 0.2):
        parsed = urllib.parse.urlparse(endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.hostname:
            raise ValueError(f"malformed endpoint URL {endpoint!r}")
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.model_id = "http:" + endpoint

    def check(self) -> None:
        parsed = urllib.parse.urlparse(self.endpoint)
        port = parsed.port or (443 if parsed.scheme == "https" else 80)
        try:
            with socket.create_connection((parsed.hostname, port), timeout=self.timeout):
                pass
        except OSError as e:
            raise AdapterUnavailable(f"cannot reach {self.endpoint}: {e}") from e

    def _post(self, body: bytes) -> str:
        req = urllib.request.Request(self.endpoint, data=body, method="POST",
                                     headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = resp.read()
        try:
            obj = json.loads(payload)
        except json.JSONDecodeError:
            raise AdapterError("protocol error: response is not JSON") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("answer"), str):
            raise AdapterError("protocol error: response lacks a string 'answer'")
        return obj["answer"]

    def answer(self, req: InferenceRequest) -> str:
        body = json.dumps(req.to_json()).encode("utf-8")
        last = ""
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                return self._post(body)
            except urllib.error.HTTPError as e:
                if e.code < 500:
                    raise AdapterError(f"HTTP {e.code}") from None
                last = f"HTTP {e.code}"
            except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
                last = str(e)
        raise AdapterError(f"giving up after {self.retries + 1} attempts: {last}")


# --------------------------------------------------------------------------
# Runs


@dataclass(frozen=True)
class RunConfig:
    split: str
    adapter: str = "mock"
    target: str = ""
    max_in_flight: int = 1
    timeout: float = 30.0
    seed: int = 0
    strict: bool = True
    abort_fraction: float = 0.5

    def __post_init__(self):
        if self.adapter not in ("mock", "subprocess", "http"):
            raise ValueError(f"unknown adapter kind {self.adapter!r}")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def to_json(self) -> dict:
        return {"split": self.split, "adapter": self.adapter, "target": self.target,
                "max_in_flight": self.max_in_flight, "timeout": self.timeout,
                "seed": self.seed, "strict": self.strict}


def make_adapter(cfg: RunConfig) -> ModelAdapter:
    if cfg.adapter == "mock":
        return mock_adapter(cfg.target)
    if cfg.adapter == "subprocess":
        return SubprocessAdapter(cfg.target, timeout=cfg.timeout)
    return HttpAdapter(os.environ.get(ENDPOINT_ENV) or cfg.target, timeout=cfg.timeout)


def image_bytes_for(d: Dataset, q: QAPair) -> bytes:
    """Composited PNG when the item has one, else the base image PNG."""
    if q.composite_ref is not None:
        rel = q.meta.get("composite_file")
        path = resolve_file(d, rel) if rel else None
        if path is None or not path.is_file():
            raise FileNotFoundError(f"{q.qa_id}: composite {q.composite_ref!r} has no file")
        return path.read_bytes()
    im = d.image(q.image_id)
    path = resolve_file(d, im.source_path) if im.source_path else None
    if path is not None and path.is_file():
        return path.read_bytes()
    return im.png_bytes()


def build_requests(d: Dataset) -> list[tuple[QAPair, InferenceRequest]]:
    pairs = [(q, InferenceRequest(q.qa_id, q.question, image_bytes_for(d, q))) for q in d.qa]
    return sorted(pairs, key=lambda p: p[0].qa_id)


def score_item(q: QAPair, answer: str) -> Fraction:
    """Raises ValueError for open items whose gold answer has no tokens."""
    if q.qtype == "closed":
        return Fraction(int(closed_correct(answer, q.answer)))
    if q.qtype == "multichoice":
        gold = q.meta.get("correct", q.answer)
        return Fraction(int(extract_choice(answer, q.meta.get("option_colors")) == gold))
    if q.qtype == "open":
        return token_recall(answer, q.answer)
    return Fraction(int(localization_correct(answer, q.answer)))


@dataclass
class _ItemResult:
    qa: QAPair
    request: InferenceRequest
    answer: str = ""
    status: str = "not_run"
    error: str = ""


def run_eval(cfg: RunConfig, out_dir: str | Path | None = None, adapter: ModelAdapter | None = None,
             dataset: Dataset | None = None) -> EvalReport:
    d = dataset if dataset is not None else load_dataset(cfg.split, strict=cfg.strict)
    owns_adapter = adapter is None
    adapter = adapter if adapter is not None else make_adapter(cfg)
    try:
        adapter.check()
        results = [_ItemResult(q, r) for q, r in build_requests(d)]
        _execute(adapter, results, cfg)
    finally:
        if owns_adapter:
            adapter.close()

    scored, log_lines, skipped = [], [], []
    failed = sum(r.status == "failed" for r in results)
    not_run = sum(r.status == "not_run" for r in results)
    for r in results:
        try:
            score = score_item(r.qa, r.answer) if r.status == "ok" else Fraction(0)
        except ValueError as e:
            skipped.append({"qa_id": r.qa.qa_id, "reason": str(e)})
            continue
        scored.append(ScoredItem(r.qa.qa_id, r.qa.qtype, score))
        entry = {"qa_id": r.qa.qa_id, "qtype": r.qa.qtype, "prompt": r.request.prompt,
                 "answer": r.answer, "score": float(score), "status": r.status,
                 "image_sha256": sha256_hex(r.request.image)}
        if r.error:
            entry["error"] = r.error
        log_lines.append(json.dumps(entry, sort_keys=True, ensure_ascii=False))

    aborted = failed > cfg.abort_fraction * len(results)
    meta = {
        "model_id": adapter.model_id,
        "split": str(cfg.split),
        "seed": cfg.seed,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "n_items": len(results),
        "failed": failed,
        "not_run": not_run,
        "skipped": skipped,
        "aborted": aborted,
    }
    report = aggregate(scored, meta)
    if out_dir is not None:
        write_run(report, log_lines, out_dir, d.name)
    if aborted:
        raise RunAborted(f"{failed} of {len(results)} items failed; run aborted", report)
    return report


def _execute(adapter: ModelAdapter, results: list[_ItemResult], cfg: RunConfig) -> None:
    limit = cfg.abort_fraction * len(results)
    stop = threading.Event()
    lock = threading.Lock()
    failures = 0

    def work(r: _ItemResult) -> None:
        nonlocal failures
        if stop.is_set():
            return
        try:
            r.answer = adapter.answer(r.request)
            r.status = "ok"
        except AdapterError as e:
            r.status, r.error = "failed", str(e)
            log.warning("%s failed: %s", r.qa.qa_id, e)
            with lock:
                failures += 1
                if failures > limit:
                    stop.set()

    if cfg.max_in_flight == 1:
        for r in results:
            work(r)
    else:
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            list(pool.map(work, results))


def write_run(report: EvalReport, log_lines: list[str], out_dir: str | Path, name: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "items.jsonl").write_text("".join(line + "\n" for line in log_lines), encoding="utf-8")
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "report.md").write_text(markdown_table({name: report}), encoding="utf-8")
