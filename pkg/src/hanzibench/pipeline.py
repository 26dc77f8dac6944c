"""Generation chain: core-character extraction, image generation, image-to-3D.

Request bodies are built byte-exactly (golden-tested); execution goes through
pluggable backends. The mock backends are pure functions of (input, tick
schedule) so the whole chain is deterministic in tests, while the real
backends speak HTTP with bearer auth and bounded retries.

Completion is modeled as poll-with-exactly-once-handoff: however often a
finished job is polled, its result enters the session queue once.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import requests

from .catalog import PartCatalog
from .engine import PipelineRequest, PipelineResult, fnv1a64

EXTRACT_SUFFIX = (
    ", extract the main object described in this sentence, "
    "ignore color and other modifiers, and require the result to be one character"
)
IMAGE_SUFFIX = ", simple background, no complex environment, solid color background, clear subject"
CHAT_MODEL = "glm-4-flash"
IMAGE_MODEL = "cogView-4-250304"
IMAGE_SIZE = "512x512"
MAX_UTTERANCE = 512

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
GLB_MAGIC = b"glTF"


class PipelineError(Exception):
    pass


class EmptyText(PipelineError):
    pass


class NotOneCharacter(PipelineError):
    pass


class NoLexiconMatch(PipelineError):
    pass


class BackendError(PipelineError):
    pass


class FetchError(PipelineError):
    pass


class UnknownJob(PipelineError):
    pass


@dataclass(frozen=True)
class PromptSpec:
    kind: str  # "chat" | "image"
    model_name: str
    body: bytes  # exact request payload


@dataclass(frozen=True)
class AssetRef:
    uri: str
    media: str  # "png" | "glb"
    digest: str  # 16 hex chars, fnv1a64 of content


def build_extract_prompt(text: str) -> PromptSpec:
    if not text:
        raise EmptyText("utterance is empty")
    if len(text) > MAX_UTTERANCE:
        raise EmptyText(f"utterance exceeds {MAX_UTTERANCE} characters")
    body = json.dumps(
        {"model": CHAT_MODEL,
         "messages": [{"role": "user", "content": text + EXTRACT_SUFFIX}]},
        ensure_ascii=False, separators=(",", ":"),
    ).encode("utf-8")
    return PromptSpec(kind="chat", model_name=CHAT_MODEL, body=body)


def build_image_prompt(core: str) -> PromptSpec:
    if not core:
        raise EmptyText("image prompt subject is empty")
    body = json.dumps(
        {"model": IMAGE_MODEL, "prompt": core + IMAGE_SUFFIX, "size": IMAGE_SIZE},
        ensure_ascii=False, separators=(",", ":"),
    ).encode("utf-8")
    return PromptSpec(kind="image", model_name=IMAGE_MODEL, body=body)


# --- asset store -------------------------------------------------------------

class AssetStore:
    """Content-addressed local store: assets/<digest-hex>.<ext>."""

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    def put(self, content: bytes, media: str) -> AssetRef:
        digest = f"{fnv1a64(content):016x}"
        path = os.path.join(self.root, f"{digest}.{media}")
        if not os.path.exists(path):
            with open(path, "wb") as f:
                f.write(content)
        return AssetRef(uri=path, media=media, digest=digest)

    def fetch(self, uri: str, media: str) -> AssetRef:
        """Fetch a URI into the store; idempotent per content."""
        content = self._get(uri)
        return self.put(content, media)

    def _get(self, uri: str) -> bytes:
        if uri.startswith("mock://"):
            # deterministic synthetic content, stable per URI
            magic = GLB_MAGIC if "/model/" in uri else PNG_MAGIC
            return magic + uri.encode("utf-8")
        if uri.startswith(("http://", "https://")):
            try:
                resp = requests.get(uri, timeout=30)
                resp.raise_for_status()
                return resp.content
            except requests.RequestException as e:
                raise FetchError(f"fetch failed for {uri}: {e}") from None
        if os.path.isfile(uri):
            with open(uri, "rb") as f:
                return f.read()
        raise FetchError(f"malformed or unreachable uri: {uri}")


def fetch_asset(store: AssetStore, uri: str, media: str = "glb") -> AssetRef:
    return store.fetch(uri, media)


# --- backends ----------------------------------------------------------------

class MockChatBackend:
    """Resolves the core character from the catalog lexicon:
    longest keyword contained in the lowercased prompt wins."""

    def __init__(self, catalog: PartCatalog, fail_times: int = 0):
        self.lexicon = catalog.lexicon
        self.fail_times = fail_times

    def chat(self, spec: PromptSpec) -> str:
        if self.fail_times > 0:
            self.fail_times -= 1
            raise BackendError("mock chat backend: injected failure")
        content = json.loads(spec.body.decode("utf-8"))["messages"][0]["content"].lower()
        best = None
        for keyword, char in self.lexicon.items():
            if keyword in content and (best is None or len(keyword) > len(best[0])):
                best = (keyword, char)
        if best is None:
            raise NoLexiconMatch(f"no lexicon keyword in {content!r}")
        return best[1]


class MockImageBackend:
    def __init__(self, fail_times: int = 0):
        self.fail_times = fail_times

    def generate(self, spec: PromptSpec) -> bytes:
        if self.fail_times > 0:
            self.fail_times -= 1
            raise BackendError("mock image backend: injected failure")
        return PNG_MAGIC + spec.body


class MockModel3DBackend:
    """Completes after a configurable number of poll ticks with a URL
    derived from the source image digest."""

    def __init__(self, ticks_to_complete: int = 1, fail_times: int = 0):
        self.ticks_to_complete = ticks_to_complete
        self.fail_times = fail_times

    def submit(self, image_digest: str) -> dict:
        if self.fail_times > 0:
            self.fail_times -= 1
            raise BackendError("mock model backend: injected failure")
        return {"remaining": self.ticks_to_complete, "image_digest": image_digest}

    def advance(self, handle: dict) -> Optional[str]:
        if handle["remaining"] > 0:
            handle["remaining"] -= 1
        if handle["remaining"] > 0:
            return None
        return "mock://model/" + handle["image_digest"]


class RealChatBackend:
    def __init__(self, base_url: str, api_key: str, timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def chat(self, spec: PromptSpec) -> str:
        resp = _post(self.base_url, spec.body, self.api_key, self.timeout)
        try:
            return resp["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"unexpected chat response shape: {e}") from None


class RealImageBackend:
    def __init__(self, base_url: str, api_key: str, timeout: float = 120.0):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def generate(self, spec: PromptSpec) -> bytes:
        resp = _post(self.base_url, spec.body, self.api_key, self.timeout)
        try:
            url = resp["data"][0]["url"]
        except (KeyError, IndexError, TypeError) as e:
            raise BackendError(f"unexpected image response shape: {e}") from None
        try:
            r = requests.get(url, timeout=self.timeout)
            r.raise_for_status()
            return r.content
        except requests.RequestException as e:
            raise BackendError(f"image download failed: {e}") from None


class RealModel3DBackend:
    """Submit/status pair over HTTP; status polling maps to runner ticks."""

    def __init__(self, submit_url: str, status_url: str, api_key: str, timeout: float = 60.0):
        self.submit_url = submit_url
        self.status_url = status_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout

    def submit(self, image_digest: str, image_uri: str = "") -> dict:
        body = json.dumps(
            {"type": "image_to_model", "file": {"url": image_uri}},
            separators=(",", ":"),
        ).encode("utf-8")
        resp = _post(self.submit_url, body, self.api_key, self.timeout)
        job = resp.get("data", {}).get("task_id") or resp.get("task_id")
        if not job:
            raise BackendError("model submit returned no task id")
        return {"remote_id": job}

    def advance(self, handle: dict) -> Optional[str]:
        try:
            r = requests.get(
                f"{self.status_url}/{handle['remote_id']}",
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
            r.raise_for_status()
            doc = r.json()
        except requests.RequestException as e:
            raise BackendError(f"status poll failed: {e}") from None
        data = doc.get("data", doc)
        if data.get("status") in ("queued", "running"):
            return None
        url = data.get("output", {}).get("model") or data.get("model_url")
        if not url:
            raise BackendError(f"model job ended without a model url: {data.get('status')}")
        return url


def _post(url: str, body: bytes, api_key: str, timeout: float) -> dict:
    try:
        resp = requests.post(
            url, data=body,
            headers={"Content-Type": "application/json",
                     "Authorization": f"Bearer {api_key}"},
            timeout=timeout,
        )
        resp.raise_for_status()
        return resp.json()
    except requests.RequestException as e:
        raise BackendError(f"request to {url} failed: {e}") from None


def extract_core_character(backend, text: str) -> str:
    """Run extraction through a chat backend and enforce the one-character
    contract (a longer reply is a model fault, never truncated)."""
    spec = build_extract_prompt(text)
    reply = backend.chat(spec).strip()
    if len(reply) != 1:
        raise NotOneCharacter(f"backend replied {reply!r}")
    return reply


# --- job runner --------------------------------------------------------------

@dataclass
class GenerationJob:
    job_id: str
    kind: str  # "extract" | "image" | "model3d"
    task_id: str
    state: str = "submitted"  # submitted|running|complete|failed
    attempts: int = 0
    payload: dict = field(default_factory=dict)
    result: Optional[PipelineResult] = None
    reason: Optional[str] = None
    delivered: bool = False
    handle: Optional[dict] = None  # model3d backend handle


@dataclass
class PipelineConfig:
    mode: str = "mock"
    assets_dir: str = "assets"
    max_retries: int = 2
    mock_ticks: int = 1  # mock model3d poll ticks to completion
    base_urls: dict = field(default_factory=dict)
    api_key_env: str = "PIPELINE_API_KEY"
    retry_backoff: float = 1.0  # seconds, real mode only

    def api_key(self) -> str:
        return os.environ.get(self.api_key_env, "")


class PipelineRunner:
    """Owns the job table; jobs advance on tick(), results are handed to the
    session exactly once via drain_results()."""

    def __init__(self, catalog: PartCatalog, config: Optional[PipelineConfig] = None,
                 chat_backend=None, image_backend=None, model_backend=None):
        self.config = config or PipelineConfig()
        self.store = AssetStore(self.config.assets_dir)
        if self.config.mode == "mock":
            self.chat = chat_backend or MockChatBackend(catalog)
            self.image = image_backend or MockImageBackend()
            self.model = model_backend or MockModel3DBackend(self.config.mock_ticks)
        else:
            key = self.config.api_key()
            urls = self.config.base_urls
            self.chat = chat_backend or RealChatBackend(urls.get("chat", ""), key)
            self.image = image_backend or RealImageBackend(urls.get("image", ""), key)
            self.model = model_backend or RealModel3DBackend(
                urls.get("model_submit", ""), urls.get("model_status", ""), key)
        self.jobs: dict[str, GenerationJob] = {}
        self._next_job = 1
        self._outbox: list[PipelineResult] = []

    def submit(self, request: PipelineRequest) -> str:
        job_id = f"j{self._next_job}"
        self._next_job += 1
        self.jobs[job_id] = GenerationJob(
            job_id=job_id, kind=request.kind, task_id=request.task_id,
            payload=dict(request.payload),
        )
        return job_id

    def poll(self, job_id: str) -> GenerationJob:
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        self._handoff(job)
        return job

    def tick(self) -> None:
        """One processing round: start pending jobs, advance running ones."""
        for job in list(self.jobs.values()):
            if job.state == "submitted":
                self._start(job)
            elif job.state == "running" and job.kind == "model3d":
                self._advance_model(job)
            self._handoff(job)

    def drain_results(self) -> list[PipelineResult]:
        out, self._outbox = self._outbox, []
        return out

    def run_until_idle(self, max_ticks: int = 100) -> None:
        for _ in range(max_ticks):
            if all(j.state in ("complete", "failed") for j in self.jobs.values()):
                return
            self.tick()

    # internal

    def _retrying(self, job: GenerationJob, fn):
        while True:
            job.attempts += 1
            try:
                return fn()
            except BackendError as e:
                if job.attempts > self.config.max_retries:
                    self._fail(job, str(e))
                    return None
                if self.config.mode != "mock":
                    time.sleep(self.config.retry_backoff)
            except (NoLexiconMatch, NotOneCharacter, FetchError, EmptyText) as e:
                self._fail(job, str(e))
                return None

    def _start(self, job: GenerationJob) -> None:
        if job.kind == "extract":
            def work():
                return extract_core_character(self.chat, job.payload["text"])
            reply = self._retrying(job, work)
            if reply is not None:
                self._complete(job, PipelineResult("core_character", job.task_id, {"text": reply}))
        elif job.kind == "image":
            def work():
                spec = build_image_prompt(job.payload["character"])
                return self.image.generate(spec)
            content = self._retrying(job, work)
            if content is not None:
                ref = self.store.put(content, "png")
                self._complete(job, PipelineResult("image", job.task_id, {
                    "uri": ref.uri, "digest": ref.digest,
                }))
        elif job.kind == "model3d":
            def work():
                return self.model.submit(job.payload["image_digest"])
            handle = self._retrying(job, work)
            if handle is not None:
                job.handle = handle
                job.state = "running"
        else:
            self._fail(job, f"unknown job kind {job.kind}")

    def _advance_model(self, job: GenerationJob) -> None:
        try:
            url = self.model.advance(job.handle)
        except BackendError as e:
            self._fail(job, str(e))
            return
        if url is None:
            return
        try:
            ref = self.store.fetch(url, "glb")
        except FetchError as e:
            self._fail(job, str(e))
            return
        self._complete(job, PipelineResult("model", job.task_id, {
            "uri": url, "digest": ref.digest,
        }))

    def _complete(self, job: GenerationJob, result: PipelineResult) -> None:
        job.state = "complete"
        job.result = result

    def _fail(self, job: GenerationJob, reason: str) -> None:
        job.state = "failed"
        job.reason = reason
        job.result = PipelineResult("failed", job.task_id, {
            "stage": job.kind, "reason": reason,
        })

    def _handoff(self, job: GenerationJob) -> None:
        if job.state in ("complete", "failed") and not job.delivered:
            job.delivered = True
            self._outbox.append(job.result)
