"""Generation backends: text generation and yes-token relevance probability.

Two realizations of one contract: an OpenAI-compatible chat-completions client
(base64-embedded images, top-k logprobs for the yes/no relevance score) and a
deterministic offline mock. Either can be fronted by a content-addressed
append-only JSONL cache, which is what makes whole-pipeline runs resumable
with zero duplicate backend calls.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

FREE_TEXT = "free-text"
RELEVANCE = "relevance"


class BackendError(Exception):
    """Wire failure after retries; carries the last status when known."""

    def __init__(self, message: str, status: int | None = None):
        self.status = status
        super().__init__(message)


class CapabilityError(BackendError):
    """The endpoint cannot serve the request (e.g. no logprob support)."""


class RequestError(ValueError):
    """Invalid generation request."""


@dataclass(frozen=True)
class GenerationRequest:
    """One backend call: prompt, attached images, decoding parameters.

    ``subjects`` carries the display names the reply is expected to mention;
    the wire backend ignores it, the mock uses it to compose realistic
    deterministic text. It is part of the canonical form (and thus the cache
    key).
    """

    prompt: str
    images: tuple[str, ...] = ()
    kind: str = FREE_TEXT
    temperature: float = 1.0
    max_tokens: int = 256
    subjects: tuple[str, ...] = ()

    def validate(self) -> None:
        if not self.prompt.strip():
            raise RequestError("empty prompt")
        if self.kind not in (FREE_TEXT, RELEVANCE):
            raise RequestError(f"unknown request kind: {self.kind!r}")
        if self.temperature < 0:
            raise RequestError("temperature must be >= 0")

    def canonical(self) -> str:
        """Stable JSON serialization used for cache keys and mock hashing."""
        return json.dumps(
            {"prompt": self.prompt, "images": list(self.images),
             "kind": self.kind, "temperature": self.temperature,
             "max_tokens": self.max_tokens, "subjects": list(self.subjects)},
            sort_keys=True, ensure_ascii=True, separators=(",", ":"))


class GenerationBackend:
    """Contract: ``generate`` returns text, ``relevance`` a probability in [0,1]."""

    backend_id = "abstract"
    model_id = "none"

    def __init__(self):
        self.call_count = 0

    def generate(self, request: GenerationRequest) -> str:
        raise NotImplementedError

    def relevance(self, request: GenerationRequest) -> float:
        raise NotImplementedError


_MOCK_ADJECTIVES = ("vivid", "quiet", "historic", "colorful", "detailed",
                    "ordinary", "striking", "weathered")
_MOCK_NOUNS = ("scene", "building", "portrait", "landscape", "object",
               "gathering", "artifact", "setting")


class MockBackend(GenerationBackend):
    """Deterministic offline backend: a pure function of (request, seed)."""

    backend_id = "mock"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.model_id = f"mock-{seed}"

    def _digest(self, request: GenerationRequest) -> bytes:
        payload = f"{self.seed}|{request.canonical()}".encode("utf-8")
        return hashlib.sha256(payload).digest()

    def generate(self, request: GenerationRequest) -> str:
        request.validate()
        self.call_count += 1
        d = self._digest(request)
        adj = _MOCK_ADJECTIVES[d[0] % len(_MOCK_ADJECTIVES)]
        noun = _MOCK_NOUNS[d[1] % len(_MOCK_NOUNS)]
        subjects = request.subjects
        if len(subjects) >= 2:
            return (f"{subjects[0]} appears together with {subjects[1]} "
                    f"in a {adj} {noun}.")
        if len(subjects) == 1:
            return f"{subjects[0]} is shown as a {adj} {noun} in the images."
        return f"A {adj} {noun} is depicted."

    def relevance(self, request: GenerationRequest) -> float:
        request.validate()
        self.call_count += 1
        d = self._digest(request)
        return int.from_bytes(d[:8], "big") / float(1 << 64)


class HttpBackend(GenerationBackend):
    """OpenAI-compatible chat-completions client.

    Images are attached as base64 data URLs; relevance requests ask for
    top-k log-probabilities of the first generated token and normalize the
    probability mass over the leading "yes"/"no" tokens (case-insensitive).
    Transient failures (429/5xx, connection errors) are retried with
    exponential backoff, at most ``max_attempts`` tries.
    """

    backend_id = "http"

    def __init__(self, endpoint: str, model: str,
                 api_key_env: str = "FICHAD_API_KEY",
                 top_logprobs: int = 20, timeout: float = 120.0,
                 max_attempts: int = 3, normalize_yes_no: bool = True,
                 backoff: float = 1.0):
        super().__init__()
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model
        self.api_key = os.environ.get(api_key_env, "")
        self.top_logprobs = top_logprobs
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.normalize_yes_no = normalize_yes_no
        self.backoff = backoff

    def _image_part(self, ref: str) -> dict:
        try:
            data = Path(ref).read_bytes()
        except OSError as exc:
            raise RequestError(f"unreadable image reference: {ref}") from exc
        suffix = Path(ref).suffix.lstrip(".").lower() or "jpeg"
        b64 = base64.b64encode(data).decode("ascii")
        return {"type": "image_url",
                "image_url": {"url": f"data:image/{suffix};base64,{b64}"}}

    def _payload(self, request: GenerationRequest) -> dict:
        content: list[dict] = [{"type": "text", "text": request.prompt}]
        content += [self._image_part(ref) for ref in request.images]
        payload = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.kind == RELEVANCE:
            payload["max_tokens"] = 1
            payload["logprobs"] = True
            payload["top_logprobs"] = self.top_logprobs
        return payload

    def _post(self, payload: dict) -> dict:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/chat/completions"
        last_status = None
        for attempt in range(self.max_attempts):
            try:
                resp = requests.post(url, json=payload, headers=headers,
                                     timeout=self.timeout)
                last_status = resp.status_code
                if resp.status_code == 200:
                    return resp.json()
                if resp.status_code not in (429, 500, 502, 503, 504):
                    raise BackendError(
                        f"backend returned {resp.status_code}: {resp.text[:200]}",
                        status=resp.status_code)
            except requests.RequestException:
                pass
            if attempt < self.max_attempts - 1:
                time.sleep(self.backoff * 2 ** attempt)
        raise BackendError(
            f"backend unavailable after {self.max_attempts} attempts",
            status=last_status)

    def generate(self, request: GenerationRequest) -> str:
        request.validate()
        self.call_count += 1
        data = self._post(self._payload(request))
        try:
            text = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}") from exc
        text = (text or "").strip()
        if not text:
            raise BackendError("backend returned empty text")
        return text

    def relevance(self, request: GenerationRequest) -> float:
        request.validate()
        self.call_count += 1
        data = self._post(self._payload(request))
        try:
            logprobs = data["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError):
            raise CapabilityError(
                "endpoint did not return top logprobs; relevance scoring "
                "requires logprob support") from None
        return yes_probability(logprobs, normalize=self.normalize_yes_no)


def yes_probability(top_logprobs: list[dict], normalize: bool = True) -> float:
    """Yes-token probability from a top-logprobs list.

    Tokens whose stripped lowercase form is "yes"/"no" contribute their mass;
    absent "yes" means 0. In normalized mode the result is
    p_yes / (p_yes + p_no); raw mode returns p_yes directly.
    """
    p_yes = p_no = 0.0
    for item in top_logprobs:
        token = str(item.get("token", "")).strip().lower()
        if token == "yes":
            p_yes += math.exp(float(item["logprob"]))
        elif token == "no":
            p_no += math.exp(float(item["logprob"]))
    if p_yes == 0.0:
        return 0.0
    if not normalize or p_no == 0.0:
        return min(p_yes, 1.0)
    return p_yes / (p_yes + p_no)


class ResponseCache:
    """Content-addressed cache persisted as append-only JSONL.

    One record per line: ``{"k": hash, "kind": ..., "v": ...}``. A truncated
    final line (crash mid-append) is ignored on load.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._index: dict[str, object] = {}
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    continue  # torn final line
                self._index[rec["k"]] = rec["v"]

    def __len__(self) -> int:
        return len(self._index)

    def get(self, key: str):
        return self._index.get(key)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def put(self, key: str, kind: str, value) -> None:
        self._index[key] = value
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps({"k": key, "kind": kind, "v": value},
                                    sort_keys=True) + "\n")


class CachedBackend(GenerationBackend):
    """Cache front for any backend; hits never reach the wrapped backend."""

    def __init__(self, inner: GenerationBackend, cache: ResponseCache):
        super().__init__()
        self.inner = inner
        self.cache = cache
        self.backend_id = inner.backend_id
        self.model_id = inner.model_id

    def _key(self, request: GenerationRequest) -> str:
        payload = f"{self.inner.backend_id}|{self.inner.model_id}|{request.canonical()}"
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def generate(self, request: GenerationRequest) -> str:
        key = self._key(request)
        cached = self.cache.get(key)
        if cached is not None:
            return cached
        text = self.inner.generate(request)
        self.cache.put(key, FREE_TEXT, text)
        return text

    def relevance(self, request: GenerationRequest) -> float:
        key = self._key(request)
        cached = self.cache.get(key)
        if cached is not None:
            return float(cached)
        prob = self.inner.relevance(request)
        self.cache.put(key, RELEVANCE, prob)
        return prob

    @property
    def backend_calls(self) -> int:
        return self.inner.call_count


@dataclass
class BackendConfig:
    """Backend selection for CLI runs: mock by default, wire when configured."""

    kind: str = "mock"  # "mock" or "http"
    seed: int = 0
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "FICHAD_API_KEY"
    top_logprobs: int = 20
    cache_path: str | None = None
    extra: dict = field(default_factory=dict)

    def build(self) -> CachedBackend:
        if self.kind == "mock":
            inner: GenerationBackend = MockBackend(seed=self.seed)
        elif self.kind == "http":
            if not self.endpoint or not self.model:
                raise RequestError("http backend requires endpoint and model")
            inner = HttpBackend(self.endpoint, self.model,
                                api_key_env=self.api_key_env,
                                top_logprobs=self.top_logprobs, **self.extra)
        else:
            raise RequestError(f"unknown backend kind: {self.kind!r}")
        return CachedBackend(inner, ResponseCache(self.cache_path))
