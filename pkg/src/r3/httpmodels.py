"""HTTP adapters implementing the model contracts against external servers.

Wire protocol (JSON bodies, POST):

  {base}/denoise        {"tokens": [...], "editable": [...], "temperature": t,
                         "steps": n, "stream_key": "..."}      -> {"tokens": [...]}
  {base}/score          {"context": [...], "block": [...],
                         "stream_key": "..."}                  -> {"score": s}
  {base}/denoise_batch  {"requests": [<denoise request>, ...]} -> {"responses": [...]}
  {base}/score_batch    {"requests": [<score request>, ...]}   -> {"responses": [...]}

Only the stream key crosses the wire; the server is responsible for its own
reproducible sampling keyed on it. Transport failures are retried; a server
response that breaks the model contract (mask left in place, score out of
range, non-editable token changed) is never retried, it aborts the run.
"""

from __future__ import annotations

import time
from collections.abc import Sequence
from dataclasses import replace

import requests

from .core import AdapterError, ContractViolation, TokenSeq
from .models import Denoiser, ProcessReward, ScoreRequest
from .rng import RngStream

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2
RETRY_BACKOFF = 0.2


class _HttpClient:
    def __init__(self, endpoint: str, timeout: float, retries: int):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.session = requests.Session()

    def post(self, path: str, body: dict) -> dict:
        url = f"{self.endpoint}/{path}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(url, json=body, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise AdapterError(f"{url} returned {resp.status_code}")
                if resp.status_code != 200:
                    # 4xx is a protocol bug, not a transient fault
                    raise ContractViolation(f"{url} returned {resp.status_code}: {resp.text[:200]}")
                return resp.json()
            except ContractViolation:
                raise
            except (requests.RequestException, AdapterError, ValueError) as exc:
                last = exc
                if attempt < self.retries:
                    time.sleep(RETRY_BACKOFF * (attempt + 1))
        raise AdapterError(f"{url} failed after {self.retries + 1} attempts: {last}")


class HttpDenoiser(Denoiser):
    """Denoiser contract over the wire. Responses are validated by
    `denoise_region` exactly like a local model's."""

    parallel_safe = True

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        self._client = _HttpClient(endpoint, timeout, retries)

    def denoise(
        self,
        seq: TokenSeq,
        editable: frozenset[int],
        temperature: float,
        steps: int,
        rng: RngStream,
    ) -> TokenSeq:
        body = {
            "tokens": list(seq.tokens),
            "editable": sorted(editable),
            "temperature": temperature,
            "steps": steps,
            "stream_key": rng.key,
        }
        data = self._client.post("denoise", body)
        tokens = data.get("tokens")
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ContractViolation("denoise response must carry an integer token list")
        if len(tokens) != len(seq.tokens):
            raise ContractViolation(
                f"denoise response length {len(tokens)} != request length {len(seq.tokens)}"
            )
        return replace(seq, tokens=tuple(tokens))


class HttpProcessReward(ProcessReward):
    """PRM contract over the wire; the batch variant submits one request."""

    parallel_safe = True

    def __init__(self, endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        self._client = _HttpClient(endpoint, timeout, retries)

    @staticmethod
    def _request_body(context: Sequence[int], block: Sequence[int], key: str) -> dict:
        return {"context": list(context), "block": list(block), "stream_key": key}

    @staticmethod
    def _extract_score(data: dict) -> float:
        score = data.get("score")
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise ContractViolation("score response must carry a numeric 'score'")
        return float(score)

    def score(self, context: Sequence[int], block: Sequence[int], rng: RngStream) -> float:
        data = self._client.post("score", self._request_body(context, block, rng.key))
        return self._extract_score(data)

    def score_batch(self, requests_: Sequence[ScoreRequest]) -> list[float]:
        body = {
            "requests": [self._request_body(r.context, r.block, r.rng.key) for r in requests_]
        }
        data = self._client.post("score_batch", body)
        responses = data.get("responses")
        if not isinstance(responses, list) or len(responses) != len(requests_):
            raise ContractViolation("score_batch response misaligned with request batch")
        return [self._extract_score(r) for r in responses]


def http_denoiser_adapter(
    endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES
) -> HttpDenoiser:
    return HttpDenoiser(endpoint, timeout, retries)


def http_prm_adapter(
    endpoint: str, timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES
) -> HttpProcessReward:
    return HttpProcessReward(endpoint, timeout, retries)
