"""Verifier clients: an in-process mock around the local verifier and an HTTP client.

Credentials are read from an environment variable whose *name* is configured;
the token itself never appears in a config file.
"""
from __future__ import annotations

import base64
import hashlib
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol

import numpy as np

from .container import decode_tensor, encode_tensor
from .regenerator import CalibratedThresholds, pass_level


class VerifierError(RuntimeError):
    retryable = True


class VerifierTimeoutError(VerifierError):
    pass


class VerifierQuotaError(VerifierError):
    pass


class MalformedResponseError(VerifierError):
    retryable = False


NO_FACE = "no_face_detected"


@dataclass(frozen=True)
class VerifyResult:
    level: float | None
    confidence: float | None
    reason: str | None = None
    attempts: int = 1

    def to_dict(self) -> dict:
        return {"level": self.level, "confidence": self.confidence, "reason": self.reason, "attempts": self.attempts}


class VerifierClient(Protocol):
    def verify(self, image_a: np.ndarray, image_b: np.ndarray, key: str | None = None) -> dict:
        """Return ``{"score": float, "face_detected": bool}`` or raise a VerifierError."""


@dataclass
class MockVerifierClient:
    """Wraps a scoring function (normally teacher cosine) with optional fault injection.

    Faults are drawn from a generator seeded per call key and attempt number, so
    a rerun injects the same faults.
    """

    score_fn: Callable[[np.ndarray, np.ndarray], float]
    timeout_rate: float = 0.0
    quota_rate: float = 0.0
    malformed_rate: float = 0.0
    no_face_keys: frozenset = frozenset()
    latency_s: float = 0.0
    seed: int = 0
    _calls: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def _draw(self, key: str) -> float:
        with self._lock:
            n = self._calls.get(key, 0)
            self._calls[key] = n + 1
        digest = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
        return float(np.random.default_rng([self.seed, digest, n]).random())

    def verify(self, image_a: np.ndarray, image_b: np.ndarray, key: str | None = None) -> dict:
        if self.latency_s:
            time.sleep(self.latency_s)
        key = key or ""
        u = self._draw(key)
        if u < self.timeout_rate:
            raise VerifierTimeoutError("injected timeout")
        u -= self.timeout_rate
        if u < self.quota_rate:
            raise VerifierQuotaError("injected quota exhaustion")
        u -= self.quota_rate
        if u < self.malformed_rate:
            raise MalformedResponseError("injected malformed response")
        if key in self.no_face_keys:
            return {"score": None, "face_detected": False}
        return {"score": float(self.score_fn(image_a, image_b)), "face_detected": True}


def encode_image(image: np.ndarray) -> str:
    return base64.b64encode(encode_tensor(np.asarray(image, dtype=np.float32))).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    return decode_tensor(base64.b64decode(data.encode("ascii")), expect_dtype=np.float32)


@dataclass
class HttpVerifierClient:
    """Client for the ``/verify`` endpoint served by ``idleak serve`` or a compatible service."""

    endpoint: str
    token_env: str | None = None
    timeout_s: float = 10.0
    _client: object = field(default=None, repr=False)

    def _headers(self) -> dict:
        if not self.token_env:
            return {}
        token = os.environ.get(self.token_env)
        if not token:
            raise VerifierError(f"environment variable {self.token_env} is not set")
        return {"Authorization": f"Bearer {token}"}

    def verify(self, image_a: np.ndarray, image_b: np.ndarray, key: str | None = None) -> dict:
        import httpx

        payload = {"image_a": encode_image(image_a), "image_b": encode_image(image_b)}
        try:
            client = self._client or httpx
            resp = client.post(self.endpoint.rstrip("/") + "/verify", json=payload, headers=self._headers(),
                               timeout=self.timeout_s)
        except httpx.TimeoutException as e:
            raise VerifierTimeoutError(str(e)) from e
        except httpx.TransportError as e:
            raise VerifierTimeoutError(f"transport error: {e}") from e
        if resp.status_code == 429:
            raise VerifierQuotaError("quota exceeded (HTTP 429)")
        if resp.status_code >= 500:
            raise VerifierTimeoutError(f"server error {resp.status_code}")
        if resp.status_code != 200:
            raise MalformedResponseError(f"unexpected status {resp.status_code}")
        try:
            body = resp.json()
            detected = bool(body["face_detected"])
            score = None if body.get("score") is None else float(body["score"])
        except (ValueError, KeyError, TypeError) as e:
            raise MalformedResponseError(f"bad response body: {e}") from e
        if detected and score is None:
            raise MalformedResponseError("score missing for a detected face")
        return {"score": score, "face_detected": detected}


def remote_verify(client: VerifierClient, image_a: np.ndarray, image_b: np.ndarray,
                  thresholds: CalibratedThresholds, retries: int = 2, key: str | None = None) -> VerifyResult:
    """Normalize one verification into a pass level, retrying retryable errors.

    A missing face counts as a failed attempt (level None) rather than an error.
    Raises the last error once retries are exhausted.
    """
    last: VerifierError | None = None
    for attempt in range(retries + 1):
        try:
            out = client.verify(image_a, image_b, key=key)
        except VerifierError as e:
            last = e
            if not e.retryable:
                break
            continue
        if not out.get("face_detected", True):
            return VerifyResult(None, None, NO_FACE, attempt + 1)
        score = float(out["score"])
        return VerifyResult(pass_level(score, thresholds), score, None, attempt + 1)
    assert last is not None
    raise last


@dataclass
class RemoteOutcome:
    key: str
    result: VerifyResult | None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"key": self.key, "result": None if self.result is None else self.result.to_dict(), "error": self.error}


class RateLimiter:
    def __init__(self, per_second: float | None):
        self.interval = 0.0 if not per_second else 1.0 / per_second
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = max(0.0, self._next - now)
            self._next = max(now, self._next) + self.interval
        if delay:
            time.sleep(delay)


def verify_many(client: VerifierClient, pairs: Mapping[str, tuple[np.ndarray, np.ndarray]],
                thresholds: CalibratedThresholds, retries: int = 2, concurrency: int = 1,
                rate_limit: float | None = None) -> dict[str, RemoteOutcome]:
    """Verify many keyed pairs; failed items are marked, never abort the batch."""
    limiter = RateLimiter(rate_limit)

    def one(key: str) -> RemoteOutcome:
        a, b = pairs[key]
        limiter.wait()
        try:
            return RemoteOutcome(key, remote_verify(client, a, b, thresholds, retries, key))
        except VerifierError as e:
            return RemoteOutcome(key, None, f"{type(e).__name__}: {e}")

    keys = sorted(pairs)
    if concurrency > 1:
        with ThreadPoolExecutor(concurrency) as pool:
            outs = list(pool.map(one, keys))
    else:
        outs = [one(k) for k in keys]
    return {o.key: o for o in outs}
