"""Pluggable single-pass candidate scorers.

A backend maps one prompt to one score per candidate letter in a single
invocation. Two deterministic mocks stand in for a served model: seeded
noise, and a path-overlap oracle whose score counts how many selected
paths end at each candidate. The HTTP backend talks to a
completions-with-logprobs endpoint.
"""

from __future__ import annotations

import json
import os
import time
from typing import Optional

import requests

from .errors import BackendProtocolError, BackendTransportError
from .prompts import PromptBundle
from .seeding import stable_unit_float

LetterScores = list[tuple[str, float]]

MOCK_UNIFORM = "uniform_seeded"
MOCK_PATH_ORACLE = "path_overlap_oracle"
MISSING_LETTER_SCORE = -1e9

ENDPOINT_ENV = "KGREC_BACKEND_URL"
TOKEN_ENV = "KGREC_BACKEND_TOKEN"


class MockBackend:
    """Deterministic test double for the served ranking model."""

    def __init__(self, mode: str = MOCK_UNIFORM, seed: int = 0) -> None:
        if mode not in (MOCK_UNIFORM, MOCK_PATH_ORACLE):
            raise ValueError(f"unknown mock mode {mode!r}")
        self.mode = mode
        self.seed = seed
        self.calls = 0

    def score_letters(self, bundle: PromptBundle) -> LetterScores:
        self.calls += 1
        scores: LetterScores = []
        for letter, item in bundle.letter_map:
            noise = stable_unit_float(self.seed, bundle.text, letter)
            if self.mode == MOCK_UNIFORM:
                scores.append((letter, noise))
            else:
                overlap = sum(1 for terminal in bundle.path_terminal_items if terminal == item)
                scores.append((letter, float(overlap) + 1e-6 * noise))
        return scores


class HttpBackend:
    """Client for a completions-style JSON API with first-token logprobs.

    One POST per prompt asks for a single new token with at least 26
    logprobs; each candidate letter's logprob becomes its score, and
    letters missing from the returned top-k fall back to a large negative
    constant so downstream sorting stays finite.
    """

    def __init__(
        self,
        endpoint_url: Optional[str] = None,
        model_name: str = "ranker",
        timeout: float = 30.0,
        max_retries: int = 3,
        backoff: float = 0.5,
        session: Optional[requests.Session] = None,
    ) -> None:
        self.endpoint_url = endpoint_url or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint_url:
            raise ValueError(f"no endpoint URL given and {ENDPOINT_ENV} is unset")
        self.model_name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.calls = 0

    def _post(self, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_retries):
            if attempt > 0:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                response = self.session.post(
                    self.endpoint_url, json=payload, timeout=self.timeout,
                    headers=self._headers(),
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code // 100 != 2:
                last_error = BackendTransportError(
                    f"backend returned HTTP {response.status_code}"
                )
                continue
            try:
                return response.json()
            except (json.JSONDecodeError, ValueError) as exc:
                raise BackendProtocolError(f"backend returned malformed JSON: {exc}") from exc
        raise BackendTransportError(
            f"backend unreachable after {self.max_retries} attempts: {last_error}"
        )

    @staticmethod
    def _headers() -> dict[str, str]:
        token = os.environ.get(TOKEN_ENV)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def score_letters(self, bundle: PromptBundle) -> LetterScores:
        self.calls += 1
        payload = {
            "model": self.model_name,
            "prompt": bundle.text,
            "max_new_tokens": 1,
            "logprobs": max(26, len(bundle.letter_map)),
        }
        data = self._post(payload)
        try:
            top = data["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendProtocolError(
                f"backend response lacks choices[0].logprobs.top_logprobs[0]: {exc}"
            ) from exc
        if not isinstance(top, dict):
            raise BackendProtocolError("top_logprobs[0] is not a token->logprob map")
        by_letter = {str(tok).strip(): float(lp) for tok, lp in top.items()}
        return [
            (letter, by_letter.get(letter, MISSING_LETTER_SCORE))
            for letter, _item in bundle.letter_map
        ]


def score_candidates(backend, bundle: PromptBundle) -> LetterScores:
    """One backend invocation; validates the response covers every letter."""
    scores = backend.score_letters(bundle)
    got = [letter for letter, _ in scores]
    if got != bundle.letters():
        raise BackendProtocolError(
            f"backend returned letters {got}, expected {bundle.letters()}"
        )
    for letter, value in scores:
        if value != value or value in (float("inf"), float("-inf")):
            raise BackendProtocolError(f"non-finite score for letter {letter}")
    return scores


def make_backend(name: str, seed: int = 0, endpoint_url: Optional[str] = None,
                 model_name: str = "ranker", timeout: float = 30.0):
    if name == "mock-uniform":
        return MockBackend(MOCK_UNIFORM, seed)
    if name == "mock-oracle":
        return MockBackend(MOCK_PATH_ORACLE, seed)
    if name == "http":
        return HttpBackend(endpoint_url=endpoint_url, model_name=model_name, timeout=timeout)
    raise ValueError(f"unknown backend {name!r}")
