"""Translation clients used for back-translation.

``StubTranslator`` is a deterministic offline paraphraser; ``HttpTranslator``
talks to a JSON translation service configured through environment variables.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from pathlib import Path
from typing import Protocol

import requests


class TranslationError(RuntimeError):
    pass


class TranslationClient(Protocol):
    def translate(self, text: str, source_lang: str, target_lang: str) -> str: ...


# Never touches color, vehicle-type or motion words.
DEFAULT_SYNONYMS = {
    "goes": "drives",
    "drives": "travels",
    "keeps going": "continues",
    "ahead": "forward",
    "makes": "takes",
    "near": "close to",
    "next to": "beside",
    "by": "beside",
    "street": "road",
    "intersection": "junction",
    "car": "vehicle",
}

_PIVOT_TAG = re.compile(r"^<(\w+)>")


def _match_case(replacement: str, original: str) -> str:
    if original[:1].isupper():
        return replacement[:1].upper() + replacement[1:]
    return replacement


class StubTranslator:
    """Deterministic stand-in for a translation service.

    Translating out of English only tags the text with the pivot language.
    Translating back applies the synonym table (whole words, case-insensitive,
    longest phrase first, single pass) and, with probability ``reorder_prob``
    seeded by the text, rotates comma-separated clauses. An empty table with
    ``reorder_prob=0`` makes the round trip the identity.
    """

    def __init__(self, synonyms: dict[str, str] | None = None, reorder_prob: float = 0.5, seed: int = 0):
        table = DEFAULT_SYNONYMS if synonyms is None else synonyms
        self.synonyms = {k.lower(): v for k, v in table.items()}
        self.reorder_prob = reorder_prob
        self.seed = seed
        keys = sorted(self.synonyms, key=len, reverse=True)
        self._pattern = (
            re.compile(r"\b(" + "|".join(re.escape(k) for k in keys) + r")\b", re.IGNORECASE)
            if keys
            else None
        )

    def _substitute(self, text: str) -> str:
        if self._pattern is None:
            return text
        return self._pattern.sub(lambda m: _match_case(self.synonyms[m.group(0).lower()], m.group(0)), text)

    def _reorder(self, text: str) -> str:
        clauses = [c.strip() for c in text.rstrip(".").split(",")]
        if len(clauses) < 2 or self.reorder_prob <= 0:
            return text
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        if random.Random(digest).random() >= self.reorder_prob:
            return text
        rotated = clauses[1:] + clauses[:1]
        rotated = [rotated[0][:1].upper() + rotated[0][1:]] + [c[:1].lower() + c[1:] for c in rotated[1:]]
        return ", ".join(rotated) + ("." if text.endswith(".") else "")

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        if target_lang != "en":
            return f"<{target_lang}>{text}"
        body = _PIVOT_TAG.sub("", text, count=1)
        if source_lang == "en":
            return body
        return self._reorder(self._substitute(body))


class HttpTranslator:
    """Client for a JSON translation endpoint.

    Request: ``POST {endpoint}`` with body ``{"text", "source", "target"}`` and
    header ``Authorization: Bearer <key>``. Response: ``{"translation": str}``.
    """

    def __init__(
        self,
        endpoint: str | None = None,
        api_key: str | None = None,
        timeout: float = 10.0,
        retries: int = 3,
        backoff: float = 0.5,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint or os.environ.get("TRANSLATE_ENDPOINT")
        self.api_key = api_key if api_key is not None else os.environ.get("TRANSLATE_API_KEY", "")
        if not self.endpoint:
            raise TranslationError("no translation endpoint (set TRANSLATE_ENDPOINT)")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()

    def translate(self, text: str, source_lang: str, target_lang: str) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"text": text, "source": source_lang, "target": target_lang}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
                # 4xx other than throttling will not improve with retries
                if 400 <= resp.status_code < 500 and resp.status_code != 429:
                    raise TranslationError(f"translation rejected: HTTP {resp.status_code}")
                resp.raise_for_status()
                out = resp.json()["translation"]
                if not isinstance(out, str):
                    raise TranslationError("malformed translation response")
                return out
            except TranslationError:
                raise
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise TranslationError(f"translation failed after {self.retries + 1} attempts: {last_error}")


class BacktranslationCache:
    """Round-trip results on disk keyed by (sha256 of text, pivot language)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._data: dict[str, str] = {}
        if self.path.exists():
            self._data = json.loads(self.path.read_text())

    @staticmethod
    def key(text: str, pivot: str) -> str:
        return f"{hashlib.sha256(text.encode()).hexdigest()}:{pivot}"

    def get(self, text: str, pivot: str) -> str | None:
        return self._data.get(self.key(text, pivot))

    def put(self, text: str, pivot: str, result: str) -> None:
        with self._lock:
            self._data[self.key(text, pivot)] = result

    def flush(self) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(json.dumps(self._data, indent=1, sort_keys=True))
