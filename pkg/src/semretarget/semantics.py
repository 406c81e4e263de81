"""Semantic supervisors: the deterministic mock embedder and a JSON-over-HTTP
client for an external vision-language service.

Wire protocol (one POST per call)::

    request  {"images": [<base64 PNG>, ...], "mode": "embed" | "vqa" | "itm",
              "prompt": str, "text": str | null,
              "beam_width": int, "length_penalty": float}
    response {"embedding": [float, ...]?, "answer": str?, "score": float?,
              "model_id": str}
"""
from __future__ import annotations

import base64
import io
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import (EmbeddingWidthMismatch, ServiceProtocolError,
                     ServiceUnavailable)
from .render import RenderedFrame

ENDPOINT_ENV = "SEMRETARGET_VLM_ENDPOINT"
MOCK_POOL = 8
BEAM_WIDTH = 5
LENGTH_PENALTY = 1.0


@dataclass(frozen=True)
class PromptTemplate:
    q1: str = "Where are the hands of the character?"
    q2_template: str = "[answer1] What is the character in the image doing?"

    def round2(self, answer1: str) -> str:
        return self.q2_template.replace("[answer1]", answer1.strip())


@dataclass
class SemanticEmbedding:
    vector: np.ndarray
    backend_id: str


def _images(frame) -> torch.Tensor:
    return frame.images if isinstance(frame, RenderedFrame) else torch.as_tensor(frame)


def mock_embed(frame) -> torch.Tensor:
    """Average-pool every view to 8x8 and concatenate: 192 values for three views.

    Linear in the pixels, so gradients pass straight through. Accepts a
    :class:`RenderedFrame` or an image tensor ``(..., n_views, H, W)``.
    """
    imgs = _images(frame)
    lead = imgs.shape[:-3]
    v, h, w = imgs.shape[-3:]
    pooled = F.adaptive_avg_pool2d(imgs.reshape(-1, v, h, w), MOCK_POOL)
    return pooled.reshape(*lead, v * MOCK_POOL * MOCK_POOL)


class MockEmbedder:
    backend_id = "mock-avgpool8"
    differentiable = True

    def __call__(self, images) -> torch.Tensor:
        return mock_embed(images)


# ---------------------------------------------------------------- service client

def encode_png(image) -> str:
    """Base64 PNG of an occupancy image, drawn as a dark figure on white."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    pix = np.clip(np.rint((1.0 - arr) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pix, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class VLMClient:
    """Blocking client with a pooled session and retry-with-backoff."""

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0,
                 retries: int = 2, backoff: float = 0.5, session=None):
        import requests
        from requests.adapters import HTTPAdapter
        from urllib3.util.retry import Retry

        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ServiceUnavailable(f"no VLM endpoint configured (set {ENDPOINT_ENV})")
        self.timeout = timeout
        if session is None:
            session = requests.Session()
            retry = Retry(total=retries, backoff_factor=backoff,
                          status_forcelist=(502, 503, 504), allowed_methods=None)
            adapter = HTTPAdapter(max_retries=retry, pool_maxsize=8)
            session.mount("http://", adapter)
            session.mount("https://", adapter)
        self.session = session
        self.model_id: str | None = None

    @classmethod
    def from_env(cls, endpoint: str | None = None, **kw) -> "VLMClient | None":
        """Client for ``endpoint`` or the environment, or None if neither is set."""
        if not (endpoint or os.environ.get(ENDPOINT_ENV)):
            return None
        return cls(endpoint, **kw)

    def request(self, views: Sequence, mode: str, prompt: str = "", text: str | None = None,
                beam_width: int = BEAM_WIDTH, length_penalty: float = LENGTH_PENALTY) -> dict:
        import requests

        body = {"images": [encode_png(v) for v in views], "mode": mode, "prompt": prompt,
                "text": text, "beam_width": int(beam_width),
                "length_penalty": float(length_penalty)}
        try:
            resp = self.session.post(self.endpoint, json=body, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ServiceUnavailable(f"{self.endpoint}: {exc}") from exc
        if resp.status_code >= 500:
            raise ServiceUnavailable(f"{self.endpoint}: HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ServiceProtocolError(f"{self.endpoint}: HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise ServiceProtocolError(f"{self.endpoint}: response is not JSON") from exc
        if not isinstance(data, dict):
            raise ServiceProtocolError("response must be a JSON object")
        self.model_id = data.get("model_id", self.model_id)
        return data

    def vqa(self, views, question: str) -> str:
        answer = self.request(views, "vqa", prompt=question).get("answer")
        if not isinstance(answer, str):
            raise ServiceProtocolError("vqa response lacks a string 'answer'")
        return answer

    def embed(self, views, prompt: str) -> np.ndarray:
        emb = self.request(views, "embed", prompt=prompt).get("embedding")
        try:
            arr = np.asarray(emb, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ServiceProtocolError("embedding is not numeric") from exc
        if emb is None or arr.ndim == 0 or arr.size == 0 or not np.all(np.isfinite(arr)):
            raise ServiceProtocolError("embedding missing, empty or non-finite")
        # token-level (or per-view) outputs are mean-pooled down to one vector
        return arr.reshape(-1, arr.shape[-1]).mean(0)

    def itm(self, views, text: str) -> float:
        score = self.request(views, "itm", text=text).get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise ServiceProtocolError("itm response lacks a numeric 'score'")
        score = float(score)
        if not math.isfinite(score) or not 0.0 <= score <= 1.0:
            raise ServiceProtocolError(f"itm score {score!r} outside [0, 1]")
        return score


def guided_vqa(views, prompt: PromptTemplate, client: VLMClient) -> str:
    """Two-round questioning: hand location first, then the activity given that answer."""
    answer1 = client.vqa(views, prompt.q1)
    return client.vqa(views, prompt.round2(answer1))


def vlm_embed(frames, prompt: PromptTemplate, client: VLMClient,
              expected_width: int | None = None) -> np.ndarray:
    """One embedding per frame, ``T_s x K``; views are combined by their mean.

    Each view is embedded with the guided round-2 question as context. Not
    differentiable: the result is plain numpy.
    """
    imgs = _images(frames)
    if imgs.ndim == 3:
        imgs = imgs.unsqueeze(0)
    out = []
    for frame in imgs:
        answer1 = client.vqa(list(frame), prompt.q1)
        context = prompt.round2(answer1)
        per_view = [client.embed([view], context) for view in frame]
        widths = {len(e) for e in per_view}
        if len(widths) != 1:
            raise EmbeddingWidthMismatch(f"views returned widths {sorted(widths)}")
        out.append(np.mean(per_view, axis=0))
    width = len(out[0])
    if expected_width is not None and width != expected_width:
        raise EmbeddingWidthMismatch(f"service returned K={width}, expected {expected_width}")
    return np.stack(out)


def itm_score(views, text: str, client: VLMClient) -> float:
    return client.itm(views, text)


class VLMEmbedder:
    """Embedder backed by the remote service; usable for evaluation only."""

    differentiable = False

    def __init__(self, client: VLMClient, prompt: PromptTemplate = PromptTemplate()):
        self.client = client
        self.prompt = prompt
        self.width: int | None = None

    @property
    def backend_id(self) -> str:
        return f"vlm:{self.client.model_id or self.client.endpoint}"

    def __call__(self, images) -> torch.Tensor:
        imgs = _images(images)
        lead = imgs.shape[:-3]
        flat = imgs.reshape(-1, *imgs.shape[-3:])
        emb = vlm_embed(flat, self.prompt, self.client, self.width)
        self.width = emb.shape[-1]
        return torch.as_tensor(emb, dtype=imgs.dtype).reshape(*lead, -1)
