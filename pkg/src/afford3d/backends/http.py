"""OpenAI-compatible chat-completion backends over httpx."""

from __future__ import annotations

import base64
import io
import logging
import os
import threading
import time
from dataclasses import dataclass

import httpx
import numpy as np
from PIL import Image

from ..errors import BackendError, ContractViolation, ParseError
from ..scene_io import Frame
from .base import (BoundingBox2D, GroundingRequest, SelectionRequest, check_positive, data_uri,
                   grounding_prompt, memory_preamble, parse_grounding_response, parse_selection_response,
                   selection_prompt)

log = logging.getLogger(__name__)

ENV_URL = "AFFORD3D_API_BASE"
ENV_KEY = "AFFORD3D_API_KEY"
ENV_MODEL = "AFFORD3D_MODEL"
ENV_SEG_URL = "AFFORD3D_SEGMENT_URL"


@dataclass(frozen=True)
class RetryPolicy:
    retries: int = 2
    backoff: tuple = (1.0, 2.0)
    timeout: float = 120.0


def post_with_retries(http: httpx.Client, path: str, body: dict, policy: RetryPolicy,
                      sleep=time.sleep, gate: threading.BoundedSemaphore | None = None) -> httpx.Response:
    """POST with retries on transport errors, 5xx and 429; other 4xx fail at once."""
    attempts = policy.retries + 1
    last = "no attempt made"
    for attempt in range(attempts):
        if attempt:
            sleep(policy.backoff[min(attempt - 1, len(policy.backoff) - 1)])
        try:
            if gate is None:
                resp = http.post(path, json=body)
            else:
                with gate:
                    resp = http.post(path, json=body)
        except httpx.HTTPError as exc:
            last = f"transport error: {exc}"
            log.warning("request to %s failed (%s), attempt %d/%d", path, last, attempt + 1, attempts)
            continue
        if resp.status_code >= 500 or resp.status_code == 429:
            last = f"HTTP {resp.status_code}"
            log.warning("request to %s failed (%s), attempt %d/%d", path, last, attempt + 1, attempts)
            continue
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempts=attempt + 1)
        return resp
    raise BackendError(f"request to {path} failed: {last}", attempts=attempts)


class ChatClient:
    """Minimal chat-completions client with bounded retries and a concurrency cap."""

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 policy: RetryPolicy = RetryPolicy(), max_in_flight: int = 4,
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        if not base_url or not model:
            raise ContractViolation("chat client needs an endpoint URL and a model name")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.model = model
        self.policy = policy
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(max_in_flight)
        self._http = httpx.Client(base_url=base_url.rstrip("/"), headers=headers,
                                  timeout=policy.timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "ChatClient":
        url, model = os.environ.get(ENV_URL), os.environ.get(ENV_MODEL)
        if not url or not model:
            raise ContractViolation(f"set {ENV_URL} and {ENV_MODEL} to use the http backend")
        return cls(url, model, os.environ.get(ENV_KEY), **kwargs)

    def chat(self, messages: list[dict], temperature: float = 0.0) -> str:
        body = {"model": self.model, "messages": messages, "temperature": temperature}
        resp = post_with_retries(self._http, "/chat/completions", body, self.policy, self._sleep, self._gate)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise ParseError("malformed chat-completion payload", raw=resp.text) from None

    def close(self):
        self._http.close()


def _image_part(image) -> dict:
    return {"type": "image_url", "image_url": {"url": data_uri(image)}}


class HTTPLanguageModel:
    def __init__(self, client: ChatClient):
        self.client = client

    def complete(self, system_prompt: str, text: str) -> str:
        return self.client.chat([{"role": "system", "content": system_prompt},
                                 {"role": "user", "content": text}])


class HTTPGrounder:
    """Stage-2 grounding: memory overlays first, then the query frame and the prompt."""

    def __init__(self, client: ChatClient, bbox_scale: str = "pixel"):
        if bbox_scale not in ("pixel", "norm1000"):
            raise ContractViolation(f"unknown bbox scale {bbox_scale!r}")
        self.client = client
        self.bbox_scale = bbox_scale

    def ground(self, request: GroundingRequest) -> list[BoundingBox2D]:
        content = []
        if request.exemplars:
            content.append({"type": "text", "text": memory_preamble(request.interaction_label)})
            content += [_image_part(ex.overlay_image) for ex in request.exemplars]
        content.append(_image_part(request.query_frame.rgb))
        content.append({"type": "text", "text": grounding_prompt(request.instruction, request.interaction_label,
                                                                 request.adversarial)})
        raw = self.client.chat([{"role": "user", "content": content}])
        h, w = request.query_frame.shape
        boxes = parse_grounding_response(raw, w, h, self.bbox_scale)
        if not request.adversarial:
            boxes = [b for b in boxes if b.part_index == 1]
        return boxes


class HTTPSelector:
    """Stage-3 selection from the serialised graph, the top-down map and node crops."""

    def __init__(self, client: ChatClient):
        self.client = client

    def select(self, request: SelectionRequest, n_candidates: int) -> int:
        if n_candidates < 1:
            raise ContractViolation("selection needs at least one candidate")
        content = [{"type": "text", "text": selection_prompt(request.instruction, request.graph_json,
                                                             n_candidates)}]
        if request.topdown_render is not None:
            content.append(_image_part(request.topdown_render))
        for node_id in sorted(request.node_crops):
            content.append({"type": "text", "text": f"node {node_id}"})
            content.append(_image_part(request.node_crops[node_id]))
        messages = [{"role": "user", "content": content}]
        raw = self.client.chat(messages)
        try:
            k = parse_selection_response(raw, n_candidates)
        except ParseError:
            k = parse_selection_response(self.client.chat(messages), n_candidates)
        return request.affordance_nodes()[k - 1]


class HTTPSegmenter:
    """Promptable segmentation over a small JSON endpoint.

    ``POST {base}/segment`` with ``{"image": <data uri>, "text": label}`` or
    ``{"image": ..., "box": [x0, y0, x1, y1]}`` answers ``{"masks": [<base64 PNG>, ...]}``.
    """

    def __init__(self, base_url: str, policy: RetryPolicy = RetryPolicy(),
                 transport: httpx.BaseTransport | None = None, sleep=time.sleep):
        self.policy = policy
        self._sleep = sleep
        self._http = httpx.Client(base_url=base_url.rstrip("/"), timeout=policy.timeout, transport=transport)

    @classmethod
    def from_env(cls, **kwargs) -> "HTTPSegmenter":
        url = os.environ.get(ENV_SEG_URL)
        if not url:
            raise ContractViolation(f"set {ENV_SEG_URL} to use the http segmentation backend")
        return cls(url, **kwargs)

    def _post(self, body: dict, shape) -> list[np.ndarray]:
        resp = post_with_retries(self._http, "/segment", body, self.policy, self._sleep)
        try:
            blobs = resp.json()["masks"]
            masks = [np.asarray(Image.open(io.BytesIO(base64.b64decode(b)))) > 0 for b in blobs]
        except (ValueError, KeyError, TypeError, OSError):
            raise ParseError("malformed segmentation payload", raw=resp.text) from None
        masks = [m if m.ndim == 2 else m.any(axis=2) for m in masks]
        for m in masks:
            if m.shape != tuple(shape):
                raise ParseError(f"mask shape {m.shape} does not match image {tuple(shape)}", raw=resp.text)
        return masks

    def segment_by_text(self, frame: Frame, label: str) -> list[np.ndarray]:
        if not label.strip():
            raise ContractViolation("segmentation label must be non-empty")
        return self._post({"image": data_uri(frame.rgb), "text": label}, frame.shape)

    def segment_by_box(self, frame: Frame, box: BoundingBox2D) -> np.ndarray:
        check_positive(box)
        masks = self._post({"image": data_uri(frame.rgb), "box": box.as_list()}, frame.shape)
        if not masks:
            return np.zeros(frame.shape, dtype=bool)
        return np.logical_or.reduce(masks)
