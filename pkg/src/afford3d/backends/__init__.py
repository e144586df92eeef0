"""Model-role interfaces, the HTTP client backends and deterministic mocks."""

from .base import (Backends, BoundingBox2D, Grounder, GroundingRequest, LanguageModel, Segmenter,
                   SelectionRequest, Selector, parse_grounding_response, parse_selection_response)

__all__ = [
    "Backends", "BoundingBox2D", "Grounder", "GroundingRequest", "LanguageModel", "Segmenter",
    "SelectionRequest", "Selector", "make_backends", "parse_grounding_response", "parse_selection_response",
]


def make_backends(name: str, scenario=None, noise: bool = False, max_in_flight: int = 4):
    """Backends for ``--backend`` plus an identifier used in cache keys."""
    import hashlib
    import json
    from pathlib import Path

    from ..errors import ValidationError

    def digest(path):
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]

    if name == "mock-oracle":
        from .mocks import load_scenario, oracle_backends

        if scenario is None:
            raise ValidationError("--backend mock-oracle needs --scenario")
        synth = load_scenario(scenario)
        scen_file = Path(scenario) if Path(scenario).is_file() else Path(scenario) / "scenario.json"
        return oracle_backends(synth, noise=noise), f"mock-oracle:{digest(scen_file)}:{int(noise)}"
    if name == "mock-replay":
        from .mocks import OracleSegmenter, ReplayBackend, load_scenario

        if scenario is None:
            raise ValidationError("--backend mock-replay needs --scenario")
        records = json.loads(Path(scenario).read_text())
        seg = None
        if records.get("segmentation_scenario"):
            seg = OracleSegmenter(load_scenario(Path(scenario).parent / records["segmentation_scenario"]),
                                  noise=noise)
        replay = ReplayBackend(records, seg)
        return Backends(replay, replay, replay, replay), f"mock-replay:{digest(scenario)}:{int(noise)}"
    if name == "http":
        from .http import ChatClient, HTTPGrounder, HTTPLanguageModel, HTTPSegmenter, HTTPSelector

        client = ChatClient.from_env(max_in_flight=max_in_flight)
        return (Backends(HTTPLanguageModel(client), HTTPGrounder(client), HTTPSelector(client),
                         HTTPSegmenter.from_env()), f"http:{client.model}")
    raise ValidationError(f"unknown backend {name!r}")
