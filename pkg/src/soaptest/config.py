"""Configuration: documented defaults, optional YAML file, environment overrides.

Every tunable lives here so runs are reproducible from a single config
snapshot. `load_config()` layers, in order: built-in defaults, a YAML file,
then environment variables (`SOAP_LLM_BASE_URL`, `SOAP_LLM_API_KEY`,
`SOAP_LLM_MODEL`, `ANDROID_SERIAL`).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

DEFAULT_HEADINGS: dict[str, list[str]] = {
    # Bugzilla / GitHub conventions; configurable under corpus.headings.
    "s2r": ["steps to reproduce", "s2r", "s2rs", "str", "reproduce", "steps"],
    "eb": ["expected behavior", "expected behaviour", "expected result", "expected results", "eb", "ebs"],
    "ob": ["actual behavior", "actual behaviour", "actual result", "actual results", "ob", "obs", "observed behavior"],
    "precondition": ["prerequisites", "preconditions", "environment", "affected versions"],
}


@dataclass(frozen=True)
class CorpusConfig:
    headings: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_HEADINGS.items()})


@dataclass(frozen=True)
class SkgConfig:
    similarity_threshold: float = 0.85
    # Oracles attach to the scenario's final step by default; flip to attach
    # them to every step of the scenario.
    attach_all_steps: bool = False


@dataclass(frozen=True)
class RetrievalConfig:
    chunk_size: int = 800
    chunk_overlap: int = 400
    dimension: int = 256
    hybrid_weight: float = 0.5  # weight of the semantic score in hybrid mode
    embedder: str = "hash"  # "hash" or "remote"


@dataclass(frozen=True)
class LlmConfig:
    base_url: str = "https://api.openai.com/v1"
    api_key: str = ""
    model: str = "gpt-4o"
    timeout_s: float = 60.0
    window_turns: int = 0  # 0 = keep the whole dialogue session
    json_retries: int = 2


@dataclass(frozen=True)
class DeviceConfig:
    cell_size: int = 100
    settle_delay_ms: int = 2000
    long_tap_ms: int = 800
    double_tap_gap_ms: int = 150
    scroll_span: float = 0.6
    adb_serial: str = ""
    capture_timeout_s: float = 15.0


@dataclass(frozen=True)
class AgentsConfig:
    planner_k: int = 5  # retrieved step documents per planner query
    detector_k: int = 10  # candidate step documents per oracle retrieval
    oracle_cap: int = 30
    search_mode: str = "hybrid"
    rerank_with_llm: bool = False


@dataclass(frozen=True)
class RunBounds:
    max_substeps_per_step: int = 10
    max_total_instructions: int = 50
    normalize_timestamps: bool = False


@dataclass(frozen=True)
class Config:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    skg: SkgConfig = field(default_factory=SkgConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    llm: LlmConfig = field(default_factory=LlmConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    agents: AgentsConfig = field(default_factory=AgentsConfig)
    run: RunBounds = field(default_factory=RunBounds)


def _merge_section(default, data: dict):
    known = {f.name for f in fields(default)}
    updates = {k: v for k, v in data.items() if k in known}
    return replace(default, **updates)


def config_to_dict(cfg: Config) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def config_from_dict(data: dict) -> Config:
    cfg = Config()
    for section in ("corpus", "skg", "retrieval", "llm", "device", "agents", "run"):
        if section in data:
            cfg = replace(cfg, **{section: _merge_section(getattr(cfg, section), data[section])})
    return cfg


def load_config(path: str | Path | None = None, env: dict[str, str] | None = None) -> Config:
    """Build a Config from defaults, an optional YAML file, and env overrides."""
    cfg = Config()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"config file must contain a mapping: {path}")
        for section in ("corpus", "skg", "retrieval", "llm", "device", "agents", "run"):
            if section in raw:
                if not isinstance(raw[section], dict):
                    raise ValueError(f"config section {section!r} must be a mapping")
                cfg = replace(cfg, **{section: _merge_section(getattr(cfg, section), raw[section])})

    env = os.environ if env is None else env
    llm_updates = {}
    if env.get("SOAP_LLM_BASE_URL"):
        llm_updates["base_url"] = env["SOAP_LLM_BASE_URL"]
    if env.get("SOAP_LLM_API_KEY"):
        llm_updates["api_key"] = env["SOAP_LLM_API_KEY"]
    if env.get("SOAP_LLM_MODEL"):
        llm_updates["model"] = env["SOAP_LLM_MODEL"]
    if llm_updates:
        cfg = replace(cfg, llm=replace(cfg.llm, **llm_updates))
    if env.get("ANDROID_SERIAL"):
        cfg = replace(cfg, device=replace(cfg.device, adb_serial=env["ANDROID_SERIAL"]))
    return cfg
