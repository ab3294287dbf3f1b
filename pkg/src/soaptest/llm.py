"""Multi-modal, multi-turn chat abstraction with pluggable backends.

Agents keep their full query-response history and send it with every turn.
Three backends are provided:

* HttpBackend      - OpenAI-compatible chat-completions endpoint.
* PlaybackBackend  - deterministic replay of a recorded transcript; each
                     entry is keyed by (role, turn) and carries a
                     fingerprint of the query, so playback is tamper-evident.
* ScriptedBackend  - canned responses keyed by (role, turn) without
                     fingerprint checks; used to record transcripts in the
                     first place and to drive hermetic end-to-end tests.

Transcript format (JSONL, one record per turn):

    {"role": ..., "turn": ..., "query_fingerprint": ..., "response": ...,
     "query_texts": [...], "image_digests": [...]}

`query_texts`/`image_digests` are audit fields: replay only needs the first
four, but ablation checks and reviews read the query text from the file.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .config import LlmConfig
from .errors import (
    BackendError,
    PromptValidationError,
    SchemaViolation,
    TranscriptExhausted,
    TranscriptMismatch,
)

ROLES = ("planner", "player", "detector")
PROMPT_MARKERS = ("Role Assignment", "Task Description", "Output Guidelines")
SCHEMA_IDS = ("plan", "instruction", "findings", "step_ids")

JSON_NUDGE = (
    "Your previous reply did not match the expected JSON schema. "
    "Respond with valid JSON only, using exactly the fields described in the Output Guidelines."
)


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str
    width: int
    height: int


Part = TextPart | ImagePart


@dataclass(frozen=True)
class MessageParts:
    parts: tuple[Part, ...]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a message needs at least one part")

    @classmethod
    def of(cls, *parts: Part) -> "MessageParts":
        return cls(parts=tuple(parts))

    def text(self) -> str:
        """All text parts joined; what transcripts store as query_texts."""
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))


def fingerprint(parts: MessageParts) -> str:
    """Stable digest of a query: text parts verbatim, images by content hash."""
    h = hashlib.sha256()
    for part in parts.parts:
        if isinstance(part, TextPart):
            h.update(b"text\x00" + part.text.encode("utf-8") + b"\x00")
        else:
            h.update(b"image\x00" + hashlib.sha256(part.data).digest() + b"\x00")
    return h.hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    role: str
    turn: int  # 1-based, per role
    system_prompt: str
    history: tuple[tuple[MessageParts, str], ...]
    parts: MessageParts
    query_fingerprint: str


class ChatBackend(Protocol):
    id: str

    def complete(self, request: ChatRequest) -> str: ...


class DialogueSession:
    """Append-only list of (query, response) records."""

    def __init__(self):
        self._records: list[tuple[MessageParts, str]] = []

    def append(self, parts: MessageParts, response: str) -> None:
        self._records.append((parts, response))

    @property
    def records(self) -> tuple[tuple[MessageParts, str], ...]:
        return tuple(self._records)

    def __len__(self) -> int:
        return len(self._records)


# Called after every completed turn; lets the orchestrator persist transcripts.
TurnObserver = Callable[[str, int, MessageParts, str, str], None]


@dataclass
class AgentHandle:
    role: str
    system_prompt: str
    backend: ChatBackend
    session: DialogueSession = field(default_factory=DialogueSession)
    window_turns: int = 0  # 0 keeps the whole session in context
    observer: TurnObserver | None = None


def create_agent(
    role: str,
    system_prompt: str,
    backend: ChatBackend,
    window_turns: int = 0,
    observer: TurnObserver | None = None,
) -> AgentHandle:
    """Validate the role-play prompt and return a fresh agent handle."""
    if role not in ROLES:
        raise ValueError(f"unknown agent role {role!r}")
    missing = [m for m in PROMPT_MARKERS if m not in system_prompt]
    if missing:
        raise PromptValidationError(f"{role} prompt missing component(s): {', '.join(missing)}")
    return AgentHandle(role=role, system_prompt=system_prompt, backend=backend,
                       window_turns=window_turns, observer=observer)


def query(agent: AgentHandle, parts: MessageParts) -> str:
    """One dialogue turn: send history + parts, record the response."""
    history = agent.session.records
    if agent.window_turns > 0:
        history = history[-agent.window_turns:]
    turn = len(agent.session) + 1
    request = ChatRequest(
        role=agent.role,
        turn=turn,
        system_prompt=agent.system_prompt,
        history=history,
        parts=parts,
        query_fingerprint=fingerprint(parts),
    )
    response = agent.backend.complete(request)
    agent.session.append(parts, response)
    if agent.observer is not None:
        agent.observer(agent.role, turn, parts, request.query_fingerprint, response)
    return response


def query_json(agent: AgentHandle, parts: MessageParts, schema_id: str, retries: int = 2):
    """Query and parse; on schema violations, re-ask with a JSON nudge.

    Every attempt (including failed ones) lands in the session, so
    transcripts show the full exchange.
    """
    attempt_parts = parts
    for attempt in range(retries + 1):
        response = query(agent, attempt_parts)
        try:
            return parse_json_response(response, schema_id)
        except SchemaViolation:
            if attempt == retries:
                raise
            attempt_parts = MessageParts.of(TextPart(JSON_NUDGE))
    raise AssertionError("unreachable")


# --- backends ---------------------------------------------------------------

class HttpBackend:
    """OpenAI-compatible chat-completions client."""

    def __init__(self, config: LlmConfig):
        self.config = config
        self.id = f"http:{config.model}"

    @staticmethod
    def _content(parts: MessageParts):
        import base64

        if len(parts.parts) == 1 and isinstance(parts.parts[0], TextPart):
            return parts.parts[0].text
        content = []
        for part in parts.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            else:
                b64 = base64.b64encode(part.data).decode("ascii")
                content.append({
                    "type": "image_url",
                    "image_url": {"url": f"data:{part.media_type};base64,{b64}"},
                })
        return content

    def complete(self, request: ChatRequest) -> str:
        import requests

        messages = [{"role": "system", "content": request.system_prompt}]
        for parts, response in request.history:
            messages.append({"role": "user", "content": self._content(parts)})
            messages.append({"role": "assistant", "content": response})
        messages.append({"role": "user", "content": self._content(request.parts)})
        try:
            resp = requests.post(
                f"{self.config.base_url.rstrip('/')}/chat/completions",
                headers={"Authorization": f"Bearer {self.config.api_key}"},
                json={"model": self.config.model, "messages": messages},
                timeout=self.config.timeout_s,
            )
        except requests.RequestException as exc:
            raise BackendError(f"chat request failed: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendError(f"malformed chat response: {exc}") from exc


class PlaybackBackend:
    """Replays a recorded transcript; any divergence is an error."""

    def __init__(self, records: dict[tuple[str, int], tuple[str, str]]):
        # (role, turn) -> (query_fingerprint, response)
        self._records = dict(records)
        self.id = "replay"

    @classmethod
    def from_file(cls, path: str | Path) -> "PlaybackBackend":
        records = {}
        for obj in _read_jsonl(path):
            records[(obj["role"], int(obj["turn"]))] = (obj["query_fingerprint"], obj["response"])
        return cls(records)

    def complete(self, request: ChatRequest) -> str:
        key = (request.role, request.turn)
        if key not in self._records:
            raise TranscriptExhausted(f"transcript has no entry for {request.role} turn {request.turn}")
        recorded_fp, response = self._records[key]
        if recorded_fp != request.query_fingerprint:
            raise TranscriptMismatch(
                f"fingerprint mismatch at {request.role} turn {request.turn}: "
                f"recorded {recorded_fp[:12]}.., got {request.query_fingerprint[:12]}.."
            )
        return response


class ScriptedBackend:
    """Canned responses keyed by (role, turn); no fingerprint verification."""

    def __init__(
        self,
        responses: dict[tuple[str, int], str],
        fallback: Callable[[str, int], str] | None = None,
    ):
        self._responses = dict(responses)
        self._fallback = fallback
        self.id = "script"

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        responses = {}
        for obj in _read_jsonl(path):
            responses[(obj["role"], int(obj["turn"]))] = obj["response"]
        return cls(responses)

    def complete(self, request: ChatRequest) -> str:
        key = (request.role, request.turn)
        if key in self._responses:
            return self._responses[key]
        if self._fallback is not None:
            return self._fallback(request.role, request.turn)
        raise TranscriptExhausted(f"script has no entry for {request.role} turn {request.turn}")


class CompositeBackend:
    """Routes each role to its own backend (ablation reruns replay the
    planner/player turns while the detector regenerates)."""

    def __init__(self, by_role: dict[str, ChatBackend]):
        missing = [r for r in ROLES if r not in by_role]
        if missing:
            raise ValueError(f"composite backend missing roles: {missing}")
        self._by_role = dict(by_role)
        self.id = "composite(" + ",".join(f"{r}={b.id}" for r, b in sorted(self._by_role.items())) + ")"

    def complete(self, request: ChatRequest) -> str:
        return self._by_role[request.role].complete(request)


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


# --- JSON response parsing --------------------------------------------------

_FENCE = re.compile(r"^\s*```[a-zA-Z]*\s*\n(.*?)\n?\s*```\s*$", re.DOTALL)


def strip_fences(text: str) -> str:
    match = _FENCE.match(text)
    return match.group(1) if match else text


def _load_object(text: str) -> dict:
    try:
        value = json.loads(strip_fences(text))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(f"response is not valid JSON: {exc.msg}") from exc
    if not isinstance(value, dict):
        raise SchemaViolation("response must be a JSON object")
    return value


def _require(obj: dict, key: str, kind: type, violations: list[str]):
    if key not in obj:
        violations.append(key)
        return None
    if not isinstance(obj[key], kind):
        violations.append(key)
        return None
    return obj[key]


def _string_list(obj: dict, key: str, violations: list[str], required: bool = False) -> list[str]:
    if key not in obj:
        if required:
            violations.append(key)
        return []
    value = obj[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        violations.append(key)
        return []
    return list(value)


def parse_json_response(text: str, schema_id: str):
    """Parse an agent reply against one of the fixed schemas.

    Markdown code fences are stripped first; unknown fields are ignored.
    Raises SchemaViolation listing the missing or ill-typed fields. Values
    that parse successfully always satisfy the target type's invariants.
    """
    if schema_id not in SCHEMA_IDS:
        raise ValueError(f"unknown schema id {schema_id!r}")
    obj = _load_object(text)
    violations: list[str] = []

    if schema_id == "plan":
        from .agents import DONE, Plan

        next_step = _require(obj, "NEXT STEP", str, violations)
        sub_steps = _string_list(obj, "SUB STEPS", violations, required=True)
        if violations:
            raise SchemaViolation(f"plan response invalid: {violations}", fields=violations)
        next_step = next_step.strip()
        if not next_step:
            raise SchemaViolation("plan response invalid: ['NEXT STEP']", fields=["NEXT STEP"])
        if next_step == DONE and sub_steps:
            raise SchemaViolation("DONE plan must carry no sub-steps", fields=["SUB STEPS"])
        if next_step != DONE and not sub_steps:
            raise SchemaViolation("non-DONE plan needs at least one sub-step", fields=["SUB STEPS"])
        return Plan(next_step=next_step, sub_steps=tuple(sub_steps))

    if schema_id == "instruction":
        from .device import UiInstruction

        action = _require(obj, "action", str, violations)
        position = obj.get("position")
        if position is not None and not isinstance(position, int):
            violations.append("position")
        text_arg = obj.get("text")
        if text_arg is not None and not isinstance(text_arg, str):
            violations.append("text")
        direction = obj.get("direction")
        if direction is not None and not isinstance(direction, str):
            violations.append("direction")
        if violations:
            raise SchemaViolation(f"instruction response invalid: {violations}", fields=violations)
        # Action/argument combination rules are enforced by the constructor
        # (InvalidInstruction), not re-asked as a schema retry.
        return UiInstruction(action=action, position=position, text=text_arg, direction=direction)

    if schema_id == "findings":
        from .agents import BugFinding

        raw = _require(obj, "findings", list, violations)
        if violations:
            raise SchemaViolation(f"findings response invalid: {violations}", fields=violations)
        findings = []
        for i, item in enumerate(raw):
            if not isinstance(item, dict):
                raise SchemaViolation(f"finding {i} must be an object", fields=[f"findings[{i}]"])
            inner: list[str] = []
            summary = _require(item, "summary", str, inner)
            s2rs = _string_list(item, "s2rs", inner)
            ebs = _string_list(item, "ebs", inner)
            obs = _string_list(item, "obs", inner)
            violated = []
            for j, vo in enumerate(item.get("violated_oracles", [])):
                if (
                    not isinstance(vo, dict)
                    or not isinstance(vo.get("oracle"), str)
                    or vo.get("origin") not in ("retrieved", "generated")
                ):
                    inner.append(f"violated_oracles[{j}]")
                    continue
                violated.append((vo["oracle"], vo["origin"]))
            if summary is not None and not summary.strip():
                inner.append("summary")
            if inner:
                raise SchemaViolation(f"finding {i} invalid: {inner}", fields=inner)
            findings.append(
                BugFinding(
                    summary=summary.strip(),
                    s2rs=tuple(s2rs),
                    ebs=tuple(ebs),
                    obs=tuple(obs),
                    violated_oracles=tuple(violated),
                )
            )
        return findings

    # step_ids
    raw = _require(obj, "step_ids", list, violations)
    if violations or not all(isinstance(v, int) for v in raw):
        raise SchemaViolation("step_ids response invalid: ['step_ids']", fields=["step_ids"])
    return list(raw)


# --- serializers (round-trip counterparts of parse_json_response) -----------

def plan_to_json(plan) -> str:
    return json.dumps({"NEXT STEP": plan.next_step, "SUB STEPS": list(plan.sub_steps)}, sort_keys=True)


def instruction_to_json(instruction) -> str:
    obj: dict = {"action": instruction.action}
    if instruction.position is not None:
        obj["position"] = instruction.position
    if instruction.text is not None:
        obj["text"] = instruction.text
    if instruction.direction is not None:
        obj["direction"] = instruction.direction
    return json.dumps(obj, sort_keys=True)


def findings_to_json(findings) -> str:
    return json.dumps(
        {
            "findings": [
                {
                    "summary": f.summary,
                    "s2rs": list(f.s2rs),
                    "ebs": list(f.ebs),
                    "obs": list(f.obs),
                    "violated_oracles": [{"oracle": o, "origin": origin} for o, origin in f.violated_oracles],
                }
                for f in findings
            ]
        },
        sort_keys=True,
    )


def step_ids_to_json(step_ids: list[int]) -> str:
    return json.dumps({"step_ids": list(step_ids)})
