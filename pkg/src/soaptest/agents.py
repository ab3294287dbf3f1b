"""Planner, Player, and Detector behaviors: query assembly and interpretation.

Query templates (section markers start a line, appear exactly once, in
this order; screenshots sit at the GUI Status marker):

    planner   Steps: / GUI Status: / Retrieved Steps:
    player    Plan: / Sub-step: / GUI Status:
    detector  UI Instruction: / GUI Status: / Retrieved Oracles:

Retrieved sections are filled from the scenario knowledge graph unless the
matching ablation flag disables them, in which case the marker stays and the
section body is left empty ("(none)" for the planner).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

from . import llm, retrieval, skg as skg_mod
from .config import AgentsConfig
from .corpus import normalize_ws
from .device import GuiStatus, UiInstruction
from .errors import EmptyIndex, FormatError, SchemaViolation
from .llm import AgentHandle, ImagePart, MessageParts, TextPart

logger = logging.getLogger(__name__)

DONE = "DONE"


@dataclass(frozen=True)
class SoapOperaTest:
    """A natural-language test: a list of system operation steps."""

    id: str
    app: str
    steps: tuple[str, ...]
    source: str = "manual"

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a soap opera test needs at least one step")


@dataclass(frozen=True)
class Plan:
    next_step: str
    sub_steps: tuple[str, ...]

    def __post_init__(self):
        if self.next_step == DONE and self.sub_steps:
            raise ValueError("a DONE plan carries no sub-steps")
        if self.next_step != DONE and not self.sub_steps:
            raise ValueError("a non-DONE plan needs at least one sub-step")

    @property
    def done(self) -> bool:
        return self.next_step == DONE


@dataclass(frozen=True)
class BugFinding:
    summary: str
    s2rs: tuple[str, ...] = ()
    ebs: tuple[str, ...] = ()
    obs: tuple[str, ...] = ()
    violated_oracles: tuple[tuple[str, str], ...] = ()  # (oracle text, retrieved|generated)
    evidence: tuple[str, str] | None = None  # (before, after) refs inside the run dir

    def __post_init__(self):
        if not self.summary:
            raise ValueError("finding summary must be nonempty")


@dataclass(frozen=True)
class AblationFlags:
    no_step_knowledge: bool = False
    no_oracle_knowledge: bool = False


@dataclass
class KnowledgeBase:
    """SKG plus its vector index, as used by planner and detector retrieval."""

    skg: skg_mod.Skg
    index: retrieval.VectorIndex
    embedder: retrieval.Embedder
    config: AgentsConfig = field(default_factory=AgentsConfig)

    def search_step_docs(self, query: str, k: int) -> list[retrieval.Chunk]:
        """Top-k chunks of step documents for a query, best rank per document."""
        if not self.index.chunks:
            return []
        try:
            ranked = retrieval.search(
                self.index, query, k=len(self.index.chunks),
                mode=self.config.search_mode, embedder=self.embedder,
            )
        except EmptyIndex:
            return []
        picked: list[retrieval.Chunk] = []
        seen_docs: set[str] = set()
        for chunk, _score in ranked:
            if not chunk.doc_id.startswith("step:") or chunk.doc_id in seen_docs:
                continue
            seen_docs.add(chunk.doc_id)
            picked.append(chunk)
            if len(picked) == k:
                break
        return picked


def load_prompt(name: str) -> str:
    return resources.files("soaptest").joinpath(f"assets/prompts/{name}.txt").read_text(encoding="utf-8")


def make_agent(role: str, backend: llm.ChatBackend, window_turns: int = 0,
               observer: llm.TurnObserver | None = None) -> AgentHandle:
    """Create one of the three agents with its shipped role-play prompt."""
    return llm.create_agent(role, load_prompt(f"{role}_system"), backend, window_turns, observer)


# --- planner -----------------------------------------------------------------

def _prior_next_steps(planner: AgentHandle) -> set[str]:
    names: set[str] = set()
    for _parts, response in planner.session.records:
        try:
            plan = llm.parse_json_response(response, "plan")
        except SchemaViolation:
            continue
        if not plan.done:
            names.add(normalize_ws(plan.next_step).lower())
    return names


def pending_steps(planner: AgentHandle, test: SoapOperaTest) -> list[str]:
    """Test steps not yet announced as NEXT STEP in this session."""
    finished = _prior_next_steps(planner)
    remaining = [s for s in test.steps if normalize_ws(s).lower() not in finished]
    return remaining or list(test.steps)


def plan_next(
    planner: AgentHandle,
    test: SoapOperaTest,
    gui: GuiStatus,
    kb: KnowledgeBase | None,
    ablation: AblationFlags = AblationFlags(),
    retries: int = 2,
) -> Plan:
    """Ask the planner for the next step and its actionable sub-steps."""
    if planner.role != "planner":
        raise ValueError("plan_next requires a planner handle")
    steps_block = "\n".join(f"{i}. {s}" for i, s in enumerate(test.steps, start=1))
    if ablation.no_step_knowledge or kb is None:
        knowledge = "(none)"
    else:
        query_text = " ".join(pending_steps(planner, test)) or " ".join(test.steps)
        docs = kb.search_step_docs(query_text, kb.config.planner_k)
        knowledge = "\n\n".join(c.text for c in docs) if docs else "(none)"
    parts = MessageParts.of(
        TextPart(f"Steps:\n{steps_block}\nGUI Status:"),
        ImagePart(gui.image, "image/png", gui.width, gui.height),
        TextPart(f"Retrieved Steps:\n{knowledge}"),
    )
    return llm.query_json(planner, parts, "plan", retries=retries)


# --- player --------------------------------------------------------------------

def render_plan(plan: Plan) -> str:
    lines = [f"NEXT STEP: {plan.next_step}", "SUB STEPS:"]
    lines.extend(f"{i}. {s}" for i, s in enumerate(plan.sub_steps, start=1))
    return "\n".join(lines)


def translate(
    player: AgentHandle,
    plan: Plan,
    sub_step_index: int,
    gui: GuiStatus,
    retries: int = 2,
) -> UiInstruction:
    """Translate one sub-step into a structured UI instruction."""
    if player.role != "player":
        raise ValueError("translate requires a player handle")
    if plan.done:
        raise ValueError("cannot translate a DONE plan")
    if gui.grid is None:
        raise ValueError("translate needs a labeled GUI status")
    sub_step = plan.sub_steps[sub_step_index]
    parts = MessageParts.of(
        TextPart(f"Plan:\n{render_plan(plan)}\nSub-step: {sub_step}\nGUI Status:"),
        ImagePart(gui.grid.overlay_png, "image/png", gui.width, gui.height),
    )
    return llm.query_json(player, parts, "instruction", retries=retries)


# --- detector ------------------------------------------------------------------

def retrieve_oracles(
    kb: KnowledgeBase | None,
    sub_step: str,
    ablation: AblationFlags = AblationFlags(),
    reranker: AgentHandle | None = None,
) -> list[skg_mod.Oracle]:
    """Fetch oracles attached to steps similar to the executed sub-step.

    Never fatal: retrieval trouble degrades to an empty list with a warning.
    """
    if ablation.no_oracle_knowledge or kb is None or not kb.skg.steps:
        return []
    try:
        docs = kb.search_step_docs(sub_step, kb.config.detector_k)
        step_ids = [int(c.doc_id.split(":", 1)[1]) for c in docs]
        if kb.config.rerank_with_llm and reranker is not None and step_ids:
            step_ids = _rerank_step_ids(reranker, sub_step, docs, step_ids)
        oracles = skg_mod.oracles_for_steps(kb.skg, step_ids)
    except Exception as exc:
        logger.warning("oracle retrieval failed, continuing without: %s", exc)
        return []
    return oracles[: kb.config.oracle_cap]


def _rerank_step_ids(
    reranker: AgentHandle,
    sub_step: str,
    docs: list[retrieval.Chunk],
    candidates: list[int],
) -> list[int]:
    prompt = load_prompt("oracle_retrieval_task").format(
        instruction=sub_step,
        candidates="\n\n".join(c.text for c in docs),
    )
    picked = llm.query_json(reranker, MessageParts.of(TextPart(prompt)), "step_ids")
    allowed = set(candidates)
    return [sid for sid in picked if sid in allowed]


def render_oracles(oracles: list[skg_mod.Oracle]) -> str:
    return "\n".join(f"- {o.text}" for o in oracles)


def detect(
    detector: AgentHandle,
    instruction: UiInstruction,
    gui_before: GuiStatus,
    gui_after: GuiStatus,
    sub_step: str,
    oracles: list[skg_mod.Oracle],
    evidence: tuple[str, str] | None = None,
    seen_summaries: set[str] | None = None,
    retries: int = 2,
) -> list[BugFinding]:
    """Run bug detection for one executed instruction.

    Violated-oracle origins are recomputed from the retrieved set (exact
    text match wins over whatever the model claimed). Findings whose
    normalized summary was already reported in this run are suppressed when
    `seen_summaries` is shared across calls.
    """
    if detector.role != "detector":
        raise ValueError("detect requires a detector handle")
    parts = MessageParts.of(
        TextPart(f"UI Instruction: {instruction.render()} (sub-step: {sub_step})\nGUI Status:"),
        ImagePart(gui_before.image, "image/png", gui_before.width, gui_before.height),
        ImagePart(gui_after.image, "image/png", gui_after.width, gui_after.height),
        TextPart("Retrieved Oracles:\n" + render_oracles(oracles)),
    )
    raw_findings = llm.query_json(detector, parts, "findings", retries=retries)

    retrieved_texts = {o.text for o in oracles}
    findings: list[BugFinding] = []
    for finding in raw_findings:
        tagged = tuple(
            (text, "retrieved" if text in retrieved_texts else "generated")
            for text, _claimed in finding.violated_oracles
        )
        finding = replace(finding, violated_oracles=tagged, evidence=evidence)
        key = normalize_ws(finding.summary).lower()
        if seen_summaries is not None:
            if key in seen_summaries:
                logger.info("suppressed duplicate finding: %s", finding.summary)
                continue
            seen_summaries.add(key)
        findings.append(finding)
    return findings


# --- soap opera test files ------------------------------------------------------

def load_test(path: str | Path) -> SoapOperaTest:
    """Read a test file: front-matter (id, app, source) then one step per line."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header: dict[str, str] = {}
    idx = 0
    for idx, line in enumerate(lines):
        if not line.strip():
            break
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"expected 'key: value' in front matter, got {line!r}",
                              path=str(path), line=idx + 1)
        header[key.strip().lower()] = value.strip()
    else:
        idx = len(lines)
    for required in ("id", "app"):
        if required not in header:
            raise FormatError(f"missing front-matter field {required!r}", path=str(path), line=1)
    steps = tuple(normalize_ws(l) for l in lines[idx + 1:] if normalize_ws(l)) if idx < len(lines) else ()
    if not steps:
        raise FormatError("test file lists no steps", path=str(path))
    return SoapOperaTest(id=header["id"], app=header["app"], steps=steps,
                         source=header.get("source", "manual"))
