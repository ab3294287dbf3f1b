"""Scenario Knowledge Graph: normalized steps, attached oracles, retrieval text.

Step descriptions that mean the same thing are merged into one normalized
step: texts whose pairwise embedding similarity reaches the threshold are
treated as connected, and each connected component becomes a step node.
Oracles (expected behaviors) attach to the normalized step of their
scenario's final raw step by default.

The graph persists as one self-describing text file:

    SOAP-SKG v1
    [scenarios] / [steps] / [oracles] / [index]

with one JSON object per line inside each section. The [index] section is
the vectorized retrieval data for the graph (see retrieval module).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RetrievalConfig, SkgConfig
from .corpus import Scenario, normalize_ws
from .errors import UnknownStepId
from .retrieval import Document, Embedder, VectorIndex, build_index, index_from_lines, index_to_lines

FILE_HEADER = "SOAP-SKG v1"


@dataclass(frozen=True)
class NormalizedStep:
    id: int
    canonical: str
    alternatives: tuple[str, ...]  # sorted, includes canonical
    oracle_ids: tuple[int, ...]  # sorted

    def __post_init__(self):
        if self.id <= 0:
            raise ValueError("step id must be positive")
        if self.canonical not in self.alternatives:
            raise ValueError("canonical text must be one of the alternatives")


@dataclass(frozen=True)
class Oracle:
    id: int
    text: str
    step_ids: tuple[int, ...]  # sorted
    source_scenario: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("oracle text must be nonempty")


@dataclass(frozen=True)
class Skg:
    steps: dict[int, NormalizedStep]
    oracles: dict[int, Oracle]
    scenarios: dict[str, Scenario]


def normalize_steps(
    scenarios: list[Scenario],
    embedder: Embedder,
    threshold: float = 0.85,
) -> tuple[list[NormalizedStep], dict[str, int]]:
    """Cluster raw step texts into normalized steps.

    Returns the steps (ids 1..n assigned in canonical-text sort order) and a
    map from each whitespace-normalized raw step text to its step id.
    Clustering is transitive: components of the pairwise threshold graph,
    computed over unique texts in sorted order so the result is independent
    of scenario order.
    """
    counts: dict[str, int] = {}
    for scenario in scenarios:
        for raw in scenario.steps:
            text = normalize_ws(raw)
            if text:
                counts[text] = counts.get(text, 0) + 1
    texts = sorted(counts)
    if not texts:
        return [], {}

    vectors = np.vstack([embedder.embed(t) for t in texts])
    parent = list(range(len(texts)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    sims = vectors @ vectors.T
    for i in range(len(texts)):
        for j in range(i + 1, len(texts)):
            if sims[i, j] >= threshold:
                union(i, j)

    clusters: dict[int, list[str]] = {}
    for i, text in enumerate(texts):
        clusters.setdefault(find(i), []).append(text)

    def canonical_of(members: list[str]) -> str:
        top = max(counts[m] for m in members)
        return min(m for m in members if counts[m] == top)

    ordered = sorted(clusters.values(), key=canonical_of)
    steps = []
    text_to_id: dict[str, int] = {}
    for idx, members in enumerate(ordered, start=1):
        steps.append(
            NormalizedStep(
                id=idx,
                canonical=canonical_of(members),
                alternatives=tuple(sorted(members)),
                oracle_ids=(),
            )
        )
        for member in members:
            text_to_id[member] = idx
    return steps, text_to_id


def build_graph(
    scenarios: list[Scenario],
    embedder: Embedder,
    config: SkgConfig | None = None,
) -> Skg:
    """Normalize steps, then attach each scenario's oracles to its step nodes."""
    config = config or SkgConfig()
    ordered = sorted(scenarios, key=lambda s: s.id)
    steps, text_to_id = normalize_steps(ordered, embedder, config.similarity_threshold)

    oracles: list[Oracle] = []
    step_oracles: dict[int, set[int]] = {s.id: set() for s in steps}
    for scenario in ordered:
        step_ids = [text_to_id[normalize_ws(s)] for s in scenario.steps if normalize_ws(s)]
        if config.attach_all_steps:
            attach_to = sorted(set(step_ids))
        else:
            attach_to = [step_ids[-1]] if step_ids else []
        for text in scenario.oracles:
            oracle = Oracle(
                id=len(oracles) + 1,
                text=normalize_ws(text),
                step_ids=tuple(attach_to),
                source_scenario=scenario.id,
            )
            oracles.append(oracle)
            for sid in attach_to:
                step_oracles[sid].add(oracle.id)

    linked_steps = [replace(s, oracle_ids=tuple(sorted(step_oracles[s.id]))) for s in steps]
    return Skg(
        steps={s.id: s for s in linked_steps},
        oracles={o.id: o for o in oracles},
        scenarios={s.id: s for s in ordered},
    )


def lookup_step(skg: Skg, id: int) -> NormalizedStep:
    try:
        return skg.steps[id]
    except KeyError:
        raise UnknownStepId(f"no step with id {id}") from None


def oracles_for_steps(skg: Skg, ids: list[int]) -> list[Oracle]:
    """Deduplicated union of the steps' oracles, sorted by oracle id."""
    seen: set[int] = set()
    for sid in ids:
        seen.update(lookup_step(skg, sid).oracle_ids)
    return [skg.oracles[oid] for oid in sorted(seen)]


def to_structured_text(skg: Skg) -> list[Document]:
    """Flatten the graph into retrieval documents.

    One document per step node (id, canonical text, alternatives, oracle
    texts) and one per scenario (summary and preconditions as context).
    """
    documents: list[Document] = []
    for sid in sorted(skg.steps):
        step = skg.steps[sid]
        lines = [f"STEP {step.id}", f"Step: {step.canonical}"]
        others = [a for a in step.alternatives if a != step.canonical]
        if others:
            lines.append("Also known as: " + "; ".join(others))
        if step.oracle_ids:
            lines.append("Oracles:")
            lines.extend(f"- {skg.oracles[oid].text}" for oid in step.oracle_ids)
        documents.append(Document(id=f"step:{step.id}", text="\n".join(lines)))
    for scenario_id in sorted(skg.scenarios):
        scenario = skg.scenarios[scenario_id]
        lines = [f"SCENARIO {scenario.id}", f"Summary: {scenario.summary}"]
        if scenario.preconditions:
            lines.append("Preconditions: " + "; ".join(scenario.preconditions))
        documents.append(Document(id=f"scenario:{scenario.id}", text="\n".join(lines)))
    return documents


def vectorize(skg: Skg, embedder: Embedder, retrieval_config: RetrievalConfig | None = None) -> VectorIndex:
    cfg = retrieval_config or RetrievalConfig()
    return build_index(to_structured_text(skg), embedder, cfg.chunk_size, cfg.chunk_overlap)


# --- persistence ------------------------------------------------------------

def save(skg: Skg, index: VectorIndex, path: str | Path) -> None:
    """Write the graph and its vector index to one self-describing file."""
    lines = [FILE_HEADER, "[scenarios]"]
    for sid in sorted(skg.scenarios):
        s = skg.scenarios[sid]
        lines.append(
            json.dumps(
                {
                    "id": s.id,
                    "summary": s.summary,
                    "preconditions": list(s.preconditions),
                    "steps": list(s.steps),
                    "oracles": list(s.oracles),
                },
                sort_keys=True,
            )
        )
    lines.append("[steps]")
    for sid in sorted(skg.steps):
        step = skg.steps[sid]
        lines.append(
            json.dumps(
                {
                    "id": step.id,
                    "canonical": step.canonical,
                    "alternatives": list(step.alternatives),
                    "oracle_ids": list(step.oracle_ids),
                },
                sort_keys=True,
            )
        )
    lines.append("[oracles]")
    for oid in sorted(skg.oracles):
        oracle = skg.oracles[oid]
        lines.append(
            json.dumps(
                {
                    "id": oracle.id,
                    "text": oracle.text,
                    "step_ids": list(oracle.step_ids),
                    "source_scenario": oracle.source_scenario,
                },
                sort_keys=True,
            )
        )
    lines.append("[index]")
    lines.extend(index_to_lines(index))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(path: str | Path) -> tuple[Skg, VectorIndex]:
    """Load a graph file written by `save`; validates the version header."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != FILE_HEADER:
        raise ValueError(f"not a {FILE_HEADER} file: {path}")
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is not None and line:
            sections[current].append(line)

    scenarios = {}
    for line in sections.get("scenarios", []):
        obj = json.loads(line)
        scenarios[obj["id"]] = Scenario(
            id=obj["id"],
            summary=obj["summary"],
            preconditions=tuple(obj["preconditions"]),
            steps=tuple(obj["steps"]),
            oracles=tuple(obj["oracles"]),
        )
    steps = {}
    for line in sections.get("steps", []):
        obj = json.loads(line)
        steps[obj["id"]] = NormalizedStep(
            id=obj["id"],
            canonical=obj["canonical"],
            alternatives=tuple(obj["alternatives"]),
            oracle_ids=tuple(obj["oracle_ids"]),
        )
    oracles = {}
    for line in sections.get("oracles", []):
        obj = json.loads(line)
        oracles[obj["id"]] = Oracle(
            id=obj["id"],
            text=obj["text"],
            step_ids=tuple(obj["step_ids"]),
            source_scenario=obj["source_scenario"],
        )
    index = index_from_lines(sections.get("index", []))
    return Skg(steps=steps, oracles=oracles, scenarios=scenarios), index
