"""Ingest crowd-sourced bug reports / issues / PRs and distill scenarios.

A corpus is either a directory of UTF-8 report files or a single
line-delimited JSON export. Report file format (documented bit-exactly):

    id: <tracker-native id>
    source: bugzilla | github_issue | github_pr | manual
    title: <one line>
    labels: <comma separated, optional>
    <blank line>
    <raw body>

The JSONL export carries one object per line with the same field names
(`body` holds the raw body text).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from .config import CorpusConfig
from .errors import EmptyScenario, FormatError, MalformedReport

logger = logging.getLogger(__name__)

SOURCES = ("bugzilla", "github_issue", "github_pr", "manual")

# Enumerators recognized mid-line ("1. Open Tabs Tray 2. Tap dots") and as
# line prefixes. Periods inside a sentence never split.
_ENUMERATOR = re.compile(r"(?:(?<=\s)|^)\d{1,3}[.)]\s+")
_PREFIX = re.compile(r"^\s*(?:\d{1,3}[.)]|[-*•])\s+")


@dataclass(frozen=True)
class RawReport:
    """One tracker item exactly as ingested."""

    id: str
    source: str
    title: str
    body: str
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise FormatError("report id must be nonempty")
        if self.source not in SOURCES:
            raise FormatError(f"unknown report source {self.source!r}")
        if not self.body and self.source != "manual":
            raise FormatError(f"report {self.id}: body may be empty only for source=manual")


@dataclass(frozen=True)
class SectionMap:
    """Sections recognized in one report; None means the section is absent."""

    title: str
    prerequisites: list[str] | None = None
    s2rs: list[str] | None = None
    ebs: list[str] | None = None
    obs: list[str] | None = None


@dataclass(frozen=True)
class Scenario:
    """One bug report distilled into summary/preconditions/steps/oracles."""

    id: str
    summary: str
    preconditions: tuple[str, ...] = ()
    steps: tuple[str, ...] = ()
    oracles: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.summary:
            raise ValueError("scenario summary must be nonempty")


def normalize_ws(text: str) -> str:
    """Collapse whitespace runs and trim; the only text mutation we apply."""
    return " ".join(text.split())


def split_steps(text: str) -> list[str]:
    """Split step text on newlines and explicit enumerators, stripping prefixes."""
    entries: list[str] = []
    for line in text.splitlines():
        for piece in _ENUMERATOR.split(line):
            piece = normalize_ws(_PREFIX.sub("", piece))
            if piece:
                entries.append(piece)
    return entries


def _normalize_heading(line: str) -> str:
    return line.strip().strip("#*").strip().rstrip(":").strip().lower()


def extract_sections(report: RawReport, config: CorpusConfig | None = None) -> SectionMap:
    """Recognize S2R/EB/OB/prerequisite sections by their headings.

    Raises MalformedReport when the body is not plain text (NUL bytes or
    undecoded surrogates from a binary file).
    """
    config = config or CorpusConfig()
    body = report.body
    if "\x00" in body or any("\ud800" <= ch <= "\udfff" for ch in body):
        raise MalformedReport(f"report {report.id}: body is binary or undecodable")

    heading_kind = {}
    for kind, spellings in config.headings.items():
        for spelling in spellings:
            heading_kind[spelling.lower()] = kind

    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in body.splitlines():
        kind = heading_kind.get(_normalize_heading(line))
        if kind is not None:
            current = kind
            sections.setdefault(current, [])
            # Inline content after the heading colon belongs to the section.
            _, _, tail = line.partition(":")
            if tail.strip():
                sections[current].append(tail)
            continue
        if current is not None:
            sections[current].append(line)

    def collect(kind: str) -> list[str] | None:
        if kind not in sections:
            return None
        return split_steps("\n".join(sections[kind]))

    title = normalize_ws(report.title) or normalize_ws(report.id)
    return SectionMap(
        title=title,
        prerequisites=collect("precondition"),
        s2rs=collect("s2r"),
        ebs=collect("eb"),
        obs=collect("ob"),
    )


def to_scenario(sections: SectionMap, id: str) -> Scenario:
    """Turn a SectionMap into a Scenario; raises EmptyScenario when it holds none."""
    if not sections.title:
        raise ValueError("sections.title must be nonempty")
    steps = [s for entry in (sections.s2rs or []) for s in split_steps(entry)]
    oracles = [normalize_ws(_PREFIX.sub("", o)) for o in (sections.ebs or [])]
    oracles = [o for o in oracles if o]
    if not steps and not oracles:
        raise EmptyScenario(f"report {id}: no steps and no oracles")
    return Scenario(
        id=id,
        summary=sections.title,
        preconditions=tuple(normalize_ws(p) for p in (sections.prerequisites or []) if normalize_ws(p)),
        steps=tuple(steps),
        oracles=tuple(oracles),
    )


def parse_report_file(path: Path) -> RawReport:
    """Parse one front-matter report file."""
    try:
        text = path.read_bytes().decode("utf-8", errors="surrogateescape")
    except OSError as exc:
        raise FormatError(f"cannot read report: {exc}", path=str(path)) from exc
    header: dict[str, str] = {}
    body_lines: list[str] = []
    lines = text.splitlines()
    i = 0
    for i, line in enumerate(lines):
        if not line.strip():
            break
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"expected 'key: value' in front matter, got {line!r}", path=str(path), line=i + 1)
        header[key.strip().lower()] = value.strip()
    else:
        i = len(lines)
    for required in ("id", "source", "title"):
        if required not in header:
            raise FormatError(f"missing front-matter field {required!r}", path=str(path), line=1)
    body = "\n".join(lines[i + 1:]) if i < len(lines) else ""
    labels = tuple(l.strip() for l in header.get("labels", "").split(",") if l.strip())
    try:
        return RawReport(id=header["id"], source=header["source"], title=header["title"], body=body, labels=labels)
    except FormatError as exc:
        raise FormatError(str(exc), path=str(path)) from exc


def _parse_jsonl(path: Path) -> list[RawReport]:
    reports = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno) from exc
            if not isinstance(obj, dict):
                raise FormatError("report line must be an object", path=str(path), line=lineno)
            try:
                reports.append(
                    RawReport(
                        id=str(obj.get("id", "")),
                        source=str(obj.get("source", "")),
                        title=str(obj.get("title", "")),
                        body=str(obj.get("body", "")),
                        labels=tuple(str(l) for l in obj.get("labels", [])),
                    )
                )
            except FormatError as exc:
                raise FormatError(str(exc), path=str(path), line=lineno) from exc
    return reports


def load_reports(path: str | Path) -> list[RawReport]:
    """Load RawReports from a directory or a JSONL export, sorted by id."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"corpus path does not exist: {path}")
    if path.is_dir():
        reports = [parse_report_file(p) for p in sorted(path.iterdir()) if p.is_file()]
    else:
        reports = _parse_jsonl(path)
    seen: set[str] = set()
    for report in reports:
        if report.id in seen:
            raise FormatError(f"duplicate report id {report.id!r}", path=str(path))
        seen.add(report.id)
    return sorted(reports, key=lambda r: r.id)


def load_corpus(path: str | Path, config: CorpusConfig | None = None) -> list[Scenario]:
    """Distill every report under `path` into a Scenario, in sorted-id order.

    Reports without scenario knowledge are skipped with a logged warning;
    undecodable bodies are skipped the same way.
    """
    config = config or CorpusConfig()
    scenarios: list[Scenario] = []
    for report in load_reports(path):
        try:
            scenarios.append(to_scenario(extract_sections(report, config), report.id))
        except EmptyScenario as exc:
            logger.warning("skipped report %s: %s", report.id, exc)
        except MalformedReport as exc:
            logger.warning("skipped report %s: %s", report.id, exc)
    return scenarios
