"""IOC candidate extraction and purification.

The model reads each paragraph several times (runs differing only in
run index) and proposes typed candidates. A candidate earns one vote
per run that mentions it after normalization; survivors of the vote are
then checked against structural grammars or the domain-knowledge store.
Hallucinated strings tend to be unstable across runs, and
plausible-but-wrong ones (product names, broken IPs) fail the
knowledge check.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import re
from dataclasses import dataclass

from . import knowledge, promptlib
from .gateway import ModelGateway, Prompt
from .ingest import Paragraph
from .knowledge import VectorStore

logger = logging.getLogger(__name__)

IOC_TYPES = (
    "filename",
    "command_line",
    "registry_key",
    "registry_value",
    "ip_address",
    "domain",
    "hash",
)

DEFAULT_RUNS = 5
DEFAULT_VOTE_THRESHOLD = 3

# Voting runs want output diversity; single-shot tasks do not.
VOTING_TEMPERATURE = 0.7

_HASH_RE = re.compile(r"[0-9a-f]{32}|[0-9a-f]{40}|[0-9a-f]{64}")
_DOMAIN_LABEL_RE = re.compile(r"(?!-)[a-z0-9-]{1,63}(?<!-)")
_TLD_RE = re.compile(r"[a-z]{2,}")


@dataclass(frozen=True)
class IocCandidate:
    surface: str
    ioc_type: str
    paragraph_ref: tuple[str, int]  # (report_id, paragraph index)
    run_index: int


@dataclass(frozen=True)
class VoteTally:
    surface: str  # normalized
    ioc_type: str
    votes: int
    runs_total: int
    paragraph_ref: tuple[str, int]
    raw_surfaces: tuple[str, ...]  # distinct surfaces that normalized here, sorted


@dataclass(frozen=True)
class IocRecord:
    canonical: str
    ioc_type: str
    paragraph_ref: tuple[str, int]
    votes: int
    runs_total: int
    status: str  # "retained", "adjusted", or "rejected"
    kb_evidence: dict | None
    reason: str | None

    def to_dict(self) -> dict:
        return {
            "canonical": self.canonical,
            "ioc_type": self.ioc_type,
            "paragraph_ref": list(self.paragraph_ref),
            "votes": self.votes,
            "runs_total": self.runs_total,
            "status": self.status,
            "evidence": self.kb_evidence,
            "reason": self.reason,
        }


def extract_candidates(
    paragraph: Paragraph,
    runs: int,
    gateway: ModelGateway,
    diagnostics: list[str] | None = None,
) -> list[IocCandidate]:
    """Pool candidates from `runs` completions over one paragraph.

    Each response must be a JSON array of {surface, type}; a malformed
    response contributes nothing and is logged, never fatal.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    pooled: list[IocCandidate] = []
    for run_index in range(runs):
        prompt = Prompt(
            task_tag="extract_iocs",
            system_text=promptlib.system_text(),
            user_text=promptlib.render("extract_iocs", paragraph=paragraph.text),
            temperature=VOTING_TEMPERATURE,
            run_index=run_index,
        )
        completion = gateway.complete(prompt)
        pooled.extend(
            _parse_candidates(completion.text, paragraph, run_index, diagnostics)
        )
    return pooled


def _note(diagnostics: list[str] | None, message: str) -> None:
    logger.warning("%s", message)
    if diagnostics is not None:
        diagnostics.append(message)


def _parse_candidates(
    text: str,
    paragraph: Paragraph,
    run_index: int,
    diagnostics: list[str] | None,
) -> list[IocCandidate]:
    where = f"{paragraph.report_id}[{paragraph.index}] run {run_index}"
    try:
        items = json.loads(text)
    except json.JSONDecodeError:
        _note(diagnostics, f"unparseable extraction response at {where}")
        return []
    if not isinstance(items, list):
        _note(diagnostics, f"extraction response is not an array at {where}")
        return []
    out = []
    for item in items:
        if not isinstance(item, dict):
            _note(diagnostics, f"non-object candidate at {where}")
            continue
        surface = item.get("surface")
        ioc_type = str(item.get("type", "")).strip().casefold()
        if not surface or not isinstance(surface, str):
            _note(diagnostics, f"candidate without surface at {where}")
            continue
        if ioc_type not in IOC_TYPES:
            _note(diagnostics, f"unlabeled or unknown-type candidate {surface!r} at {where}")
            continue
        out.append(
            IocCandidate(
                surface=surface,
                ioc_type=ioc_type,
                paragraph_ref=(paragraph.report_id, paragraph.index),
                run_index=run_index,
            )
        )
    return out


def normalize_candidate(candidate: IocCandidate) -> str:
    """Canonical key string for voting.

    Whitespace runs collapse everywhere; case folds everywhere except
    command lines, where case can be part of the behavior described.
    Registry separators collapse to a single backslash.
    """
    surface = re.sub(r"\s+", " ", candidate.surface.strip())
    kind = candidate.ioc_type
    if kind in ("registry_key", "registry_value"):
        while "\\\\" in surface:
            surface = surface.replace("\\\\", "\\")
    if kind != "command_line":
        surface = surface.casefold()
    return surface


def majority_vote(
    candidates: list[IocCandidate], runs: int, threshold: int
) -> list[VoteTally]:
    """Tallies with votes >= threshold, sorted by (votes desc, key asc).

    A vote is one run mentioning the normalized (surface, type) key;
    repeats within a run do not add votes, so pool order and duplicates
    cannot change the result.
    """
    if not 1 <= threshold <= runs:
        raise ValueError(f"threshold {threshold} outside [1, runs={runs}]")
    run_hits: dict[tuple[str, str], set[int]] = {}
    raw_forms: dict[tuple[str, str], set[str]] = {}
    refs: dict[tuple[str, str], tuple[str, int]] = {}
    for candidate in candidates:
        surface = normalize_candidate(candidate)
        if not surface:
            continue
        key = (surface, candidate.ioc_type)
        run_hits.setdefault(key, set()).add(candidate.run_index)
        raw_forms.setdefault(key, set()).add(candidate.surface.strip())
        ref = candidate.paragraph_ref
        if key not in refs or ref < refs[key]:
            refs[key] = ref
    tallies = [
        VoteTally(
            surface=surface,
            ioc_type=ioc_type,
            votes=len(run_hits[(surface, ioc_type)]),
            runs_total=runs,
            paragraph_ref=refs[(surface, ioc_type)],
            raw_surfaces=tuple(sorted(raw_forms[(surface, ioc_type)])),
        )
        for (surface, ioc_type) in run_hits
        if len(run_hits[(surface, ioc_type)]) >= threshold
    ]
    tallies.sort(key=lambda t: (-t.votes, t.surface, t.ioc_type))
    return tallies


def _valid_ip(surface: str) -> bool:
    try:
        ipaddress.ip_address(surface)
        return True
    except ValueError:
        return False


def _valid_domain(surface: str) -> bool:
    if len(surface) > 253 or "." not in surface:
        return False
    labels = surface.split(".")
    if not all(_DOMAIN_LABEL_RE.fullmatch(label) for label in labels):
        return False
    return _TLD_RE.fullmatch(labels[-1]) is not None


def _first_token_names(surface: str) -> list[str]:
    """The command's program token, plus its basename when pathed."""
    token = surface.split(" ", 1)[0].strip("\"'")
    if not token:
        return []
    names = [token]
    base = re.split(r"[\\/]", token)[-1]
    if base and base != token:
        names.append(base)
    return names


def kb_filter(
    tally: VoteTally,
    store: VectorStore,
    gateway: ModelGateway,
    sim_threshold: float = knowledge.DEFAULT_SIMILARITY_THRESHOLD,
) -> IocRecord:
    """Second purification stage: structural grammar or knowledge lookup.

    Hashes, IPs and domains carry their own syntax and are checked
    structurally; host artifacts (filenames, command lines, registry
    names) must ground in the OS knowledge store instead.
    """
    evidence: dict | None = None
    reason: str | None = None
    kind = tally.ioc_type
    surface = tally.surface
    if kind == "hash":
        if _HASH_RE.fullmatch(surface):
            evidence = {"method": "structural", "rule": "hash_grammar"}
        else:
            reason = "hash_grammar"
    elif kind == "ip_address":
        if _valid_ip(surface):
            evidence = {"method": "structural", "rule": "ip_grammar"}
        else:
            reason = "ip_grammar"
    elif kind == "domain":
        if _valid_domain(surface):
            evidence = {"method": "structural", "rule": "domain_grammar"}
        else:
            reason = "domain_grammar"
    elif kind in ("filename", "registry_key", "registry_value"):
        hit = knowledge.probe_knowledge(store, surface, gateway, sim_threshold)
        if hit is not None:
            evidence = hit.to_dict()
        else:
            reason = "kb_miss"
    elif kind == "command_line":
        hit = None
        probed = None
        for name in _first_token_names(surface):
            hit = knowledge.probe_knowledge(store, name, gateway, sim_threshold)
            if hit is not None:
                probed = name
                break
        if hit is not None:
            evidence = hit.to_dict()
            evidence["probed"] = probed
        else:
            reason = "command_format"
    else:
        reason = "unknown_type"
    if evidence is None:
        status = "rejected"
    elif surface in tally.raw_surfaces:
        status = "retained"
    else:
        # No run produced the canonical form verbatim; record the
        # normalization as an adjustment.
        status = "adjusted"
    return IocRecord(
        canonical=surface,
        ioc_type=kind,
        paragraph_ref=tally.paragraph_ref,
        votes=tally.votes,
        runs_total=tally.runs_total,
        status=status,
        kb_evidence=evidence,
        reason=reason,
    )
