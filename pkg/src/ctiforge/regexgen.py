"""Regex synthesis with span classification and a tester feedback loop.

Each purified IOC is split into substrings, every substring is probed
against the knowledge store (known strings become capture groups,
unknown attacker-chosen values become non-capture wildcards), and the
model is asked for a regex honoring those roles. Every answer runs
through a mechanical tester; failures feed back into the next prompt,
and a deterministic template takes over when attempts run out, so
synthesis always produces a validated pattern.

Dialect is the SIEM-safe subset: no backreferences, no lookbehind,
case-insensitivity only via a leading (?i).
"""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, replace

from . import knowledge, promptlib
from .errors import UnsupportedType
from .extraction import IocRecord
from .gateway import ModelGateway, Prompt
from .knowledge import VectorStore

DIALECT = "siem-safe"

SPLIT_TYPES = ("command_line", "filename", "registry_key", "registry_value")
LITERAL_TYPES = ("hash", "ip_address", "domain")

# Canonical surfaces for these types were case-folded during
# normalization, so their patterns must tolerate any casing.
CASEFOLDED_TYPES = ("filename", "registry_key", "registry_value", "hash", "domain")

DEFAULT_MAX_ATTEMPTS = 4

MUTANT_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_-"

_FORBIDDEN_CONSTRUCTS = (
    (re.compile(r"\\[1-9]"), "numeric backreference"),
    (re.compile(r"\(\?P="), "named backreference"),
    (re.compile(r"\(\?<[=!]"), "lookbehind"),
)


@dataclass(frozen=True)
class TokenSpan:
    """A substring of an IOC with offsets and a capture role."""

    text: str
    start: int
    end: int
    role: str = "non_capture"  # "capture" or "non_capture"
    evidence: dict | None = None


@dataclass(frozen=True)
class ValidationReport:
    compiled: bool
    matches_original: bool
    matches_mutants: tuple[tuple[str, bool], ...]
    rejects_negatives: tuple[tuple[str, bool], ...]
    verdict: str  # "pass" or "fail"
    failure: str | None  # first failing check, for prompt feedback

    def summary(self) -> dict:
        return {
            "compiled": self.compiled,
            "matches_original": self.matches_original,
            "mutants_passed": sum(1 for _, ok in self.matches_mutants if ok),
            "mutants_total": len(self.matches_mutants),
            "negatives_rejected": sum(1 for _, ok in self.rejects_negatives if ok),
            "negatives_total": len(self.rejects_negatives),
            "verdict": self.verdict,
        }


@dataclass(frozen=True)
class RegexPattern:
    pattern: str
    ioc_ref: str  # canonical IOC surface
    ioc_type: str
    signature: tuple[str, ...]  # capture-span texts, case-folded, in order
    validation: ValidationReport
    attempts: int
    origin: str  # "model", "fallback", or "literal"
    merged_ioc_refs: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "dialect": DIALECT,
            "ioc_type": self.ioc_type,
            "signature": list(self.signature),
            "merged_ioc_refs": list(self.merged_ioc_refs or (self.ioc_ref,)),
            "origin": self.origin,
            "attempts": self.attempts,
            "validation_summary": self.validation.summary(),
        }


def check_spans(original: str, spans: list[TokenSpan]) -> None:
    """Spans must be ordered, non-overlapping slices of the original."""
    prev_end = 0
    for span in spans:
        if span.start < prev_end or span.end > len(original) or span.start >= span.end:
            raise ValueError(f"bad span offsets {span.start}:{span.end} in {original!r}")
        if original[span.start : span.end] != span.text:
            raise ValueError(f"span text {span.text!r} disagrees with offsets")
        if span.role == "capture" and span.evidence is None:
            raise ValueError(f"capture span {span.text!r} lacks evidence")
        prev_end = span.end


def split_ioc(record: IocRecord) -> list[TokenSpan]:
    """Raw substrings with offsets; roles are assigned by classify_spans.

    Command lines split on unquoted spaces, then unquoted tokens split
    again on path separators (a lone leading "/" is a flag, not a
    path). Path-like types split on both separators.
    """
    if record.ioc_type in LITERAL_TYPES:
        raise UnsupportedType(f"{record.ioc_type} takes a literal pattern, not a split")
    if record.ioc_type not in SPLIT_TYPES:
        raise UnsupportedType(f"cannot split ioc_type {record.ioc_type!r}")
    if record.status not in ("retained", "adjusted"):
        raise ValueError(f"cannot split a {record.status} record")
    original = record.canonical
    if record.ioc_type == "command_line":
        spans = []
        for start, end in _command_tokens(original):
            token = original[start:end]
            if token.startswith('"'):
                spans.append(TokenSpan(text=token, start=start, end=end))
            else:
                spans.extend(_split_separators(original, start, end))
        return spans
    return _split_separators(original, 0, len(original))


def _command_tokens(text: str) -> list[tuple[int, int]]:
    tokens = []
    start = None
    in_quote = False
    for i, ch in enumerate(text):
        if ch == '"':
            in_quote = not in_quote
        if ch == " " and not in_quote:
            if start is not None:
                tokens.append((start, i))
                start = None
        elif start is None:
            start = i
    if start is not None:
        tokens.append((start, len(text)))
    return tokens


def _split_separators(text: str, start: int, end: int) -> list[TokenSpan]:
    token = text[start:end]
    if token.startswith("/") and "/" not in token[1:] and "\\" not in token:
        return [TokenSpan(text=token, start=start, end=end)]
    spans = []
    piece_start = start
    for i in range(start, end):
        if text[i] in "\\/":
            if i > piece_start:
                spans.append(TokenSpan(text=text[piece_start:i], start=piece_start, end=i))
            piece_start = i + 1
    if end > piece_start:
        spans.append(TokenSpan(text=text[piece_start:end], start=piece_start, end=end))
    return spans


_SCAFFOLD_EVIDENCE = {"method": "structural", "rule": "quoted_scaffold"}

_SINGLE_QUOTED_RE = re.compile(r"'([^']*)'")


def classify_spans(
    spans: list[TokenSpan],
    store: VectorStore,
    gateway: ModelGateway,
    sim_threshold: float = knowledge.DEFAULT_SIMILARITY_THRESHOLD,
) -> list[TokenSpan]:
    """Probe each substring against the store; hits become captures.

    Quoted argument segments are recursed: key-name scaffolding around
    single-quoted values stays capture, the embedded values are probed
    on their own (and usually end up non-capture).
    """
    if not spans:
        raise ValueError("no spans to classify")
    out: list[TokenSpan] = []
    for span in spans:
        if span.text.startswith('"') and span.text.endswith('"') and len(span.text) >= 2:
            out.extend(_classify_quoted(span, store, gateway, sim_threshold))
        else:
            out.append(_probe_span(span, store, gateway, sim_threshold))
    return out


def _probe_span(
    span: TokenSpan, store: VectorStore, gateway: ModelGateway, sim_threshold: float
) -> TokenSpan:
    hit = knowledge.probe_knowledge(store, span.text, gateway, sim_threshold)
    if hit is None:
        return replace(span, role="non_capture", evidence=None)
    return replace(span, role="capture", evidence=hit.to_dict())


def _classify_quoted(
    span: TokenSpan, store: VectorStore, gateway: ModelGateway, sim_threshold: float
) -> list[TokenSpan]:
    inner = span.text[1:-1]
    values = list(_SINGLE_QUOTED_RE.finditer(inner))
    if not values:
        probed = _probe_span(replace(span, text=inner, start=span.start + 1, end=span.end - 1),
                             store, gateway, sim_threshold)
        # Keep the quotes with the whole segment.
        return [replace(probed, text=span.text, start=span.start, end=span.end)]
    pieces: list[TokenSpan] = []
    base = span.start + 1
    cursor = span.start  # scaffold starts at the opening double quote
    for match in values:
        value_start = base + match.start(1)
        value_end = base + match.end(1)
        if value_start > cursor:
            pieces.append(
                TokenSpan(
                    text=span.text[cursor - span.start : value_start - span.start],
                    start=cursor,
                    end=value_start,
                    role="capture",
                    evidence=dict(_SCAFFOLD_EVIDENCE),
                )
            )
        if value_end > value_start:
            pieces.append(
                _probe_span(
                    TokenSpan(
                        text=span.text[value_start - span.start : value_end - span.start],
                        start=value_start,
                        end=value_end,
                    ),
                    store,
                    gateway,
                    sim_threshold,
                )
            )
        cursor = value_end
    if span.end > cursor:
        pieces.append(
            TokenSpan(
                text=span.text[cursor - span.start :],
                start=cursor,
                end=span.end,
                role="capture",
                evidence=dict(_SCAFFOLD_EVIDENCE),
            )
        )
    return pieces


def _wildcard_for(original: str, span: TokenSpan) -> str:
    prev_char = original[span.start - 1] if span.start > 0 else ""
    next_char = original[span.end] if span.end < len(original) else ""
    if prev_char == "'" and next_char == "'":
        return "[^']+"
    if span.text.startswith('"') and span.text.endswith('"'):
        return '"[^"]*"'
    if prev_char == "\\" or next_char == "\\":
        return r"[^\\]+"
    if prev_char == "/" or next_char == "/":
        return "[^/]+"
    return r"\S+"


def _render_delimiter(delim: str) -> str:
    # Space runs in command lines tolerate any whitespace width; other
    # delimiters must match exactly.
    if delim and set(delim) == {" "}:
        return r"\s+"
    return re.escape(delim)


def build_fallback(record: IocRecord, spans: list[TokenSpan]) -> str:
    """Deterministic template: escape captures, wildcard non-captures."""
    original = record.canonical
    check_spans(original, spans)
    parts = []
    if record.ioc_type in CASEFOLDED_TYPES:
        parts.append("(?i)")
    cursor = 0
    for span in spans:
        if span.start > cursor:
            parts.append(_render_delimiter(original[cursor : span.start]))
        if span.role == "capture":
            parts.append(re.escape(span.text))
        else:
            parts.append(_wildcard_for(original, span))
        cursor = span.end
    if cursor < len(original):
        parts.append(_render_delimiter(original[cursor:]))
    return "".join(parts)


def _dialect_violation(pattern: str) -> str | None:
    for needle, name in _FORBIDDEN_CONSTRUCTS:
        if needle.search(pattern):
            return name
    return None


def _derive_seed(pattern: str, original: str) -> int:
    digest = hashlib.sha256(f"{pattern}\x1f{original}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _random_token(rng: random.Random, length: int) -> str:
    return "".join(rng.choice(MUTANT_ALPHABET) for _ in range(length))


def _substitute(original: str, span: TokenSpan, token: str) -> str:
    if span.text.startswith('"') and span.text.endswith('"'):
        token = f'"{token}"'
    return original[: span.start] + token + original[span.end :]


def _delete_span(original: str, spans: list[TokenSpan], index: int) -> str:
    """Remove a span together with one adjacent delimiter."""
    span = spans[index]
    start, end = span.start, span.end
    if index > 0:
        start = spans[index - 1].end
    elif index + 1 < len(spans):
        end = spans[index + 1].start
    return original[:start] + original[end:]


def non_capture_mutants(
    original: str, spans: list[TokenSpan], count: int, seed: int
) -> list[str]:
    """Seeded random substitutions of non-capture spans, one per mutant."""
    targets = [s for s in spans if s.role == "non_capture"]
    if not targets:
        return []
    rng = random.Random(seed)
    return [
        _substitute(original, rng.choice(targets), _random_token(rng, rng.randint(3, 24)))
        for _ in range(count)
    ]


def validate_regex(
    pattern: str,
    record: IocRecord,
    spans: list[TokenSpan],
    mutants_per_span: int = 2,
    seed: int | None = None,
) -> ValidationReport:
    """Mechanical tester: compile, full-match, mutants match, negatives fail.

    Mutation is seeded from (pattern, IOC) so reports are reproducible
    regardless of execution order.
    """
    check_spans(record.canonical, spans)
    rng = random.Random(_derive_seed(pattern, record.canonical) if seed is None else seed)
    original = record.canonical

    violation = _dialect_violation(pattern)
    compiled_re = None
    if violation is None:
        try:
            compiled_re = re.compile(pattern)
        except re.error as exc:
            violation = f"does not compile: {exc}"
    if compiled_re is None:
        return ValidationReport(
            compiled=False,
            matches_original=False,
            matches_mutants=(),
            rejects_negatives=(),
            verdict="fail",
            failure=f"pattern rejected: {violation}",
        )

    matches_original = compiled_re.fullmatch(original) is not None
    failure = None if matches_original else f"pattern does not full-match the IOC: {original!r}"

    mutants = []
    for span in spans:
        if span.role != "non_capture":
            continue
        short = _substitute(original, span, _random_token(rng, max(3, len(span.text))))
        longer = _substitute(original, span, _random_token(rng, len(span.text) * 2 + 6))
        for _ in range(max(0, mutants_per_span - 2)):
            mutants.append(_substitute(original, span, _random_token(rng, rng.randint(3, 24))))
        mutants.extend([short, longer][:mutants_per_span])
    mutant_results = tuple((m, compiled_re.fullmatch(m) is not None) for m in mutants)
    if failure is None:
        for mutant, ok in mutant_results:
            if not ok:
                failure = f"generalization failed, this variant must also match: {mutant!r}"
                break

    negatives = []
    for i, span in enumerate(spans):
        if span.role != "capture":
            continue
        token = _random_token(rng, max(4, len(span.text)))
        while token.casefold() == span.text.casefold():
            token = _random_token(rng, max(4, len(span.text)))
        negatives.append(_substitute(original, span, token))
        negatives.append(_delete_span(original, spans, i))
    negative_results = tuple(
        (n, compiled_re.fullmatch(n) is None) for n in negatives if n != original
    )
    if failure is None:
        for negative, rejected in negative_results:
            if not rejected:
                failure = f"pattern is too loose, it must NOT match: {negative!r}"
                break

    ok = (
        matches_original
        and all(flag for _, flag in mutant_results)
        and all(flag for _, flag in negative_results)
    )
    return ValidationReport(
        compiled=True,
        matches_original=matches_original,
        matches_mutants=mutant_results,
        rejects_negatives=negative_results,
        verdict="pass" if ok else "fail",
        failure=failure,
    )


def _signature(spans: list[TokenSpan]) -> tuple[str, ...]:
    return tuple(span.text.casefold() for span in spans if span.role == "capture")


def _annotate(spans: list[TokenSpan]) -> str:
    return "\n".join(f"- {span.role}: {span.text}" for span in spans)


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        lines = [ln for ln in text.splitlines() if not ln.startswith("```")]
        text = "\n".join(lines).strip()
    for line in text.splitlines():
        line = line.strip()
        if line:
            return line.strip("`").strip()
    return ""


def synthesize_regex(
    record: IocRecord,
    spans: list[TokenSpan],
    gateway: ModelGateway,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
) -> RegexPattern:
    """Model loop with tester feedback, then the deterministic fallback.

    The fallback guarantees a validated pattern even if the model
    returns garbage every round.
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    check_spans(record.canonical, spans)
    annotations = _annotate(spans)
    previous_pattern = ""
    failure = ""
    for attempt in range(1, max_attempts + 1):
        if attempt == 1:
            user_text = promptlib.render(
                "generate_regex",
                ioc_type=record.ioc_type,
                ioc=record.canonical,
                annotations=annotations,
            )
            tag = "generate_regex"
        else:
            user_text = promptlib.render(
                "refine_regex",
                ioc_type=record.ioc_type,
                ioc=record.canonical,
                annotations=annotations,
                previous_pattern=previous_pattern,
                failure=failure,
            )
            tag = "refine_regex"
        completion = gateway.complete(
            Prompt(task_tag=tag, system_text=promptlib.system_text(), user_text=user_text)
        )
        candidate = _strip_fences(completion.text)
        report = validate_regex(candidate, record, spans)
        if report.verdict == "pass":
            return RegexPattern(
                pattern=candidate,
                ioc_ref=record.canonical,
                ioc_type=record.ioc_type,
                signature=_signature(spans),
                validation=report,
                attempts=attempt,
                origin="model",
                merged_ioc_refs=(record.canonical,),
            )
        previous_pattern = candidate
        failure = report.failure or "validation failed"
    fallback = build_fallback(record, spans)
    report = validate_regex(fallback, record, spans)
    return RegexPattern(
        pattern=fallback,
        ioc_ref=record.canonical,
        ioc_type=record.ioc_type,
        signature=_signature(spans),
        validation=report,
        attempts=max_attempts,
        origin="fallback",
        merged_ioc_refs=(record.canonical,),
    )


def synthesize_literal(record: IocRecord) -> RegexPattern:
    """Escaped literal for hash/IP/domain; hash and domain fold case."""
    if record.ioc_type not in LITERAL_TYPES:
        raise UnsupportedType(f"{record.ioc_type} is not a literal pattern type")
    original = record.canonical
    span = TokenSpan(
        text=original,
        start=0,
        end=len(original),
        role="capture",
        evidence={"method": "structural", "rule": f"{record.ioc_type}_grammar"},
    )
    pattern = re.escape(original)
    if record.ioc_type in CASEFOLDED_TYPES:
        pattern = "(?i)" + pattern
    report = validate_regex(pattern, record, [span])
    return RegexPattern(
        pattern=pattern,
        ioc_ref=original,
        ioc_type=record.ioc_type,
        signature=(original.casefold(),),
        validation=report,
        attempts=0,
        origin="literal",
        merged_ioc_refs=(original,),
    )


def dedup_patterns(patterns: list[RegexPattern]) -> list[RegexPattern]:
    """One representative per (ioc_type, signature); refs merge, sorted.

    The representative is the lexicographically smallest pattern, so
    repeated deduplication is a fixed point.
    """
    groups: dict[tuple[str, tuple[str, ...]], list[RegexPattern]] = {}
    for pattern in patterns:
        groups.setdefault((pattern.ioc_type, pattern.signature), []).append(pattern)
    out = []
    for (_, _), members in groups.items():
        representative = min(members, key=lambda p: p.pattern)
        refs: set[str] = set()
        for member in members:
            refs.update(member.merged_ioc_refs or (member.ioc_ref,))
        out.append(replace(representative, merged_ioc_refs=tuple(sorted(refs))))
    out.sort(key=lambda p: (p.ioc_type, p.signature, p.pattern))
    return out
