"""Report loading and paragraph segmentation.

CTI reports arrive as plain text, markdown, or HTML. They are reduced to
plain text and cut into small paragraphs (3-4 sentences by default), the
unit every downstream model call operates on.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from html.parser import HTMLParser
from pathlib import Path

from .errors import EmptyDocument

FORMAT_PLAIN = "plain"
FORMAT_MARKDOWN = "markdown"
FORMAT_HTML = "html"
FORMATS = (FORMAT_PLAIN, FORMAT_MARKDOWN, FORMAT_HTML)

_SUFFIX_FORMATS = {
    ".txt": FORMAT_PLAIN,
    ".text": FORMAT_PLAIN,
    ".md": FORMAT_MARKDOWN,
    ".markdown": FORMAT_MARKDOWN,
    ".html": FORMAT_HTML,
    ".htm": FORMAT_HTML,
}

# Tokens that end with a period but never end a sentence.
_ABBREVIATIONS = {
    "e.g.", "i.e.", "etc.", "vs.", "cf.", "al.", "ca.", "approx.",
    "fig.", "figs.", "no.", "nos.", "sec.", "ver.", "resp.",
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.",
    "inc.", "ltd.", "corp.", "co.", "dept.", "est.",
    "u.s.", "u.k.", "a.m.", "p.m.",
}

_TERMINALS = ".!?"
_OPENERS = "\"'“”‘’([{"


@dataclass(frozen=True)
class CtiReport:
    """A loaded CTI report, already reduced to plain text."""

    source_id: str
    raw_text: str
    format_hint: str = FORMAT_PLAIN


@dataclass(frozen=True)
class Paragraph:
    """A contiguous run of sentences from one report."""

    report_id: str
    index: int
    text: str
    sentence_count: int


class _HtmlTextExtractor(HTMLParser):
    """Collects document text, dropping markup.

    Contents of <pre>/<code> blocks are kept verbatim (IOCs often live
    there); <script>/<style> bodies are discarded.
    """

    _BLOCK_TAGS = {
        "p", "div", "br", "li", "ul", "ol", "tr", "td", "th", "table",
        "h1", "h2", "h3", "h4", "h5", "h6", "pre", "blockquote", "section",
        "article", "header", "footer", "hr",
    }
    _SKIP_TAGS = {"script", "style"}

    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in self._SKIP_TAGS:
            self._skip_depth += 1
        elif tag in self._BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in self._SKIP_TAGS and self._skip_depth > 0:
            self._skip_depth -= 1
        elif tag in self._BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)

    def text(self) -> str:
        return "".join(self.parts)


def _strip_html(text: str) -> str:
    parser = _HtmlTextExtractor()
    parser.feed(text)
    parser.close()
    return parser.text()


def _strip_markdown(text: str) -> str:
    """Remove common markdown syntax, keeping fenced code contents verbatim.

    Underscores are deliberately left alone: CTI text is full of snake_case
    identifiers that markdown emphasis rules would mangle.
    """
    out_lines = []
    in_fence = False
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.startswith("```") or stripped.startswith("~~~"):
            in_fence = not in_fence
            continue
        if in_fence:
            out_lines.append(line)
            continue
        line = re.sub(r"^\s{0,3}#{1,6}\s*", "", line)
        line = re.sub(r"^\s{0,3}>\s?", "", line)
        line = re.sub(r"^(\s*)[-*+]\s+", r"\1", line)
        line = re.sub(r"^\s{0,3}([-*_])\s*(\1\s*){2,}$", "", line)
        line = re.sub(r"!?\[([^\]]*)\]\([^)]*\)", r"\1", line)
        line = re.sub(r"\*{1,3}([^*]+)\*{1,3}", r"\1", line)
        line = line.replace("`", "")
        out_lines.append(line)
    return "\n".join(out_lines)


def detect_format(path: Path) -> str:
    return _SUFFIX_FORMATS.get(path.suffix.lower(), FORMAT_PLAIN)


def load_report(path, format_hint: str | None = None) -> CtiReport:
    """Load one report file and reduce it to plain text.

    format_hint defaults to a guess from the file suffix. Raises
    FileNotFoundError for a missing file and EmptyDocument when nothing
    but whitespace survives markup stripping. Stray non-UTF-8 bytes are
    replaced rather than fatal.
    """
    path = Path(path)
    if format_hint is None:
        format_hint = detect_format(path)
    if format_hint not in FORMATS:
        raise ValueError(f"unknown format hint: {format_hint!r}")

    raw = path.read_text(encoding="utf-8", errors="replace")
    if format_hint == FORMAT_HTML:
        text = _strip_html(raw)
    elif format_hint == FORMAT_MARKDOWN:
        text = _strip_markdown(raw)
    else:
        text = raw

    text = text.strip()
    if not text:
        raise EmptyDocument(f"{path}: no text content after stripping")
    return CtiReport(source_id=path.stem, raw_text=text, format_hint=format_hint)


def _is_abbreviation(token: str) -> bool:
    token = token.lstrip(_OPENERS).casefold()
    return token in _ABBREVIATIONS


def split_sentences(text: str) -> list[str]:
    """Split plain text into sentences on terminal punctuation.

    A boundary is a run of ``.!?`` followed by whitespace and an
    uppercase letter, digit, or opening quote/bracket. A period wedged
    between word characters (``spools.exe``, ``a.b.c``) never splits,
    and a guarded abbreviation list keeps "e.g." and friends intact.
    """
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch not in _TERMINALS:
            i += 1
            continue
        # consume the whole punctuation run (handles "..." and "?!")
        j = i
        while j + 1 < n and text[j + 1] in _TERMINALS:
            j += 1
        if j + 1 >= n:
            break  # end of text closes the final sentence anyway
        if not text[j + 1].isspace():
            i = j + 1
            continue
        k = j + 1
        while k < n and text[k].isspace():
            k += 1
        if k >= n:
            break
        nxt = text[k]
        if not (nxt.isupper() or nxt.isdigit() or nxt in _OPENERS):
            i = j + 1
            continue
        token_match = re.search(r"\S+$", text[start : j + 1])
        if ch == "." and token_match and _is_abbreviation(token_match.group()):
            i = j + 1
            continue
        sentence = " ".join(text[start : j + 1].split())
        if sentence:
            sentences.append(sentence)
        start = k
        i = k
    tail = " ".join(text[start:].split())
    if tail:
        sentences.append(tail)
    return sentences


def segment_paragraphs(report: CtiReport, target_sentences: int = 4) -> list[Paragraph]:
    """Pack consecutive sentences into paragraphs of target_sentences.

    Greedy: full chunks first, the trailing remainder may be shorter. A
    text with no detectable boundaries becomes one single-sentence
    paragraph.
    """
    if not 3 <= target_sentences <= 4:
        raise ValueError("target_sentences must be 3 or 4")
    sentences = split_sentences(report.raw_text)
    if not sentences:
        return []
    paragraphs = []
    for index, at in enumerate(range(0, len(sentences), target_sentences)):
        chunk = sentences[at : at + target_sentences]
        paragraphs.append(
            Paragraph(
                report_id=report.source_id,
                index=index,
                text=" ".join(chunk),
                sentence_count=len(chunk),
            )
        )
    return paragraphs
