"""Cell-level output comparison between committed and re-executed notebooks.

Every code cell gets one of three verdicts: Identical (normalized output
sequences match element-wise), NonDeterministic (outputs differ AND the
cell's source matches a known variability pattern), or Different (the
residual). The reproducibility score is identical cells over total code
cells. Equal outputs always win: a cell full of random calls that happens
to reproduce byte-identically is Identical, which keeps self-comparison at
score 1.0.
"""

from __future__ import annotations

import io
import json
import re
import tokenize
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from nbrepro.notebook import Cell, CellOutput, OutputKind, ParsedNotebook, code_cells

# CSI sequences (colors, cursor moves) and OSC sequences (titles, links).
_ANSI_ESCAPE_RE = re.compile(
    r"\x1b\[[0-9;?]*[ -/]*[@-~]|\x1b\][^\x07\x1b]*(?:\x07|\x1b\\)"
)

# Static sources of run-to-run output variability. Matched against cell
# source with comments and string literals removed. The bare random/uuid
# patterns refuse a preceding dot so np.random.rand() reports np.random
# only, not random.* as well.
NONDETERMINISM_PATTERNS: tuple[tuple[str, re.Pattern[str]], ...] = (
    ("np.random", re.compile(r"\b(?:np|numpy)\.random\b")),
    ("random.*", re.compile(r"(?<![\w.])random\.\w+")),
    ("uuid.*", re.compile(r"(?<![\w.])uuid\.\w+")),
    ("time.time", re.compile(r"(?<![\w.])time\.time\b")),
    ("datetime.now", re.compile(r"\bdatetime\.now\b")),
    ("os.environ", re.compile(r"(?<![\w.])os\.environ\b")),
)

# Media types compared on the raw payload, byte for byte.
_BINARY_MIME_PREFIXES = ("image/", "audio/", "video/")
_BINARY_MIME_EXACT = frozenset({"application/pdf"})
_TEXT_BINARY_EXCEPTIONS = frozenset({"image/svg+xml"})


class Verdict(Enum):
    IDENTICAL = "Identical"
    DIFFERENT = "Different"
    NON_DETERMINISTIC = "NonDeterministic"


class ScoreCategory(Enum):
    POOR = "Poor"
    LOW = "Low"
    MODERATE = "Moderate"
    GOOD = "Good"
    HIGH = "High"
    PERFECT = "Perfect"
    UNSCORED = "Unscored"


class StructuralMismatchError(Exception):
    """The two artifacts disagree on code-cell count; no alignment is guessed."""

    def __init__(self, original_count: int, executed_count: int) -> None:
        super().__init__(
            f"code-cell count mismatch: original has {original_count}, "
            f"executed has {executed_count}"
        )
        self.original_count = original_count
        self.executed_count = executed_count


@dataclass(frozen=True)
class CellComparison:
    """Verdict for one code cell. ``cell_index`` is the position within the
    code-cell sequence, matching the error-record convention.

    ``matched_patterns`` is non-empty exactly when the verdict is
    NonDeterministic.
    """

    cell_index: int
    verdict: Verdict
    matched_patterns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if (self.verdict is Verdict.NON_DETERMINISTIC) != bool(self.matched_patterns):
            raise ValueError(
                "matched_patterns must be non-empty iff verdict is NonDeterministic"
            )


@dataclass(frozen=True)
class ReproducibilityMetrics:
    notebook_id: str
    run_id: str
    identical_count: int
    different_count: int
    nondeterministic_count: int
    identical_indices: tuple[int, ...]
    different_indices: tuple[int, ...]
    nondeterministic_indices: tuple[int, ...]
    total_code_cells: int
    score: float | None

    def __post_init__(self) -> None:
        counts = (self.identical_count, self.different_count,
                  self.nondeterministic_count)
        if counts != (len(self.identical_indices), len(self.different_indices),
                      len(self.nondeterministic_indices)):
            raise ValueError("counts must match index-list lengths")
        if sum(counts) != self.total_code_cells:
            raise ValueError("verdict counts must partition the code cells")


def _normalize_text(text: str) -> str:
    text = _ANSI_ESCAPE_RE.sub("", text)
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    return "\n".join(line.rstrip() for line in text.split("\n"))


def _is_binary_mime(mime: str) -> bool:
    if mime in _TEXT_BINARY_EXCEPTIONS:
        return False
    return mime in _BINARY_MIME_EXACT or mime.startswith(_BINARY_MIME_PREFIXES)


def normalize_output(out: CellOutput) -> str:
    """Canonical comparison text for one output.

    Text-like payloads lose trailing whitespace, terminal escape sequences,
    and line-ending differences; binary payloads (base64 images etc.) are
    kept exact; error outputs reduce to name + value because tracebacks
    embed machine-specific paths. Execution counts never participate.
    """
    if out.kind is OutputKind.ERROR:
        return f"error\n{out.error_name}\n{_normalize_text(out.error_value)}"
    parts = [out.kind.value]
    for mime in sorted(out.payload):
        content = out.payload[mime]
        if not isinstance(content, str):
            rendered = json.dumps(content, sort_keys=True, ensure_ascii=False)
        elif _is_binary_mime(mime):
            rendered = content
        else:
            rendered = _normalize_text(content)
        parts.append(f"{mime}\n{rendered}")
    return "\x00".join(parts)


def strip_comments_and_strings(source: str) -> str:
    """Blank out comments and string literals, preserving line structure.

    Tokenizer-based; when the source does not tokenize (broken cells), a
    line-oriented fallback removes quoted spans and # comments instead.
    """
    spans: list[tuple[int, int, int, int]] = []
    drop_types = {tokenize.STRING, tokenize.COMMENT}
    fstring_middle = getattr(tokenize, "FSTRING_MIDDLE", None)
    if fstring_middle is not None:
        drop_types.add(fstring_middle)
    try:
        for tok in tokenize.generate_tokens(io.StringIO(source).readline):
            if tok.type in drop_types:
                spans.append((*tok.start, *tok.end))
    except (tokenize.TokenError, IndentationError, SyntaxError, ValueError):
        return _strip_literals_fallback(source)

    if not spans:
        return source
    lines = source.split("\n")
    for srow, scol, erow, ecol in spans:
        for row in range(srow - 1, min(erow, len(lines))):
            line = lines[row]
            start = scol if row == srow - 1 else 0
            end = ecol if row == erow - 1 else len(line)
            lines[row] = line[:start] + " " * (end - start) + line[end:]
    return "\n".join(lines)


_FALLBACK_STRING_RE = re.compile(
    r"'''.*?'''|\"\"\".*?\"\"\"|'(?:[^'\\\n]|\\.)*'|\"(?:[^\"\\\n]|\\.)*\"",
    re.DOTALL,
)


def _strip_literals_fallback(source: str) -> str:
    without_strings = _FALLBACK_STRING_RE.sub(" ", source)
    return "\n".join(line.split("#", 1)[0] for line in without_strings.split("\n"))


def detect_nondeterminism(source: str) -> tuple[bool, list[str]]:
    """Whether the cell source calls into known variability sources.

    Returns the matched pattern names; occurrences inside comments or
    string literals do not count.
    """
    stripped = strip_comments_and_strings(source)
    matched = [name for name, pattern in NONDETERMINISM_PATTERNS
               if pattern.search(stripped)]
    return bool(matched), matched


def compare_cell(original: Cell, executed: Cell,
                 cell_index: int | None = None) -> CellComparison:
    """Verdict for one aligned code-cell pair.

    ``cell_index`` defaults to the original cell's document index; metric
    computation passes the code-cell ordinal instead.
    """
    index = original.index if cell_index is None else cell_index
    original_norm = [normalize_output(out) for out in original.outputs]
    executed_norm = [normalize_output(out) for out in executed.outputs]
    if original_norm == executed_norm:
        return CellComparison(cell_index=index, verdict=Verdict.IDENTICAL)
    flagged, patterns = detect_nondeterminism(original.source)
    if flagged:
        return CellComparison(cell_index=index,
                              verdict=Verdict.NON_DETERMINISTIC,
                              matched_patterns=tuple(patterns))
    return CellComparison(cell_index=index, verdict=Verdict.DIFFERENT)


def metrics_from_partition(identical: Iterable[int], different: Iterable[int],
                           nondeterministic: Iterable[int], *,
                           notebook_id: str = "", run_id: str = "") -> ReproducibilityMetrics:
    """Build the metrics row from a verdict partition of code-cell indices."""
    ident = tuple(sorted(identical))
    diff = tuple(sorted(different))
    nondet = tuple(sorted(nondeterministic))
    total = len(ident) + len(diff) + len(nondet)
    score = len(ident) / total if total > 0 else None
    return ReproducibilityMetrics(
        notebook_id=notebook_id,
        run_id=run_id,
        identical_count=len(ident),
        different_count=len(diff),
        nondeterministic_count=len(nondet),
        identical_indices=ident,
        different_indices=diff,
        nondeterministic_indices=nondet,
        total_code_cells=total,
        score=score,
    )


def compare_notebooks(original: ParsedNotebook, executed: ParsedNotebook, *,
                      notebook_id: str = "", run_id: str = ""
                      ) -> tuple[ReproducibilityMetrics, list[CellComparison]]:
    """Compare every code cell pair and compute the metrics row.

    Raises StructuralMismatchError when the artifacts disagree on code-cell
    count; alignment is positional only.
    """
    original_cells = code_cells(original)
    executed_cells = code_cells(executed)
    if len(original_cells) != len(executed_cells):
        raise StructuralMismatchError(len(original_cells), len(executed_cells))

    comparisons = [
        compare_cell(orig, ex, ordinal)
        for ordinal, (orig, ex) in enumerate(zip(original_cells, executed_cells))
    ]
    by_verdict: dict[Verdict, list[int]] = {v: [] for v in Verdict}
    for comparison in comparisons:
        by_verdict[comparison.verdict].append(comparison.cell_index)
    metrics = metrics_from_partition(
        by_verdict[Verdict.IDENTICAL],
        by_verdict[Verdict.DIFFERENT],
        by_verdict[Verdict.NON_DETERMINISTIC],
        notebook_id=notebook_id,
        run_id=run_id,
    )
    return metrics, comparisons


def compute_metrics(original: ParsedNotebook, executed: ParsedNotebook, *,
                    notebook_id: str = "", run_id: str = "") -> ReproducibilityMetrics:
    """Partition every code cell by verdict and score the notebook."""
    metrics, _ = compare_notebooks(original, executed,
                                   notebook_id=notebook_id, run_id=run_id)
    return metrics


def count_pattern_cells(nb: ParsedNotebook) -> int:
    """Code cells whose source matches any variability pattern, independent
    of output verdicts; feeds the corpus-level prevalence metric."""
    return sum(1 for cell in code_cells(nb) if detect_nondeterminism(cell.source)[0])


def categorize_score(score: float | None) -> ScoreCategory:
    """Bin a score into the reporting categories.

    Bins are half-open at the lower edge ([0.0, 0.2) is Poor, 0.2 itself is
    Low, ...) with Perfect reserved for exactly 1.0; an undefined score maps
    to Unscored.
    """
    if score is None:
        return ScoreCategory.UNSCORED
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score out of range: {score}")
    if score == 1.0:
        return ScoreCategory.PERFECT
    if score < 0.2:
        return ScoreCategory.POOR
    if score < 0.4:
        return ScoreCategory.LOW
    if score < 0.6:
        return ScoreCategory.MODERATE
    if score < 0.8:
        return ScoreCategory.GOOD
    return ScoreCategory.HIGH
