"""Line parser for lmcal's text formats.

Run configs, scene descriptions and region files share one small grammar::

    # Scene: warehouse           <- metadata comment (``# Key: value``)
    @set H=3.0                   <- variable, expanded as ${H}
    @include common.cfg          <- confined under the including file's directory
    voxel_size = 2.0             <- top-level setting
    plane floor                  <- block header (kind + optional name)
        point = 0, 0, -${H}      <- indented block field
        normal = 0 0 1

Everything after an unquoted `` #`` on a value line is a comment. The parser
only produces entries; each format validates its own keys.
"""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .errors import ParseError

__all__ = [
    "Block",
    "Entry",
    "ParseError",
    "ParserResult",
    "expand_vars",
    "is_safe_under_base",
    "normalize_line_endings",
    "parse_bool",
    "parse_file",
    "parse_float",
    "parse_int",
    "parse_text",
    "parse_vector",
]

logger = logging.getLogger(__name__)

_VAR_PATTERN = re.compile(r"\$\{([^}]+)\}")
_META_PATTERN = re.compile(r"^([A-Z][A-Za-z]*):\s*(.*)$")
_MAX_INCLUDE_DEPTH = 16


@dataclass
class Entry:
    """One ``key = value`` line after variable expansion."""

    key: str
    value: str
    line_num: int
    line: str = ""

    def error(self, message: str) -> ParseError:
        return ParseError(self.line_num, f"{self.key}: {message}", self.line.strip())


@dataclass
class Block:
    """A ``kind [name]`` header with its indented fields."""

    kind: str
    name: Optional[str]
    line_num: int
    entries: List[Entry] = field(default_factory=list)

    def get(self, key: str) -> Optional[Entry]:
        found = None
        for entry in self.entries:
            if entry.key == key:
                found = entry
        return found

    def require(self, key: str) -> Entry:
        entry = self.get(key)
        if entry is None:
            raise ParseError(self.line_num, f"{self.kind} block is missing '{key}'")
        return entry

    def keys(self) -> List[str]:
        return [entry.key for entry in self.entries]


@dataclass
class ParserResult:
    """Container for the parser output."""

    metadata: Dict[str, str]
    settings: List[Entry]
    blocks: List[Block]
    variables: Dict[str, str]
    includes: List[Path] = field(default_factory=list)

    def settings_dict(self) -> Dict[str, Entry]:
        """Last assignment wins, so includes placed first act as defaults."""
        return {entry.key: entry for entry in self.settings}


class ParserState:
    """Internal mutable state used while parsing one file."""

    def __init__(self, base_dir: Path, block_kinds: Sequence[str], depth: int = 0):
        self.base_dir = base_dir
        self.block_kinds = set(block_kinds)
        self.depth = depth
        self.meta: Dict[str, str] = {}
        self.vars: Dict[str, str] = {}
        self.settings: List[Entry] = []
        self.blocks: List[Block] = []
        self.includes: List[Path] = []
        self.current_block: Optional[Block] = None


# ---------------------------------------------------------------------------
# Utility helpers


def get_safe_path(path: Path) -> Path:
    try:
        return path.resolve()
    except (OSError, RuntimeError):  # pragma: no cover - fallback path handling
        return path.absolute()


def normalize_line_endings(content: str) -> str:
    return content.replace("\r\n", "\n").replace("\r", "\n")


def expand_vars(value: str, vars_: Dict[str, str]) -> str:
    if not value:
        return value

    def repl(match: re.Match[str]) -> str:
        key = match.group(1)
        return vars_.get(key, match.group(0))

    return _VAR_PATTERN.sub(repl, value)


def is_safe_under_base(path: Path, base_dir: Path) -> bool:
    try:
        base_real = os.path.realpath(str(get_safe_path(base_dir)))
        target_real = os.path.realpath(str(get_safe_path(path)))
        return os.path.commonpath([base_real, target_real]) == base_real
    except (ValueError, OSError):
        return False


def _strip_inline_comment(text: str) -> str:
    index = text.find(" #")
    if index >= 0:
        text = text[:index]
    return text.strip()


# ---------------------------------------------------------------------------
# Value conversion


def parse_float(entry: Entry, *, allow_inf: bool = False) -> float:
    try:
        value = float(entry.value)
    except ValueError:
        raise entry.error(f"expected a number, got '{entry.value}'") from None
    if np.isnan(value) or (np.isinf(value) and not allow_inf):
        raise entry.error(f"value must be finite, got '{entry.value}'")
    return value


def parse_int(entry: Entry) -> int:
    try:
        return int(entry.value)
    except ValueError:
        raise entry.error(f"expected an integer, got '{entry.value}'") from None


def parse_bool(entry: Entry) -> bool:
    lowered = entry.value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise entry.error(f"expected a boolean, got '{entry.value}'")


def parse_vector(entry: Entry, size: int = 3) -> np.ndarray:
    """Comma- or whitespace-separated numbers."""
    parts = [p for p in re.split(r"[,\s]+", entry.value.strip()) if p]
    if len(parts) != size:
        raise entry.error(f"expected {size} components, got {len(parts)}")
    try:
        values = np.array([float(p) for p in parts])
    except ValueError:
        raise entry.error(f"non-numeric component in '{entry.value}'") from None
    if not np.all(np.isfinite(values)):
        raise entry.error("components must be finite")
    return values


# ---------------------------------------------------------------------------
# Parsing implementation


def parse_file(path: Path, block_kinds: Iterable[str] = ()) -> ParserResult:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(0, f"cannot read {path}: {exc}") from exc
    return parse_text(text, base_dir=path.parent, block_kinds=tuple(block_kinds))


def parse_text(
    text: str,
    *,
    base_dir: Path,
    block_kinds: Sequence[str] = (),
    _depth: int = 0,
) -> ParserResult:
    st = ParserState(Path(base_dir), block_kinds, depth=_depth)
    lines = normalize_line_endings(text).split("\n")

    for index, raw in enumerate(lines):
        try:
            _parse_line(raw, index + 1, st)
        except ParseError:
            raise
        except Exception as exc:  # pragma: no cover
            raise ParseError(index + 1, f"Unexpected error: {exc}", raw)

    return ParserResult(
        metadata=st.meta,
        settings=st.settings,
        blocks=st.blocks,
        variables=st.vars,
        includes=st.includes,
    )


def _parse_line(raw: str, line_num: int, st: ParserState) -> None:
    stripped = raw.strip()
    if not stripped:
        return

    if stripped.startswith("#"):
        body = stripped.lstrip("#").strip()
        match = _META_PATTERN.match(body)
        if match and match.group(2):
            st.meta[match.group(1)] = match.group(2).strip()
        return

    if stripped.startswith("@"):
        st.current_block = None
        _handle_directive(stripped, line_num, st)
        return

    indented = raw[:1] in (" ", "\t")
    if indented:
        if st.current_block is None:
            raise ParseError(line_num, "Indented line outside a block", raw)
        st.current_block.entries.append(_parse_assignment(raw, line_num, st))
        return

    header = _strip_inline_comment(stripped)
    head = header.split()[0]
    if head in st.block_kinds and "=" not in header:
        parts = header.split()
        if len(parts) > 2:
            raise ParseError(line_num, f"Invalid {head} header, use: {head} [NAME]", raw)
        name = expand_vars(parts[1], st.vars) if len(parts) == 2 else None
        block = Block(kind=head, name=name, line_num=line_num)
        st.blocks.append(block)
        st.current_block = block
        logger.debug("L%d: %s block %s", line_num, head, name or "")
        return

    st.current_block = None
    st.settings.append(_parse_assignment(raw, line_num, st))


def _parse_assignment(raw: str, line_num: int, st: ParserState) -> Entry:
    body = _strip_inline_comment(raw.strip())
    if "=" not in body:
        raise ParseError(line_num, "Expected 'key = value'", raw)
    key, value = body.split("=", 1)
    key = key.strip()
    if not key or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", key):
        raise ParseError(line_num, f"Invalid key '{key}'", raw)
    value = expand_vars(value.strip(), st.vars)
    if _VAR_PATTERN.search(value):
        raise ParseError(line_num, f"Undefined variable in '{value}'", raw)
    return Entry(key=key, value=value, line_num=line_num, line=raw)


def _handle_directive(line: str, line_num: int, st: ParserState) -> None:
    if line.startswith("@set "):
        body = line[len("@set ") :].strip()
        if "=" not in body:
            raise ParseError(line_num, "Invalid @set syntax, use: @set KEY=VALUE", line)
        key, value = body.split("=", 1)
        st.vars[key.strip()] = expand_vars(_strip_inline_comment(value), st.vars)
        logger.debug("@set %s = %s", key.strip(), st.vars[key.strip()])
        return

    if line.startswith("@include "):
        if st.depth >= _MAX_INCLUDE_DEPTH:
            raise ParseError(line_num, "Include nesting too deep (cycle?)", line)
        inc_file = expand_vars(line[len("@include ") :].strip(), st.vars)
        inc_path = (st.base_dir / inc_file).resolve()
        if not is_safe_under_base(inc_path, st.base_dir):
            raise ParseError(line_num, f"Included file path traversal detected: {inc_file}", line)
        if not inc_path.exists():
            raise ParseError(line_num, f"Included file not found: {inc_file}", line)
        try:
            result = parse_text(
                inc_path.read_text(encoding="utf-8"),
                base_dir=inc_path.parent,
                block_kinds=tuple(st.block_kinds),
                _depth=st.depth + 1,
            )
        except ParseError as err:
            raise ParseError(err.line_num, f"{inc_file}: {err.message}", err.line_content) from err
        st.includes.append(inc_path)
        st.includes.extend(result.includes)
        st.settings.extend(result.settings)
        st.blocks.extend(result.blocks)
        st.vars.update(result.variables)
        for key, value in result.metadata.items():
            st.meta.setdefault(key, value)
        return

    raise ParseError(line_num, f"Unknown directive: {line.split()[0]}", line)
