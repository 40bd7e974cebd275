"""Source enumeration, incremental sync manifests, and document normalization.

A source connector enumerates files and fetches their bytes; the shipped
connector walks a local directory. Each sync cycle scans the source, diffs
the result against the persisted manifest, and reprocesses only what
changed. Content changes are detected by checksum, with the modification
timestamp as a tie-breaker (timestamps drift across connectors; digests
don't).

Normalization turns raw bytes into ordered text blocks split on blank-line
boundaries. Extractors are registered per MIME type so format converters
can be plugged in later; plain text, markdown, and CSV-as-text ship here.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Protocol, Sequence, Tuple

from .errors import DuplicateFileIdError, ManifestFormatError, SourceUnreachableError

logger = logging.getLogger(__name__)

DIGEST_ALGORITHM = "sha256"
MANIFEST_VERSION = 1

#: MIME types never ingested (shortcut/URL files, scripts, presentations).
DEFAULT_MIME_DENYLIST = frozenset(
    {
        "text/uri-list",
        "application/internet-shortcut",
        "application/vnd.google-apps.script",
        "application/vnd.ms-powerpoint",
        "application/vnd.openxmlformats-officedocument.presentationml.presentation",
    }
)

_EXTENSION_MIME = {
    ".txt": "text/plain",
    ".text": "text/plain",
    ".md": "text/markdown",
    ".markdown": "text/markdown",
    ".csv": "text/csv",
    ".pdf": "application/pdf",
    ".doc": "application/msword",
    ".docx": "application/vnd.openxmlformats-officedocument.wordprocessingml.document",
    ".xls": "application/vnd.ms-excel",
    ".xlsx": "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
    ".url": "text/uri-list",
    ".ppt": "application/vnd.ms-powerpoint",
    ".pptx": "application/vnd.openxmlformats-officedocument.presentationml.presentation",
}


def checksum_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class DocumentRecord:
    file_id: str
    file_name: str
    path: str
    mime_type: str
    modified_at: datetime  # UTC, second precision
    checksum: str
    size_bytes: int

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be non-negative")


@dataclass
class SyncManifest:
    records: Dict[str, DocumentRecord] = field(default_factory=dict)
    snapshot_at: datetime = field(
        default_factory=lambda: datetime.now(timezone.utc).replace(microsecond=0)
    )


@dataclass(frozen=True)
class SyncDelta:
    added: Tuple[DocumentRecord, ...]
    updated: Tuple[DocumentRecord, ...]
    deleted: Tuple[str, ...]

    @property
    def empty(self) -> bool:
        return not (self.added or self.updated or self.deleted)


@dataclass(frozen=True)
class NormalizedDocument:
    file_id: str
    file_name: str
    blocks: Tuple[str, ...]
    extraction_status: str  # "ok" | "failed" | "excluded"
    reason: Optional[str] = None

    @property
    def text(self) -> str:
        return "\n\n".join(self.blocks)


class SourceConnector(Protocol):
    """Minimal contract a document source must satisfy."""

    def list(self) -> List[DocumentRecord]: ...

    def fetch(self, file_id: str) -> bytes: ...


class LocalDirectoryConnector:
    """Connector over a directory tree; file_id is the POSIX relative path."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def list(self) -> List[DocumentRecord]:
        if not self.root.is_dir():
            raise SourceUnreachableError(f"source directory {self.root} does not exist")
        records = []
        for path in sorted(self.root.rglob("*")):
            if not path.is_file():
                continue
            rel = path.relative_to(self.root).as_posix()
            try:
                data = path.read_bytes()
                stat = path.stat()
            except OSError as exc:
                logger.warning("skipping %s: %s", rel, exc)
                continue
            modified = datetime.fromtimestamp(int(stat.st_mtime), tz=timezone.utc)
            records.append(
                DocumentRecord(
                    file_id=rel,
                    file_name=path.name,
                    path=str(path),
                    mime_type=guess_mime_type(path.name),
                    modified_at=modified,
                    checksum=checksum_bytes(data),
                    size_bytes=len(data),
                )
            )
        return records

    def fetch(self, file_id: str) -> bytes:
        return (self.root / file_id).read_bytes()


def guess_mime_type(file_name: str) -> str:
    return _EXTENSION_MIME.get(Path(file_name).suffix.lower(), "application/octet-stream")


def scan_source(connector: SourceConnector) -> List[DocumentRecord]:
    """Enumerate the source, ordered by file_id; duplicate ids are rejected."""
    records = sorted(connector.list(), key=lambda r: r.file_id)
    seen = set()
    for record in records:
        if record.file_id in seen:
            raise DuplicateFileIdError(f"source yielded duplicate file_id {record.file_id!r}")
        seen.add(record.file_id)
    return records


def diff_manifest(old: SyncManifest, new: Sequence[DocumentRecord]) -> SyncDelta:
    """Partition the new scan against the old manifest.

    added: ids only in new; deleted: ids only in old; updated: ids in both
    whose checksum or modified_at differ. Unchanged files appear nowhere, so
    they are never reprocessed.
    """
    new_by_id: Dict[str, DocumentRecord] = {}
    for record in new:
        if record.file_id in new_by_id:
            raise DuplicateFileIdError(f"duplicate file_id {record.file_id!r} in scan")
        new_by_id[record.file_id] = record
    added = [r for fid, r in sorted(new_by_id.items()) if fid not in old.records]
    deleted = [fid for fid in sorted(old.records) if fid not in new_by_id]
    updated = []
    for fid, record in sorted(new_by_id.items()):
        prev = old.records.get(fid)
        if prev is None:
            continue
        if record.checksum != prev.checksum or record.modified_at != prev.modified_at:
            updated.append(record)
    return SyncDelta(added=tuple(added), updated=tuple(updated), deleted=tuple(deleted))


def apply_delta(old: SyncManifest, delta: SyncDelta) -> SyncManifest:
    """The manifest a delta promises: old minus deletions, plus adds/updates."""
    records = dict(old.records)
    for fid in delta.deleted:
        records.pop(fid, None)
    for record in delta.added:
        records[record.file_id] = record
    for record in delta.updated:
        records[record.file_id] = record
    return SyncManifest(records=records, snapshot_at=old.snapshot_at)


# ---------------------------------------------------------------------------
# Manifest persistence (tab-separated, one record per line)
# ---------------------------------------------------------------------------

_TS_FORMAT = "%Y-%m-%dT%H:%M:%S%z"


def _format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_ts(raw: str) -> datetime:
    return datetime.strptime(raw.replace("Z", "+0000"), _TS_FORMAT).astimezone(timezone.utc)


def dump_manifest(manifest: SyncManifest) -> str:
    """Serialize: header line, then sorted tab-separated records."""
    lines = [
        "\t".join(
            ["regkit-manifest", str(MANIFEST_VERSION), DIGEST_ALGORITHM, _format_ts(manifest.snapshot_at)]
        )
    ]
    for fid in sorted(manifest.records):
        r = manifest.records[fid]
        fields = [
            r.file_id,
            r.file_name,
            r.path,
            r.mime_type,
            _format_ts(r.modified_at),
            r.checksum,
            str(r.size_bytes),
        ]
        for value in fields:
            if "\t" in value or "\n" in value:
                raise ManifestFormatError(
                    f"field value {value!r} contains a tab or newline"
                )
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def parse_manifest(text: str) -> SyncManifest:
    lines = text.splitlines()
    if not lines:
        raise ManifestFormatError("empty manifest")
    header = lines[0].split("\t")
    if len(header) != 4 or header[0] != "regkit-manifest":
        raise ManifestFormatError("missing manifest header")
    if header[1] != str(MANIFEST_VERSION):
        raise ManifestFormatError(f"unsupported manifest version {header[1]!r}")
    if header[2] != DIGEST_ALGORITHM:
        raise ManifestFormatError(f"unsupported digest algorithm {header[2]!r}")
    manifest = SyncManifest(snapshot_at=_parse_ts(header[3]))
    for line in lines[1:]:
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise ManifestFormatError(f"bad record line: {line!r}")
        record = DocumentRecord(
            file_id=parts[0],
            file_name=parts[1],
            path=parts[2],
            mime_type=parts[3],
            modified_at=_parse_ts(parts[4]),
            checksum=parts[5],
            size_bytes=int(parts[6]),
        )
        if record.file_id in manifest.records:
            raise ManifestFormatError(f"duplicate file_id {record.file_id!r} in manifest")
        manifest.records[record.file_id] = record
    return manifest


def save_manifest(manifest: SyncManifest, path: str | Path) -> None:
    Path(path).write_text(dump_manifest(manifest), encoding="utf-8")


def load_manifest(path: str | Path) -> SyncManifest:
    return parse_manifest(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Extraction and normalization
# ---------------------------------------------------------------------------

Extractor = Callable[[bytes], str]


def extract_plain_text(data: bytes) -> str:
    return data.decode("utf-8")


_HEADING = re.compile(r"^(#{1,6})\s+(.*)$")


def extract_markdown(data: bytes) -> str:
    """Markdown as text: ATX heading markers stripped, body left verbatim."""
    out = []
    for line in data.decode("utf-8").splitlines():
        m = _HEADING.match(line)
        out.append(m.group(2) if m else line)
    return "\n".join(out)


def extract_csv_text(data: bytes) -> str:
    """CSV as text: one line per row, cells joined with a comma and space."""
    rows = csv.reader(data.decode("utf-8").splitlines())
    return "\n".join(", ".join(cell.strip() for cell in row) for row in rows)


class ExtractorRegistry:
    """MIME type -> extractor mapping plus the deny-list of excluded types."""

    def __init__(self, denylist: Iterable[str] = DEFAULT_MIME_DENYLIST):
        self._extractors: Dict[str, Extractor] = {}
        self.denylist = frozenset(denylist)

    def register(self, mime_type: str, extractor: Extractor) -> None:
        self._extractors[mime_type] = extractor

    def get(self, mime_type: str) -> Optional[Extractor]:
        return self._extractors.get(mime_type)

    @classmethod
    def default(cls) -> "ExtractorRegistry":
        registry = cls()
        registry.register("text/plain", extract_plain_text)
        registry.register("text/markdown", extract_markdown)
        registry.register("text/csv", extract_csv_text)
        return registry


_BLANK_LINE = re.compile(r"\n\s*\n")


def split_blocks(text: str) -> Tuple[str, ...]:
    """Normalize whitespace and split on blank-line boundaries."""
    text = text.replace("\r\n", "\n").replace("\r", "\n")
    blocks = []
    for raw in _BLANK_LINE.split(text):
        lines = [line.rstrip() for line in raw.splitlines()]
        block = "\n".join(lines).strip()
        if block:
            blocks.append(block)
    return tuple(blocks)


def normalize_document(
    record: DocumentRecord, content: bytes, extractors: ExtractorRegistry
) -> NormalizedDocument:
    """Extract text and split into ordered blocks.

    Deny-listed or unregistered MIME types yield status "excluded" (not an
    error); extractor failures and empty content yield status "failed" with
    the reason logged, mirroring the logged-and-excluded posture of the
    ingestion pipeline.
    """

    def result(status: str, blocks: Tuple[str, ...] = (), reason: Optional[str] = None):
        return NormalizedDocument(
            file_id=record.file_id,
            file_name=record.file_name,
            blocks=blocks,
            extraction_status=status,
            reason=reason,
        )

    if record.mime_type in extractors.denylist:
        return result("excluded", reason=f"denied mime type {record.mime_type}")
    extractor = extractors.get(record.mime_type)
    if extractor is None:
        return result("excluded", reason=f"no extractor for {record.mime_type}")
    if not content:
        logger.warning("extraction failed for %s: empty", record.file_id)
        return result("failed", reason="empty")
    try:
        text = extractor(content)
    except Exception as exc:
        logger.warning("extraction failed for %s: %s", record.file_id, exc)
        return result("failed", reason=str(exc))
    blocks = split_blocks(text)
    if not blocks:
        logger.warning("extraction failed for %s: no text blocks", record.file_id)
        return result("failed", reason="no text blocks")
    return result("ok", blocks=blocks)
