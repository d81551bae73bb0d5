"""Update feed directory: one signed package file per update plus ``index.json``.

``index.json`` holds ``{"format": "iotguard-feed-v1", "entries": [...]}`` where
each entry lists ``model, version, reason, update_id, filename, vendor_id``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .protocol import Reason, UpdatePackage

INDEX_NAME = "index.json"
FEED_FORMAT = "iotguard-feed-v1"


class FeedError(Exception):
    pass


@dataclass(frozen=True)
class FeedEntry:
    model: str
    version: str
    reason: str
    update_id: str
    filename: str
    vendor_id: str = ""


def read_index(feed_dir: str | Path) -> list[FeedEntry]:
    path = Path(feed_dir) / INDEX_NAME
    try:
        doc = json.loads(path.read_text())
        if doc.get("format") != FEED_FORMAT:
            raise FeedError(f"{path}: unknown feed format")
        entries = [FeedEntry(**e) for e in doc["entries"]]
        for e in entries:
            Reason(e.reason)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FeedError(f"{path}: {exc}") from None
    return entries


def write_index(feed_dir: str | Path, entries: list[FeedEntry]) -> None:
    path = Path(feed_dir) / INDEX_NAME
    doc = {"format": FEED_FORMAT, "entries": [asdict(e) for e in entries]}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def append_package(feed_dir: str | Path, pkg: UpdatePackage, update_id: str) -> FeedEntry:
    feed_dir = Path(feed_dir)
    feed_dir.mkdir(parents=True, exist_ok=True)
    entries = read_index(feed_dir) if (feed_dir / INDEX_NAME).exists() else []
    if any(e.update_id == update_id for e in entries):
        raise FeedError(f"update id {update_id!r} already published")
    filename = f"{update_id}.pkg"
    (feed_dir / filename).write_bytes(pkg.to_file_bytes())
    entry = FeedEntry(pkg.model, pkg.version, pkg.reason.value, update_id, filename, pkg.vendor_id)
    entries.append(entry)
    write_index(feed_dir, entries)
    return entry


def load_package(feed_dir: str | Path, entry: FeedEntry) -> UpdatePackage:
    try:
        return UpdatePackage.from_file_bytes((Path(feed_dir) / entry.filename).read_bytes())
    except (OSError, ValueError) as exc:
        raise FeedError(f"{entry.filename}: {exc}") from None
