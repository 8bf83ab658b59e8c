"""Run directory helpers: CSV emission and the artifact manifest."""

from __future__ import annotations

import csv
from pathlib import Path

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["name", "kind", "path", "seed"]


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class RunDir:
    """Output directory whose files are all listed in ``manifest.csv``."""

    def __init__(self, root, seed: int):
        self.root = Path(root)
        self.seed = seed
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def register(self, name: str, kind: str, path) -> None:
        rel = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        mpath = self.root / MANIFEST
        entries = {r["path"]: r for r in read_csv(mpath)} if mpath.exists() else {}
        entries[rel] = {"name": name, "kind": kind, "path": rel, "seed": str(self.seed)}
        write_csv(mpath, MANIFEST_FIELDS, ([e[f] for f in MANIFEST_FIELDS] for e in entries.values()))

    def manifest(self) -> list:
        mpath = self.root / MANIFEST
        return read_csv(mpath) if mpath.exists() else []
