"""Filesystem checkpoint/metrics store addressed by opaque relative refs."""

from __future__ import annotations

import os
from pathlib import Path, PurePosixPath

from .policy import PolicyParams, checkpoint_bytes, parse_checkpoint


class StoreError(RuntimeError):
    pass


def default_store_root() -> Path:
    return Path(os.environ.get("PG_STORE", "pg_store"))


def atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class CheckpointStore:
    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else default_store_root()

    def path(self, ref: str) -> Path:
        p = PurePosixPath(ref)
        if not ref or p.is_absolute() or ".." in p.parts:
            raise StoreError(f"invalid store ref {ref!r}")
        return self.root.joinpath(*p.parts)

    def exists(self, ref: str) -> bool:
        return self.path(ref).is_file()

    def write_bytes(self, ref: str, data: bytes) -> str:
        try:
            atomic_write(self.path(ref), data)
        except OSError as e:
            raise StoreError(f"cannot write {ref}: {e}") from e
        return ref

    def read_bytes(self, ref: str) -> bytes:
        try:
            return self.path(ref).read_bytes()
        except OSError as e:
            raise StoreError(f"cannot read {ref}: {e}") from e

    def write_text(self, ref: str, text: str) -> str:
        return self.write_bytes(ref, text.encode("utf-8"))

    def read_text(self, ref: str) -> str:
        return self.read_bytes(ref).decode("utf-8")

    def save_params(self, ref: str, params: PolicyParams) -> str:
        return self.write_bytes(ref, checkpoint_bytes(params))

    def load_params(self, ref: str) -> PolicyParams:
        return parse_checkpoint(self.read_bytes(ref))[0]
