from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol

logger = logging.getLogger(__name__)

_PATH_PREFIXES = ("/", "./", "../", "~")


@dataclass(frozen=True)
class FetchedInput:
    """
    ``local_path`` is None for identifier-only references (e.g. a hub model id).
    """

    ref: str
    local_path: Optional[Path]


class Storage(Protocol):
    """
    Where flow inputs come from and where results go.
    """

    def fetch(self, ref: str, dest_dir: Path) -> FetchedInput: ...

    def upload(self, src: Path, dest_name: str) -> str: ...


def _looks_like_path(ref: str) -> bool:
    return ref.startswith("file://") or ref.startswith(_PATH_PREFIXES) or Path(ref).exists()


class LocalStorage:
    """
    Filesystem copies. Path-like references must exist; other references
    are treated as identifiers and passed through untouched.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def fetch(self, ref: str, dest_dir: Path) -> FetchedInput:
        if not _looks_like_path(ref):
            return FetchedInput(ref=ref, local_path=None)
        src = Path(ref.removeprefix("file://")).expanduser()
        if not src.exists():
            raise FileNotFoundError(f"cannot fetch {ref}: no such file or directory")
        dest_dir.mkdir(parents=True, exist_ok=True)
        dest = dest_dir / src.name
        if src.is_dir():
            shutil.copytree(src, dest, dirs_exist_ok=True)
        else:
            shutil.copy2(src, dest)
        logger.info("Fetched %s", ref)
        return FetchedInput(ref=ref, local_path=dest)

    def upload(self, src: Path, dest_name: str) -> str:
        """
        Copy ``src`` under the storage root; returns the root-relative path.
        """
        dest = self.root / dest_name
        dest.parent.mkdir(parents=True, exist_ok=True)
        if src.is_dir():
            shutil.copytree(src, dest, dirs_exist_ok=True)
        else:
            shutil.copy2(src, dest)
        logger.info("Uploaded %s", dest_name)
        return Path(dest_name).as_posix()
