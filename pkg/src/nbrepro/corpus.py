"""Repository discovery, validation, and acquisition.

Repositories are probed read-only over the standard git transport, cloned
shallowly, and scanned for notebooks and dependency manifests. Identifiers
are derived from content (URL hash, path hash) so the same repository maps
to the same rows across invocations.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import subprocess
import uuid
from enum import Enum
from pathlib import Path
from urllib.parse import urlparse, urlunparse

from nbrepro import compare, notebook as nbmodel
from nbrepro.notebook import NOTEBOOK_SUFFIX, CellKind
from nbrepro.store import NotebookDescriptor, Repository, Store

logger = logging.getLogger(__name__)

DEFAULT_VALIDATION_TIMEOUT = 30.0
_ALLOWED_SCHEMES = frozenset({"http", "https", "file"})

# Never let git fall back to interactive credential prompts; the probe must
# answer for unauthenticated access only.
_GIT_ENV_OVERRIDES = {
    "GIT_TERMINAL_PROMPT": "0",
    "GIT_ASKPASS": "/bin/true",
    "GIT_CONFIG_NOSYSTEM": "1",
}


class ValidationResult(Enum):
    ACCESSIBLE = "accessible"
    REMOVED_OR_PRIVATE = "removed_or_private"
    MALFORMED = "malformed"


class TransientNetworkError(Exception):
    """Probe or clone interrupted by the network, worth retrying; distinct
    from a repository that answered and said no."""


class AcquisitionError(Exception):
    """Clone failed after a successful validation."""


def _git_env() -> dict[str, str]:
    env = dict(os.environ)
    env.update(_GIT_ENV_OVERRIDES)
    return env


def normalize_url(url: str) -> str:
    """Canonical URL form feeding the repository identifier."""
    parsed = urlparse(url.strip())
    path = parsed.path.rstrip("/")
    if path.endswith(".git"):
        path = path[:-4]
    return urlunparse((parsed.scheme.lower(), parsed.netloc.lower(), path,
                       "", "", ""))


def local_path_to_url(path: str | Path) -> str:
    return Path(path).resolve().as_uri()


def repository_id_for(url: str) -> str:
    digest = hashlib.sha256(normalize_url(url).encode("utf-8")).hexdigest()
    return digest[:16]


def notebook_id_for(repository_id: str, relative_path: str) -> str:
    digest = hashlib.sha256(f"{repository_id}:{relative_path}".encode("utf-8"))
    return digest.hexdigest()[:16]


def new_run_id() -> str:
    return uuid.uuid4().hex[:12]


def validate_repository(url: str,
                        timeout: float = DEFAULT_VALIDATION_TIMEOUT) -> ValidationResult:
    """Read-only existence probe for a remote repository.

    Syntactically broken inputs are malformed; a remote that answers the
    unauthenticated refs listing is accessible; one that refuses is removed
    or private. A timed-out probe raises TransientNetworkError instead of
    being misreported as removed.
    """
    try:
        parsed = urlparse(url.strip())
    except ValueError:
        return ValidationResult.MALFORMED
    if parsed.scheme not in _ALLOWED_SCHEMES:
        return ValidationResult.MALFORMED
    if parsed.scheme == "file":
        if not parsed.path:
            return ValidationResult.MALFORMED
    elif not parsed.netloc or " " in url.strip():
        return ValidationResult.MALFORMED

    try:
        result = subprocess.run(
            ["git", "ls-remote", "--heads", "--", url.strip()],
            capture_output=True, text=True, timeout=timeout, env=_git_env(),
        )
    except subprocess.TimeoutExpired as exc:
        raise TransientNetworkError(f"existence probe timed out for {url}") from exc
    if result.returncode == 0:
        return ValidationResult.ACCESSIBLE
    logger.debug("probe of %s failed: %s", url, result.stderr.strip())
    return ValidationResult.REMOVED_OR_PRIVATE


def find_manifest_paths(tree: Path) -> list[str]:
    """Candidate dependency manifests (any depth), repo-relative, sorted."""
    candidates: list[str] = []
    for name in ("requirements.txt", "setup.py"):
        for found in tree.rglob(name):
            rel = found.relative_to(tree)
            if ".git" in rel.parts:
                continue
            candidates.append(rel.as_posix())
    return sorted(candidates)


def current_revision(tree: Path) -> str | None:
    result = subprocess.run(["git", "-C", str(tree), "rev-parse", "HEAD"],
                            capture_output=True, text=True, env=_git_env())
    return result.stdout.strip() if result.returncode == 0 else None


def acquire_repository(url: str, workdir: Path, store: Store,
                       timeout: float | None = None) -> Repository:
    """Shallow-clone the repository's default branch and persist its row.

    The working tree lands under ``workdir/<repository_id>/tree``; an
    existing tree from a prior invocation is replaced so every run starts
    from a fresh checkout.
    """
    repository_id = repository_id_for(url)
    tree = Path(workdir) / repository_id / "tree"
    if tree.exists():
        shutil.rmtree(tree)
    tree.parent.mkdir(parents=True, exist_ok=True)

    command = ["git", "clone", "--depth", "1", "--quiet", "--", url.strip(), str(tree)]
    try:
        result = subprocess.run(command, capture_output=True, text=True,
                                timeout=timeout, env=_git_env())
    except subprocess.TimeoutExpired as exc:
        raise AcquisitionError(f"clone of {url} timed out") from exc
    if result.returncode != 0:
        raise AcquisitionError(
            f"clone of {url} failed: {result.stderr.strip()[:500]}")

    manifest_paths = find_manifest_paths(tree)
    repo = Repository(
        repository_id=repository_id,
        url=normalize_url(url),
        local_path=str(tree),
        accessible=True,
        has_requirements_file=any(
            Path(p).name == "requirements.txt" for p in manifest_paths),
        notebook_count=0,
        manifest_paths=tuple(manifest_paths),
    )
    store.upsert_repository(repo)
    return repo


def discover_notebooks(repo: Repository, store: Store) -> list[NotebookDescriptor]:
    """One descriptor per notebook file, in deterministic path-sorted order.

    Unparseable notebooks are recorded with the parse-failure flag rather
    than skipped. Each parsed notebook is also scanned for non-determinism
    patterns so corpus prevalence can be reported later without reopening
    files.
    """
    tree = Path(repo.local_path or "")
    descriptors: list[NotebookDescriptor] = []
    paths = sorted(
        p for p in tree.rglob(f"*{NOTEBOOK_SUFFIX}")
        if ".git" not in p.relative_to(tree).parts
    )
    for path in paths:
        relative_path = path.relative_to(tree).as_posix()
        notebook_id = notebook_id_for(repo.repository_id, relative_path)
        try:
            nb = nbmodel.parse_notebook(path.read_bytes())
        except (nbmodel.ParseError, OSError) as exc:
            logger.warning("notebook %s does not parse: %s", relative_path, exc)
            descriptors.append(NotebookDescriptor(
                notebook_id=notebook_id,
                repository_id=repo.repository_id,
                relative_path=relative_path,
                parse_failed=True,
                parse_error=str(exc)[:500],
            ))
            continue
        code = sum(1 for c in nb.cells if c.kind is CellKind.CODE)
        markdown = sum(1 for c in nb.cells if c.kind is CellKind.MARKDOWN)
        descriptors.append(NotebookDescriptor(
            notebook_id=notebook_id,
            repository_id=repo.repository_id,
            relative_path=relative_path,
            kernel_name=nb.kernel_name,
            nbformat_version=nb.nbformat_version,
            code_cell_count=code,
            markdown_cell_count=markdown,
            nondeterministic_pattern_cells=compare.count_pattern_cells(nb),
        ))

    for descriptor in descriptors:
        store.upsert_notebook(descriptor)
    store.set_notebook_count(repo.repository_id, len(descriptors))
    return descriptors
