"""Content-addressed dataset store with run history, checkpoints, rollback.

All services exchange data through here: producers put whole datasets,
consumers read them back (verified against the content hash on every read)
and project out what they need. The backing layout is a directory of blobs
named by sha-256 plus one append-only index log; nothing ever rewrites a
stored byte, so the full history of a run stays reproducible even across
rollbacks.

Index records, one per line:

    put <run> <activity> <seq> <hash>
    ckpt <run> <activity> <seq> <hash>
    rollback <run> <activity>
    status <run> <status>
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from pathlib import Path

from .errors import RuntimeFailure, UserError
from .quantities import (
    Dataset,
    ParseError,
    canonical_deserialize,
    canonical_serialize,
    merge,
)
from .resources import (
    FAILED,
    SUCCEEDED,
    JobHandle,
    JobRequest,
    JobStatus,
    UnknownJob,
    UsageRecord,
)

__all__ = [
    "ResultKey",
    "RunState",
    "ContentStore",
    "StorageService",
    "StorageError",
    "UnknownKey",
    "UnknownRun",
    "UnknownCheckpoint",
    "IntegrityError",
    "StorageFull",
    "ACTIVE",
    "FAILED_RUN",
    "COMPLETED",
    "ROLLED_BACK",
]


class StorageError(UserError):
    pass


class UnknownKey(StorageError):
    pass


class UnknownRun(StorageError):
    pass


class UnknownCheckpoint(StorageError):
    pass


class IntegrityError(RuntimeFailure):
    """Stored bytes no longer hash to the key they were filed under."""


class StorageFull(RuntimeFailure):
    pass


ACTIVE = "active"
FAILED_RUN = "failed"
COMPLETED = "completed"
ROLLED_BACK = "rolled-back"
_RUN_STATUSES = (ACTIVE, FAILED_RUN, COMPLETED, ROLLED_BACK)


@dataclass(frozen=True)
class ResultKey:
    hash: str
    run_id: str
    activity_id: str
    sequence: int

    def __post_init__(self):
        if self.sequence < 0:
            raise StorageError("sequence must be nonnegative")


@dataclass(frozen=True)
class RunState:
    run_id: str
    checkpoints: tuple[tuple[str, ResultKey], ...]
    status: str

    def latest(self, activity_id: str) -> ResultKey | None:
        for name, key in reversed(self.checkpoints):
            if name == activity_id:
                return key
        return None


class ContentStore:
    """Blob directory plus append-only index, all under one root path."""

    def __init__(self, root, capacity_bytes: int | None = None):
        self.root = Path(root)
        self.blob_dir = self.root / "blobs"
        self.index_path = self.root / "index.log"
        self.capacity_bytes = capacity_bytes
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        if not self.index_path.exists():
            self.index_path.write_text("", encoding="utf-8")
        self._lock = threading.Lock()

    # -- index plumbing ----------------------------------------------------

    def _append(self, *tokens):
        line = " ".join(str(t) for t in tokens)
        with open(self.index_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    def index_lines(self) -> list[str]:
        return self.index_path.read_text(encoding="utf-8").splitlines()

    def _records(self):
        for lineno, line in enumerate(self.index_lines(), start=1):
            tokens = line.split(" ")
            if tokens[0] == "put" or tokens[0] == "ckpt":
                if len(tokens) != 5:
                    raise IntegrityError(f"index line {lineno} malformed: {line!r}")
                yield tokens[0], tokens[1], tokens[2], int(tokens[3]), tokens[4]
            elif tokens[0] == "rollback":
                if len(tokens) != 3:
                    raise IntegrityError(f"index line {lineno} malformed: {line!r}")
                yield "rollback", tokens[1], tokens[2]
            elif tokens[0] == "status":
                if len(tokens) != 3 or tokens[2] not in _RUN_STATUSES:
                    raise IntegrityError(f"index line {lineno} malformed: {line!r}")
                yield "status", tokens[1], tokens[2]
            else:
                raise IntegrityError(f"index line {lineno}: unknown record {tokens[0]!r}")

    # -- core operations ----------------------------------------------------

    def put(self, ds: Dataset, run_id: str, activity_id: str) -> ResultKey:
        blob = canonical_serialize(ds)
        with self._lock:
            if self.capacity_bytes is not None:
                used = sum(p.stat().st_size for p in self.blob_dir.iterdir())
                path = self.blob_dir / ds.id
                extra = 0 if path.exists() else len(blob)
                if used + extra > self.capacity_bytes:
                    raise StorageFull(
                        f"store over capacity: {used + extra} > {self.capacity_bytes} bytes"
                    )
            path = self.blob_dir / ds.id
            if not path.exists():
                tmp = path.with_name(path.name + ".tmp")
                tmp.write_bytes(blob)
                tmp.rename(path)
            seq = self._next_sequence(run_id, activity_id)
            self._append("put", run_id, activity_id, seq, ds.id)
        return ResultKey(ds.id, run_id, activity_id, seq)

    def _next_sequence(self, run_id: str, activity_id: str) -> int:
        seq = 0
        for rec in self._records():
            if rec[0] == "put" and rec[1] == run_id and rec[2] == activity_id:
                seq = max(seq, rec[3] + 1)
            elif rec[0] == "ckpt" and rec[1] == run_id and rec[2] == activity_id:
                seq = max(seq, rec[3] + 1)
        return seq

    def _known(self, key: ResultKey) -> bool:
        for rec in self._records():
            if rec[0] in ("put", "ckpt") and rec[1:] == (
                key.run_id,
                key.activity_id,
                key.sequence,
                key.hash,
            ):
                return True
        return False

    def get(self, key: ResultKey) -> Dataset:
        if not self._known(key):
            raise UnknownKey(f"no such key: {key}")
        return self._read_blob(key.hash)

    def get_by_hash(self, hash: str) -> Dataset:
        path = self.blob_dir / hash
        if not path.exists():
            raise UnknownKey(f"no blob for hash {hash}")
        return self._read_blob(hash)

    def _read_blob(self, hash: str) -> Dataset:
        path = self.blob_dir / hash
        if not path.exists():
            raise UnknownKey(f"no blob for hash {hash}")
        blob = path.read_bytes()
        actual = hashlib.sha256(blob).hexdigest()
        if actual != hash:
            raise IntegrityError(f"blob {hash} corrupted: bytes hash to {actual}")
        try:
            return canonical_deserialize(blob)
        except ParseError as exc:
            raise IntegrityError(f"blob {hash} unparseable: {exc}") from None

    def checkpoint(self, run_id: str, activity_id: str, key: ResultKey) -> RunState:
        with self._lock:
            if not self._known(key):
                raise UnknownKey(f"cannot checkpoint unknown key: {key}")
            self._append("ckpt", run_id, activity_id, key.sequence, key.hash)
        return self.run_state(run_id)

    def rollback(self, run_id: str, to_activity_id: str) -> RunState:
        with self._lock:
            state = self._run_state_unlocked(run_id)
            if not any(name == to_activity_id for name, _ in state.checkpoints):
                raise UnknownCheckpoint(
                    f"run {run_id} has no committed checkpoint for {to_activity_id}"
                )
            self._append("rollback", run_id, to_activity_id)
        return self.run_state(run_id)

    def set_status(self, run_id: str, status: str):
        if status not in _RUN_STATUSES:
            raise StorageError(f"unknown run status: {status}")
        self._run_state_unlocked(run_id)
        self._append("status", run_id, status)

    # -- views ---------------------------------------------------------------

    def run_state(self, run_id: str) -> RunState:
        return self._run_state_unlocked(run_id)

    def _run_state_unlocked(self, run_id: str) -> RunState:
        committed: list[tuple[str, ResultKey]] = []
        status = ACTIVE
        seen = False
        for rec in self._records():
            if rec[1] != run_id:
                continue
            seen = True
            if rec[0] == "ckpt":
                committed.append((rec[2], ResultKey(rec[4], run_id, rec[2], rec[3])))
                if status == ROLLED_BACK:
                    status = ACTIVE
            elif rec[0] == "rollback":
                cut = max(i for i, (name, _) in enumerate(committed) if name == rec[2])
                committed = committed[: cut + 1]
                status = ROLLED_BACK
            elif rec[0] == "status":
                status = rec[2]
        if not seen:
            raise UnknownRun(f"unknown run: {run_id}")
        return RunState(run_id, tuple(committed), status)

    def checkpoints(self, run_id: str) -> tuple[tuple[str, ResultKey], ...]:
        return self.run_state(run_id).checkpoints

    def keys(self, run_id: str) -> list[ResultKey]:
        """Every key ever put for the run, truncated history included."""
        out = []
        seen = False
        for rec in self._records():
            if rec[0] == "put" and rec[1] == run_id:
                out.append(ResultKey(rec[4], run_id, rec[2], rec[3]))
                seen = True
            elif rec[0] != "put" and len(rec) > 1 and rec[1] == run_id:
                seen = True
        if not seen:
            raise UnknownRun(f"unknown run: {run_id}")
        return out

    def runs(self) -> list[str]:
        seen: list[str] = []
        for rec in self._records():
            if rec[1] not in seen:
                seen.append(rec[1])
        return seen

    def audit(self) -> list[str]:
        """Re-hash every blob; returns the list of corrupted hashes."""
        bad = []
        for path in sorted(self.blob_dir.iterdir()):
            if path.suffix == ".tmp":
                continue
            actual = hashlib.sha256(path.read_bytes()).hexdigest()
            if actual != path.name:
                bad.append(path.name)
        return bad


class StorageService:
    """The store behind the same submit/poll surface as compute services.

    A storage job reads each input key, merges the datasets, and files the
    result under the requesting run/activity. Jobs complete synchronously;
    poll just reads back the recorded outcome.
    """

    resource_id = "storage-mediator"

    def __init__(self, store: ContentStore):
        self.store = store
        self._statuses: dict[str, JobStatus] = {}
        self._usage = UsageRecord(self.resource_id)
        self._withdrawn = False
        self._counter = 0

    def submit(self, req: JobRequest) -> JobHandle:
        from .resources import ResourceWithdrawn

        if self._withdrawn:
            raise ResourceWithdrawn(f"resource withdrawn: {self.resource_id}")
        self._counter += 1
        job_id = f"st-{self._counter}"
        self._usage.started += 1
        try:
            inputs = []
            for _slot, hash in req.inputs:
                inputs.append(self.store.get_by_hash(hash))
            merged = merge(inputs) if inputs else Dataset.build([])
            key = self.store.put(merged, req.run_id, req.activity_id)
            status = JobStatus(SUCCEEDED, result=key)
            self._usage.succeeded += 1
        except Exception as exc:  # noqa: BLE001 - reported via job status
            status = JobStatus(FAILED, reason=str(exc))
            self._usage.failed += 1
        self._statuses[job_id] = status
        return JobHandle(job_id, self.resource_id)

    def poll(self, handle: JobHandle) -> JobStatus:
        try:
            return self._statuses[handle.job_id]
        except KeyError:
            raise UnknownJob(f"unknown job: {handle.job_id}") from None

    def withdraw(self, resource_id: str | None = None):
        self._withdrawn = True

    def usage(self, resource_id: str | None = None) -> UsageRecord:
        return self._usage
