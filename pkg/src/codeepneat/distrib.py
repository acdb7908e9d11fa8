"""Parallel evaluation harness: a master dispatching assembled networks to
workers over a framed-JSON protocol, with retry, timeout, and a generation
barrier.

Wire format: 4-byte big-endian length prefix + UTF-8 JSON. Message kinds are
REGISTER, JOB, REPORT, HEARTBEAT, and SHUTDOWN. The default backend is an
in-process thread pool speaking the identical message dicts through queues, so
the whole suite runs without networking; the socket transport serves real
worker processes (`codeepneat worker --connect HOST:PORT`).

The master owns all scheduling state in one serialized loop: jobs go to idle
capability-matching workers, time out against an injectable clock, are retried
up to ``max_retries``, and finally resolve to a floor-fitness report so a
generation can never stall on a flaky worker.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from statistics import median
from typing import Any, Callable

from .assembly import import_network
from .evaluator import FITNESS_FLOOR, EvaluationBudget, Evaluator, FitnessReport

logger = logging.getLogger(__name__)

MSG_REGISTER = "REGISTER"
MSG_JOB = "JOB"
MSG_REPORT = "REPORT"
MSG_HEARTBEAT = "HEARTBEAT"
MSG_SHUTDOWN = "SHUTDOWN"

DEFAULT_TIMEOUT_FLOOR = 30.0
DEFAULT_MAX_RETRIES = 2
HEARTBEAT_INTERVAL = 2.0


class NoWorkersError(RuntimeError):
    """Dispatch was asked to run a generation with zero workers."""


class WorkerCrash(Exception):
    """Raised inside a worker to simulate sudden death (fault injection)."""


@dataclass
class EvalJob:
    job_id: str
    payload: bytes
    budget: EvaluationBudget
    attempt: int = 0
    required_kinds: frozenset[str] = frozenset()


@dataclass
class WorkerSession:
    worker_id: str
    capabilities: frozenset[str] | None  # None supports every layer kind
    inflight: str | None = None
    last_heartbeat: float = 0.0


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def encode_message(message: dict[str, Any]) -> bytes:
    body = json.dumps(message, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(body)) + body


def read_message(sock: socket.socket) -> dict[str, Any] | None:
    header = _read_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    body = _read_exact(sock, length)
    if body is None:
        return None
    return json.loads(body.decode())


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = b""
    while len(chunks) < n:
        block = sock.recv(n - len(chunks))
        if not block:
            return None
        chunks += block
    return chunks


def _job_message(job: EvalJob) -> dict[str, Any]:
    return {
        "type": MSG_JOB,
        "job_id": job.job_id,
        "payload": job.payload.decode(),
        "budget": {"epochs": job.budget.epochs, "sample_cap": job.budget.sample_cap,
                   "seed": job.budget.seed},
    }


def _report_message(worker_id: str, report: FitnessReport) -> dict[str, Any]:
    return {"type": MSG_REPORT, "worker_id": worker_id, "job_id": report.network_id,
            "fitness": report.fitness, "diagnostics": report.diagnostics}


def _error_report(worker_id: str, job_id: str, error: str) -> dict[str, Any]:
    return {"type": MSG_REPORT, "worker_id": worker_id, "job_id": job_id, "error": error}


def evaluate_job(evaluator: Evaluator, message: dict[str, Any]) -> dict[str, Any]:
    """Run one JOB message through an evaluator, returning the reply dict.
    Malformed payloads produce a structured error reply, never a crash."""
    job_id = message.get("job_id", "?")
    try:
        net = import_network(message["payload"].encode())
        budget = EvaluationBudget(**message["budget"])
        report = evaluator.evaluate(net, budget)
        report.network_id = job_id
        return _report_message("", report)
    except WorkerCrash:
        raise
    except Exception as exc:  # structured reply; the master decides on retry
        return _error_report("", job_id, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Worker pools (the master-side transport abstraction)
# ---------------------------------------------------------------------------

class LocalWorkerPool:
    """In-process workers on threads, exchanging protocol messages via queues."""

    def __init__(self, evaluator_factory: Callable[[], Evaluator], n_workers: int,
                 heartbeat_interval: float = HEARTBEAT_INTERVAL):
        if n_workers < 1:
            raise NoWorkersError("need at least one worker")
        self.inbox: queue.Queue[dict[str, Any]] = queue.Queue()
        self.expected_workers = n_workers
        self._threads: dict[str, threading.Thread] = {}
        self._mailboxes: dict[str, queue.Queue] = {}
        for i in range(n_workers):
            wid = f"local-{i}"
            mailbox: queue.Queue = queue.Queue()
            thread = threading.Thread(
                target=self._run_worker,
                args=(wid, mailbox, evaluator_factory(), heartbeat_interval),
                daemon=True)
            self._mailboxes[wid] = mailbox
            self._threads[wid] = thread
            thread.start()

    def _run_worker(self, worker_id: str, mailbox: queue.Queue, evaluator: Evaluator,
                    heartbeat_interval: float) -> None:
        caps = sorted(evaluator.supported_kinds) if evaluator.supported_kinds else None
        self.inbox.put({"type": MSG_REGISTER, "worker_id": worker_id, "capabilities": caps})
        while True:
            try:
                message = mailbox.get(timeout=heartbeat_interval)
            except queue.Empty:
                self.inbox.put({"type": MSG_HEARTBEAT, "worker_id": worker_id})
                continue
            if message["type"] == MSG_SHUTDOWN:
                return
            if message["type"] == MSG_JOB:
                try:
                    reply = evaluate_job(evaluator, message)
                except WorkerCrash:
                    logger.debug("worker %s crashed mid-job", worker_id)
                    return
                reply["worker_id"] = worker_id
                self.inbox.put(reply)

    def send(self, worker_id: str, message: dict[str, Any]) -> None:
        self._mailboxes[worker_id].put(message)

    def alive(self, worker_id: str) -> bool:
        return self._threads[worker_id].is_alive()

    def shutdown(self) -> None:
        for wid, thread in self._threads.items():
            self._mailboxes[wid].put({"type": MSG_SHUTDOWN})
        for thread in self._threads.values():
            thread.join(timeout=5.0)


class SocketWorkerPool:
    """Accepts remote workers over TCP and bridges them onto the inbox."""

    def __init__(self, host: str, port: int, expected_workers: int = 1):
        self.inbox: queue.Queue[dict[str, Any]] = queue.Queue()
        self.expected_workers = expected_workers
        self._conns: dict[str, socket.socket] = {}
        self._open: dict[str, bool] = {}
        self._server = socket.create_server((host, port))
        self._server.settimeout(0.2)
        self._accepting = True
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.getsockname()[:2]

    def _accept_loop(self) -> None:
        while self._accepting:
            try:
                conn, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._reader, args=(conn,), daemon=True).start()

    def _reader(self, conn: socket.socket) -> None:
        worker_id = None
        try:
            while True:
                message = read_message(conn)
                if message is None:
                    break
                if message["type"] == MSG_REGISTER:
                    worker_id = message["worker_id"]
                    self._conns[worker_id] = conn
                    self._open[worker_id] = True
                self.inbox.put(message)
        finally:
            if worker_id is not None:
                self._open[worker_id] = False
            conn.close()

    def send(self, worker_id: str, message: dict[str, Any]) -> None:
        try:
            self._conns[worker_id].sendall(encode_message(message))
        except OSError:
            self._open[worker_id] = False

    def alive(self, worker_id: str) -> bool:
        return self._open.get(worker_id, False)

    def shutdown(self) -> None:
        for wid in list(self._conns):
            self.send(wid, {"type": MSG_SHUTDOWN})
        self._accepting = False
        self._server.close()


# ---------------------------------------------------------------------------
# Master dispatch
# ---------------------------------------------------------------------------

def _floor_report(job: EvalJob, reason: str) -> FitnessReport:
    return FitnessReport(job.job_id, FITNESS_FLOOR,
                         {"failed": reason, "attempts": job.attempt + 1})


def dispatch_generation(jobs: list[EvalJob], pool, *,
                        max_retries: int = DEFAULT_MAX_RETRIES,
                        timeout_floor: float = DEFAULT_TIMEOUT_FLOOR,
                        heartbeat_timeout: float = 6 * HEARTBEAT_INTERVAL,
                        clock: Callable[[], float] = time.monotonic,
                        poll: float = 0.01) -> list[FitnessReport]:
    """Resolve every job to exactly one report and only then return (the
    generation barrier). Jobs go to idle workers whose capabilities cover the
    network's layer kinds; lost or timed-out jobs are re-queued until
    ``max_retries``, then floored. Duplicate reports are discarded."""
    if pool.expected_workers < 1:
        raise NoWorkersError("need at least one worker")

    pending: list[EvalJob] = list(jobs)
    sessions: dict[str, WorkerSession] = {}
    registered_ever: set[str] = set()
    inflight: dict[str, tuple[EvalJob, str, float]] = {}
    reports: dict[str, FitnessReport] = {}
    durations: list[float] = []

    def current_timeout() -> float:
        if not durations:
            return timeout_floor
        return max(timeout_floor, 10.0 * median(durations))

    def fail_or_requeue(job: EvalJob, reason: str) -> None:
        if job.attempt + 1 > max_retries:
            reports[job.job_id] = _floor_report(job, reason)
            logger.warning("job %s floored after %d attempts: %s", job.job_id,
                           job.attempt + 1, reason)
        else:
            pending.append(EvalJob(job.job_id, job.payload, job.budget,
                                   attempt=job.attempt + 1,
                                   required_kinds=job.required_kinds))

    while len(reports) < len(jobs):
        try:
            message = pool.inbox.get(timeout=poll)
        except queue.Empty:
            message = None

        if message is not None:
            kind = message["type"]
            if kind == MSG_REGISTER:
                caps = message.get("capabilities")
                wid = message["worker_id"]
                sessions[wid] = WorkerSession(
                    wid, frozenset(caps) if caps is not None else None,
                    last_heartbeat=clock())
                registered_ever.add(wid)
            elif kind == MSG_HEARTBEAT:
                if message["worker_id"] in sessions:
                    sessions[message["worker_id"]].last_heartbeat = clock()
            elif kind == MSG_REPORT:
                job_id = message["job_id"]
                worker_id = message.get("worker_id", "")
                if worker_id in sessions:
                    sessions[worker_id].inflight = None
                    sessions[worker_id].last_heartbeat = clock()
                if job_id in reports:
                    logger.warning("duplicate report for job %s discarded", job_id)
                else:
                    # The job is inflight, or back in the queue after a timeout
                    # (a late report from the first attempt still counts).
                    entry = inflight.pop(job_id, None)
                    if entry is not None:
                        job, _, started = entry
                    else:
                        slot = next((i for i, j in enumerate(pending) if j.job_id == job_id), None)
                        if slot is None:
                            logger.warning("report for unknown job %s discarded", job_id)
                            continue
                        job, started = pending.pop(slot), None
                    if "error" in message:
                        fail_or_requeue(job, message["error"])
                    else:
                        if started is not None:
                            durations.append(clock() - started)
                        reports[job_id] = FitnessReport(job_id, message["fitness"],
                                                        dict(message.get("diagnostics", {})))

        # Reap dead or silent workers and time out overdue jobs.
        now = clock()
        timeout = current_timeout()
        for wid in list(sessions):
            if not pool.alive(wid) or now - sessions[wid].last_heartbeat > heartbeat_timeout:
                del sessions[wid]
                for job_id, (job, worker, _) in list(inflight.items()):
                    if worker == wid:
                        del inflight[job_id]
                        fail_or_requeue(job, "worker lost")
        for job_id, (job, worker, started) in list(inflight.items()):
            if now - started > timeout:
                del inflight[job_id]
                if worker in sessions:
                    sessions[worker].inflight = None
                fail_or_requeue(job, "timeout")

        # Assign pending jobs to idle, capable workers.
        for session in sorted((s for s in sessions.values() if s.inflight is None),
                              key=lambda s: s.worker_id):
            slot = next((i for i, job in enumerate(pending)
                         if session.capabilities is None
                         or job.required_kinds <= session.capabilities), None)
            if slot is None:
                continue
            job = pending.pop(slot)
            session.inflight = job.job_id
            inflight[job.job_id] = (job, session.worker_id, clock())
            pool.send(session.worker_id, _job_message(job))

        # Once every expected worker has checked in, jobs that no live worker
        # can ever run resolve straight to the floor instead of stalling.
        if pending and len(registered_ever) >= pool.expected_workers:
            for i in reversed(range(len(pending))):
                job = pending[i]
                if not any(s.capabilities is None or job.required_kinds <= s.capabilities
                           for s in sessions.values()):
                    pending.pop(i)
                    reports[job.job_id] = _floor_report(job, "no capable worker")

    return [reports[job.job_id] for job in jobs]


def evaluate_in_process(jobs: list[EvalJob], evaluator: Evaluator) -> list[FitnessReport]:
    """Sequential in-process evaluation with the identical floor semantics;
    the determinism baseline the distributed path is checked against."""
    out = []
    for job in jobs:
        reply = evaluate_job(evaluator, _job_message(job))
        if "error" in reply:
            out.append(_floor_report(job, reply["error"]))
        else:
            out.append(FitnessReport(job.job_id, reply["fitness"], dict(reply["diagnostics"])))
    return out


# ---------------------------------------------------------------------------
# Remote worker loop
# ---------------------------------------------------------------------------

def worker_loop(endpoint: tuple[str, int], evaluator: Evaluator, *,
                heartbeat_interval: float = HEARTBEAT_INTERVAL,
                max_reconnects: int | None = None) -> int:
    """Serve jobs from a master until SHUTDOWN: register, heartbeat on a fixed
    interval, evaluate, reply. Lost connections reconnect with backoff."""
    worker_id = f"worker-{uuid.uuid4().hex[:8]}"
    caps = sorted(evaluator.supported_kinds) if evaluator.supported_kinds else None
    attempts = 0
    while True:
        try:
            sock = socket.create_connection(endpoint, timeout=10.0)
        except OSError:
            attempts += 1
            if max_reconnects is not None and attempts > max_reconnects:
                return 1
            time.sleep(min(2.0 ** attempts * 0.1, 5.0))
            continue
        attempts = 0
        try:
            sock.sendall(encode_message(
                {"type": MSG_REGISTER, "worker_id": worker_id, "capabilities": caps}))
            sock.settimeout(heartbeat_interval)
            while True:
                try:
                    message = read_message(sock)
                except socket.timeout:
                    sock.sendall(encode_message({"type": MSG_HEARTBEAT, "worker_id": worker_id}))
                    continue
                if message is None:
                    break  # connection lost; reconnect
                if message["type"] == MSG_SHUTDOWN:
                    sock.close()
                    return 0
                if message["type"] == MSG_JOB:
                    reply = evaluate_job(evaluator, message)
                    reply["worker_id"] = worker_id
                    sock.sendall(encode_message(reply))
        except OSError:
            pass
        finally:
            sock.close()
