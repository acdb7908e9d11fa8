import queue
import random
import threading

import pytest

from codeepneat.assembly import MergePolicy, assemble_chromosome, export_network
from codeepneat.distrib import (
    MSG_HEARTBEAT,
    MSG_JOB,
    MSG_REGISTER,
    MSG_REPORT,
    MSG_SHUTDOWN,
    EvalJob,
    LocalWorkerPool,
    NoWorkersError,
    SocketWorkerPool,
    WorkerCrash,
    dispatch_generation,
    encode_message,
    evaluate_in_process,
    worker_loop,
)
from codeepneat.evaluator import (
    EvaluationBudget,
    StructuralTarget,
    SurrogateEvaluator,
)
from codeepneat.genome import minimal_chromosome, mutate_add_node, InnovationRegistry
from conftest import small_space

SPACE = small_space()
POLICY = MergePolicy("concatenate", "dense_bottleneck")


def make_jobs(n, epochs=1):
    rng = random.Random(0)
    registry = InnovationRegistry()
    jobs = []
    for i in range(n):
        c = minimal_chromosome(SPACE, rng)
        for _ in range(i % 5):
            c, _ = mutate_add_node(c, registry, rng, space=SPACE)
        net = assemble_chromosome(c, POLICY, (4,), provenance={"network_id": f"job{i:03d}"})
        jobs.append(EvalJob(f"job{i:03d}", export_network(net, "json"),
                            EvaluationBudget(epochs=epochs, seed=i)))
    return jobs


def surrogate():
    return SurrogateEvaluator(StructuralTarget(depth=3))


class TestFraming:
    def test_length_prefix_is_big_endian(self):
        blob = encode_message({"type": MSG_HEARTBEAT, "worker_id": "w"})
        length = int.from_bytes(blob[:4], "big")
        assert length == len(blob) - 4


class TestLocalPool:
    def test_ten_jobs_one_worker(self):
        jobs = make_jobs(10)
        pool = LocalWorkerPool(surrogate, 1)
        try:
            reports = dispatch_generation(jobs, pool, timeout_floor=10.0)
        finally:
            pool.shutdown()
        assert [r.network_id for r in reports] == [j.job_id for j in jobs]

    def test_multiset_matches_in_process_with_four_workers(self):
        jobs = make_jobs(40)
        baseline = evaluate_in_process(jobs, surrogate())
        pool = LocalWorkerPool(surrogate, 4)
        try:
            distributed = dispatch_generation(jobs, pool, timeout_floor=10.0)
        finally:
            pool.shutdown()
        assert sorted(r.fitness for r in distributed) == sorted(r.fitness for r in baseline)

    def test_worker_killed_mid_job_is_redispatched(self):
        jobs = make_jobs(12)
        crashes = {"left": 1}

        class CrashOnce:
            deterministic = True
            supported_kinds = None

            def __init__(self, inner=None):
                self.inner = surrogate()

            def evaluate(self, net, budget):
                if crashes["left"] > 0:
                    crashes["left"] -= 1
                    raise WorkerCrash("simulated death")
                return self.inner.evaluate(net, budget)

        pool = LocalWorkerPool(CrashOnce, 3)
        try:
            reports = dispatch_generation(jobs, pool, timeout_floor=10.0)
        finally:
            pool.shutdown()
        assert len(reports) == len(jobs)
        assert crashes["left"] == 0  # the crash really happened
        assert all(r.fitness > 0.0 for r in reports)  # the job was retried elsewhere

    def test_zero_workers_rejected(self):
        with pytest.raises(NoWorkersError):
            LocalWorkerPool(surrogate, 0)

    def test_capability_mismatch_floors_after_registration(self):
        class DenseOnly:
            deterministic = True
            supported_kinds = frozenset({"input", "output", "dense"})

            def evaluate(self, net, budget):
                return surrogate().evaluate(net, budget)

        jobs = make_jobs(3)  # deeper jobs contain identity junctions
        pool = LocalWorkerPool(DenseOnly, 2)
        try:
            reports = dispatch_generation(jobs, pool, timeout_floor=5.0)
        finally:
            pool.shutdown()
        assert len(reports) == 3
        floored = [r for r in reports if r.fitness == 0.0]
        assert floored and all("no capable worker" in r.diagnostics.get("failed", "")
                               for r in floored)


class ScriptedPool:
    """Deterministic fake pool for driving the master state machine."""

    def __init__(self, expected_workers=1):
        self.inbox: queue.Queue = queue.Queue()
        self.sent: list[tuple[str, dict]] = []
        self.expected_workers = expected_workers
        self.liveness: dict[str, bool] = {}

    def send(self, worker_id, message):
        self.sent.append((worker_id, message))

    def alive(self, worker_id):
        return self.liveness.get(worker_id, True)


class TestMasterStateMachine:
    def test_heartbeat_gap_requeues_inflight_job(self):
        # clock-injection: the worker registers, takes the job, then falls
        # silent; the master must declare it dead and re-dispatch.
        now = {"t": 0.0}
        pool = ScriptedPool(expected_workers=2)
        jobs = make_jobs(1)
        pool.inbox.put({"type": MSG_REGISTER, "worker_id": "w1", "capabilities": None})

        result = {}

        def run():
            result["reports"] = dispatch_generation(
                jobs, pool, clock=lambda: now["t"], heartbeat_timeout=10.0,
                timeout_floor=1000.0, max_retries=2, poll=0.001)

        thread = threading.Thread(target=run)
        thread.start()
        # wait for the first dispatch
        while not pool.sent:
            pass
        assert pool.sent[0][0] == "w1"
        now["t"] = 11.0  # silence exceeds the heartbeat timeout
        # a healthy worker registers and completes the retry
        pool.inbox.put({"type": MSG_REGISTER, "worker_id": "w2", "capabilities": None})
        while len(pool.sent) < 2:
            pass
        assert pool.sent[1][0] == "w2"
        job_msg = pool.sent[1][1]
        pool.inbox.put({"type": MSG_REPORT, "worker_id": "w2",
                        "job_id": job_msg["job_id"], "fitness": 0.5, "diagnostics": {}})
        thread.join(timeout=10.0)
        assert not thread.is_alive()
        assert result["reports"][0].fitness == 0.5

    def test_duplicate_report_discarded(self):
        pool = ScriptedPool(expected_workers=1)
        jobs = make_jobs(2)
        pool.inbox.put({"type": MSG_REGISTER, "worker_id": "w1", "capabilities": None})

        result = {}

        def run():
            result["reports"] = dispatch_generation(jobs, pool, timeout_floor=1000.0,
                                                    poll=0.001)

        thread = threading.Thread(target=run)
        thread.start()
        while not pool.sent:
            pass
        first = pool.sent[0][1]["job_id"]
        pool.inbox.put({"type": MSG_REPORT, "worker_id": "w1", "job_id": first,
                        "fitness": 0.25, "diagnostics": {}})
        pool.inbox.put({"type": MSG_REPORT, "worker_id": "w1", "job_id": first,
                        "fitness": 0.99, "diagnostics": {}})  # duplicate, ignored
        while len(pool.sent) < 2:
            pass
        second = pool.sent[1][1]["job_id"]
        pool.inbox.put({"type": MSG_REPORT, "worker_id": "w1", "job_id": second,
                        "fitness": 0.5, "diagnostics": {}})
        thread.join(timeout=10.0)
        assert not thread.is_alive()
        by_id = {r.network_id: r.fitness for r in result["reports"]}
        assert by_id[first] == 0.25

    def test_retries_exhaust_to_floor(self):
        now = {"t": 0.0}
        pool = ScriptedPool(expected_workers=1)
        pool.inbox.put({"type": MSG_REGISTER, "worker_id": "w1", "capabilities": None})
        jobs = make_jobs(1)

        result = {}

        def run():
            result["reports"] = dispatch_generation(
                jobs, pool, clock=lambda: now["t"], heartbeat_timeout=1e9,
                timeout_floor=5.0, max_retries=1, poll=0.001)

        thread = threading.Thread(target=run)
        thread.start()
        sent_before = 0
        for _ in range(2):  # initial attempt + one retry, both time out
            while len(pool.sent) == sent_before:
                pass
            sent_before = len(pool.sent)
            now["t"] += 6.0
        thread.join(timeout=10.0)
        assert not thread.is_alive()
        report = result["reports"][0]
        assert report.fitness == 0.0
        assert report.diagnostics["failed"] == "timeout"


class TestSocketTransport:
    def test_register_job_report_shutdown_cycle(self):
        pool = SocketWorkerPool("127.0.0.1", 0, expected_workers=2)
        host, port = pool.address
        exit_codes = []
        workers = [
            threading.Thread(target=lambda: exit_codes.append(
                worker_loop((host, port), surrogate(), heartbeat_interval=0.2)))
            for _ in range(2)
        ]
        for w in workers:
            w.start()
        jobs = make_jobs(10)
        try:
            reports = dispatch_generation(jobs, pool, timeout_floor=10.0)
        finally:
            pool.shutdown()
        for w in workers:
            w.join(timeout=10.0)
        assert len(reports) == 10
        baseline = evaluate_in_process(jobs, surrogate())
        assert sorted(r.fitness for r in reports) == sorted(r.fitness for r in baseline)
        assert exit_codes == [0, 0]  # clean SHUTDOWN exits

    def test_malformed_job_yields_structured_error_and_worker_survives(self):
        pool = SocketWorkerPool("127.0.0.1", 0, expected_workers=1)
        host, port = pool.address
        exit_codes = []
        worker = threading.Thread(target=lambda: exit_codes.append(
            worker_loop((host, port), surrogate(), heartbeat_interval=0.2)))
        worker.start()
        # wait for registration, then hand the worker a malformed job directly
        while not pool._conns:
            pass
        wid = next(iter(pool._conns))
        pool.send(wid, {"type": MSG_JOB, "job_id": "bad-1", "payload": "{not json",
                        "budget": {"epochs": 1, "sample_cap": 0, "seed": 0}})
        reply = pool.inbox.get(timeout=10.0)
        while reply["type"] != MSG_REPORT:
            reply = pool.inbox.get(timeout=10.0)
        assert reply["job_id"] == "bad-1"
        assert "error" in reply
        # worker is still serving: a valid job completes
        good = make_jobs(1)
        reports = dispatch_generation(good, pool, timeout_floor=10.0)
        assert reports[0].fitness > 0.0
        pool.shutdown()
        worker.join(timeout=10.0)
        assert exit_codes == [0]


class TestInProcess:
    def test_floor_semantics_match_distributed(self):
        class Broken:
            deterministic = True
            supported_kinds = None

            def evaluate(self, net, budget):
                raise RuntimeError("nope")

        jobs = make_jobs(3)
        reports = evaluate_in_process(jobs, Broken())
        assert all(r.fitness == 0.0 for r in reports)
        assert all("RuntimeError" in r.diagnostics["failed"] for r in reports)
