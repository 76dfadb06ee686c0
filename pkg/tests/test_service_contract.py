"""Compute and storage services answer the same submit/poll surface.

Callers hold a JobRequest and should not care whether it lands on a
simulated calculator or on the storage mediator. These tests drive both
through one harness and pin the shared contract; the deliberate
divergence (what withdraw targets) gets its own cases.
"""

import pytest

from gridflow.quantities import Dataset, Observable, get_unit
from gridflow.resources import (
    FAILED,
    SUCCEEDED,
    WITHDRAWN,
    JobHandle,
    JobRequest,
    ResourceWithdrawn,
    UnknownJob,
)
from gridflow.simgrid import SimulatedExecutor, standard_registry
from gridflow.storage import ContentStore, StorageService

ONE = get_unit("dimensionless")


def scalar_ds(name, value):
    return Dataset.build([Observable.scalar(name, value, ONE)])


class ComputeUnderTest:
    """Simulated executor wrapped for the contract cases."""

    resource_id = "noop@sandbox-01"

    def __init__(self, tmp_path):
        self.store = ContentStore(tmp_path / "store")
        self.service = SimulatedExecutor(standard_registry(), self.store, seed=7)

    def good_request(self, n=0):
        return JobRequest.build(
            self.resource_id, f"probe{n}", "run-c", (), {"x": str(float(n))}
        )

    def bad_request(self):
        # latgen refuses a 1-cell lattice; same service, failing job
        return JobRequest.build("latgen@struct-01", "bad", "run-c", (), {"cells": "1"})

    def settle(self):
        while self.service.live_jobs():
            self.service.wait_any()

    def usage_records(self):
        return [
            self.service.usage(self.resource_id),
            self.service.usage("latgen@struct-01"),
        ]


class StorageUnderTest:
    """Storage mediator wrapped for the contract cases."""

    resource_id = StorageService.resource_id

    def __init__(self, tmp_path):
        self.store = ContentStore(tmp_path / "store")
        self.service = StorageService(self.store)

    def good_request(self, n=0):
        key = self.store.put(scalar_ds("v", float(n)), "run-c", "feed")
        return JobRequest.build(
            self.resource_id, f"merge{n}", "run-c", (("in", key.hash),), {}
        )

    def bad_request(self):
        return JobRequest.build(
            self.resource_id, "bad", "run-c", (("in", "0" * 64),), {}
        )

    def settle(self):
        pass

    def usage_records(self):
        return [self.service.usage(self.resource_id)]


@pytest.fixture(params=["compute", "storage"])
def harness(request, tmp_path):
    cls = ComputeUnderTest if request.param == "compute" else StorageUnderTest
    return cls(tmp_path)


class TestSharedSurface:
    def test_successful_job_completes(self, harness):
        handle = harness.service.submit(harness.good_request())
        assert handle.resource_id == harness.resource_id
        harness.settle()
        status = harness.service.poll(handle)
        assert status.state == SUCCEEDED
        assert status.terminal
        assert status.result is not None
        assert status.reason is None

    def test_poll_is_stable_once_terminal(self, harness):
        handle = harness.service.submit(harness.good_request())
        harness.settle()
        first = harness.service.poll(handle)
        second = harness.service.poll(handle)
        assert first.state == second.state == SUCCEEDED

    def test_failure_is_a_status_not_an_exception(self, harness):
        handle = harness.service.submit(harness.bad_request())
        harness.settle()
        status = harness.service.poll(handle)
        assert status.state == FAILED
        assert status.reason

    def test_unknown_job_rejected(self, harness):
        with pytest.raises(UnknownJob):
            harness.service.poll(JobHandle("no-such-job", harness.resource_id))

    def test_accounting_settles(self, harness):
        for n in range(2):
            harness.service.submit(harness.good_request(n))
        harness.service.submit(harness.bad_request())
        harness.settle()
        records = harness.usage_records()
        assert all(rec.settled for rec in records)
        assert sum(r.started for r in records) == 3
        assert sum(r.succeeded for r in records) == 2
        assert sum(r.failed for r in records) == 1


class TestWithdrawSemantics:
    def test_storage_withdraw_is_resource_wide(self, tmp_path):
        h = StorageUnderTest(tmp_path)
        done = h.service.submit(h.good_request())
        h.service.withdraw()
        with pytest.raises(ResourceWithdrawn):
            h.service.submit(h.good_request(1))
        # earlier results stay readable
        assert h.service.poll(done).state == SUCCEEDED

    def test_compute_withdraw_targets_one_job(self, tmp_path):
        h = ComputeUnderTest(tmp_path)
        victim = h.service.submit(h.good_request(0))
        assert h.service.withdraw(victim).state == WITHDRAWN
        survivor = h.service.submit(h.good_request(1))
        h.settle()
        assert h.service.poll(survivor).state == SUCCEEDED
        assert h.service.poll(victim).state == WITHDRAWN


class TestStorageJobs:
    def test_merge_result_is_a_filed_key(self, tmp_path):
        h = StorageUnderTest(tmp_path)
        ka = h.store.put(scalar_ds("a", 1.0), "run-c", "left")
        kb = h.store.put(scalar_ds("b", 2.0), "run-c", "right")
        req = JobRequest.build(
            h.resource_id, "merge", "run-c",
            (("left", ka.hash), ("right", kb.hash)), {},
        )
        handle = h.service.submit(req)
        key = h.service.poll(handle).result
        assert h.store.get(key).names == ("a", "b")

    def test_no_inputs_files_an_empty_dataset(self, tmp_path):
        h = StorageUnderTest(tmp_path)
        req = JobRequest.build(h.resource_id, "blank", "run-c", (), {})
        handle = h.service.submit(req)
        key = h.service.poll(handle).result
        assert h.store.get(key).names == ()
