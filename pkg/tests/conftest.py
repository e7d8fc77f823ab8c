import pytest

import acceptance_runs as runs


@pytest.fixture(scope="session")
def run_store(tmp_path_factory):
    return runs.RunStore(runs.store_root(tmp_path_factory))


@pytest.fixture(scope="session")
def sweep_dir(run_store):
    return run_store.run("sweep", runs.SWEEP, "sweep")


@pytest.fixture(scope="session")
def unconstrained_dir(run_store):
    return run_store.run("unconstrained", runs.UNCONSTRAINED, "train")


@pytest.fixture(scope="session")
def unconditioned_dir(run_store):
    return run_store.run("unconditioned", runs.UNCONDITIONED, "train")


@pytest.fixture(scope="session")
def hier_transfer_dir(run_store):
    return run_store.run("hier_transfer", runs.HIER_TRANSFER, "sweep")


@pytest.fixture(scope="session")
def hier_bounds_dir(run_store):
    return run_store.run("hier_bounds", runs.HIER_BOUNDS, "sweep")


def pytest_terminal_summary(terminalreporter):
    if not runs.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(runs.RESULTS):
        passed, detail = runs.RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
