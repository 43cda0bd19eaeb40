import pytest

from dnsverdict import pipeline, simnet, verdict


@pytest.fixture(scope="session")
def mixed_scenario():
    return simnet.generate(simnet.PRESETS["mixed"])


@pytest.fixture(scope="session")
def mixed_run(mixed_scenario):
    sc = mixed_scenario
    return pipeline.run_pipeline(sc.snapshot, sc.metadata, sc.policy(), sc.fingerprints,
                                 verdict.default_pools(), sc.transport)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, line = RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {line}")
