import time

SESSION_START = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    # the suite-runtime criterion has to see every other test finish first
    last = [it for it in items if it.name == "test_criterion_10_suite_runtime"]
    items[:] = [it for it in items if it not in last] + last
