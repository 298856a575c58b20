"""Shared fixtures: a session-wide cache of (scenario, policy) runs.

The acceptance criteria reuse the same built-in scenario runs many times;
each run executes once per session, and independent runs are distributed
over a small process pool.
"""

import concurrent.futures
import os

import pytest

from twosyn import builtin_scenario, run_scenario

ACCEPT_SEED = 7


def _run_pair(args):
    name, policy, seed = args
    scenario = builtin_scenario(name, seed)
    report = run_scenario(scenario, policy, seed)
    return (name, policy), report


class RunCache:
    def __init__(self):
        self._cache = {}

    def get(self, scenario_name, policy, seed=ACCEPT_SEED):
        key = (scenario_name, policy)
        if key not in self._cache:
            self.fill([key], seed=seed)
        return self._cache[key]

    def fill(self, keys, seed=ACCEPT_SEED):
        missing = [k for k in keys if k not in self._cache]
        if not missing:
            return
        jobs = [(name, policy, seed) for name, policy in missing]
        workers = min(len(jobs), os.cpu_count() or 1)
        if workers > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                for key, report in pool.map(_run_pair, jobs):
                    self._cache[key] = report
        else:
            for job in jobs:
                key, report = _run_pair(job)
                self._cache[key] = report


@pytest.fixture(scope="session")
def run_cache():
    return RunCache()
