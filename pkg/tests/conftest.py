"""Shared fixtures.

The expensive artifacts (trained network pair, full attack-suite run) are
session-scoped and built lazily, so unit-test-only runs never pay for them.
Setting SEGATTACK_TEST_CACHE to a directory reuses trained weights and suite
reports across pytest invocations during development; the pipeline is
deterministic, so cached and freshly computed artifacts are bit-identical.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import replace

import pytest

from segattack import data as data_mod
from segattack import harness, training
from segattack.model import load_weights, save_weights

CACHE_ENV = "SEGATTACK_TEST_CACHE"

# One line per acceptance criterion, printed after the test summary so the
# verdicts survive pytest's stdout capture.
criterion_lines: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if criterion_lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in criterion_lines:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True, scope="session")
def _no_output_dir_override():
    """Keep an inherited output-dir override from leaking into tests."""
    saved = os.environ.pop(harness.OUTPUT_DIR_ENV, None)
    yield
    if saved is not None:
        os.environ[harness.OUTPUT_DIR_ENV] = saved


@pytest.fixture(scope="session")
def experiment_config() -> harness.ExperimentConfig:
    config = harness.ExperimentConfig()
    config.validate()
    return config


@pytest.fixture(scope="session")
def pool(experiment_config):
    return harness.build_pool(experiment_config)


@pytest.fixture(scope="session")
def split_plan(experiment_config, pool):
    return harness.build_split(experiment_config, pool)


@pytest.fixture(scope="session")
def test_samples(pool, split_plan):
    return [pool[i] for i in split_plan.test]


@pytest.fixture(scope="session")
def trained_pair(experiment_config, pool, split_plan, tmp_path_factory):
    """(target_net, surrogate_net, per-net training seconds), trained with the
    experiment defaults; per-network wall time is measured around the real
    training calls."""
    cache = os.environ.get(CACHE_ENV)
    if cache:
        target_path = os.path.join(cache, "target.weights")
        surrogate_path = os.path.join(cache, "surrogate.weights")
        meta_path = os.path.join(cache, "training_meta.json")
        if all(os.path.exists(p) for p in (target_path, surrogate_path, meta_path)):
            with open(meta_path) as fh:
                durations = json.load(fh)["durations"]
            return load_weights(target_path), load_weights(surrogate_path), durations

    durations: list[float] = []
    real_train = training.train

    def timed_train(*args, **kwargs):
        start = time.process_time()
        result = real_train(*args, **kwargs)
        durations.append(time.process_time() - start)
        return result

    training.train = timed_train
    try:
        train_cfg = replace(experiment_config.train,
                            seed=experiment_config.shifted(experiment_config.train.seed))
        target_net, surrogate_net = training.train_pair(
            pool, split_plan, experiment_config.spec, train_cfg)
    finally:
        training.train = real_train

    if cache:
        os.makedirs(cache, exist_ok=True)
        save_weights(target_net, os.path.join(cache, "target.weights"))
        save_weights(surrogate_net, os.path.join(cache, "surrogate.weights"))
        with open(os.path.join(cache, "training_meta.json"), "w") as fh:
            json.dump({"durations": durations}, fh)
    return target_net, surrogate_net, durations


@pytest.fixture(scope="session")
def suite_run(experiment_config, trained_pair, tmp_path_factory):
    """First full suite run: (SuiteResult, output directory)."""
    target_net, surrogate_net, _ = trained_pair
    cache = os.environ.get(CACHE_ENV)
    if cache:
        out = os.path.join(cache, "suite1")
        done = os.path.join(out, "suite_meta.json")
        if os.path.exists(done):
            with open(done) as fh:
                meta = json.load(fh)
            records = []
            for f in harness.SUITE_FILES.values():
                records += harness.read_records_csv(os.path.join(out, f))
            paths = {k: os.path.join(out, v) for k, v in harness.SUITE_FILES.items()}
            paths["summary"] = os.path.join(out, "summary.txt")
            result = harness.SuiteResult(
                records=tuple(records), report_paths=paths,
                attack_runs=meta["attack_runs"],
                suite_seconds=meta["suite_seconds"])
            return result, out
    else:
        out = str(tmp_path_factory.mktemp("suite1"))
    config = replace(experiment_config, output_dir=out)
    result = harness.run_full_suite(config, target_net, surrogate_net)
    if cache:
        with open(os.path.join(out, "suite_meta.json"), "w") as fh:
            json.dump({"attack_runs": result.attack_runs,
                       "suite_seconds": result.suite_seconds}, fh)
    return result, out


@pytest.fixture()
def tiny_spec():
    from segattack.model import UNetSpec
    return UNetSpec(depth=2, base_features=2, num_classes=3,
                    input_size=8, kernel_size=3)


@pytest.fixture()
def tiny_samples():
    """Three small phantoms for fast integration tests."""
    config = data_mod.PhantomConfig(image_size=32, seed=99)
    return [data_mod.generate_phantom(config, i) for i in range(3)]
