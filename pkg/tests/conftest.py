"""Shared fixtures: corpora and trained models reused across test modules.

Everything heavy is session-scoped so the expensive artifacts (the 20k-step
trained model, the 10000-pair corpus) are built once per run.
"""

from __future__ import annotations

import pytest

import dubkit as dk

HELD_OUT_SEED = 77


@pytest.fixture(scope="session")
def std_spec() -> dk.ToyTaskSpec:
    return dk.ToyTaskSpec.standard(seed=0)


@pytest.fixture(scope="session")
def raw_corpus(std_spec) -> list[dk.ParallelPair]:
    return dk.generate_corpus(std_spec, 2000)


@pytest.fixture(scope="session")
def adapted_corpus(raw_corpus) -> list[dk.ParallelPair]:
    return dk.adapt_corpus(raw_corpus)


@pytest.fixture(scope="session")
def trained_model(adapted_corpus) -> dk.CountDenoiser:
    model, _ = dk.train_count_denoiser(adapted_corpus, steps=20000, seed=0)
    return model


@pytest.fixture(scope="session")
def held_out() -> list[dk.ParallelPair]:
    spec = dk.ToyTaskSpec.standard(seed=HELD_OUT_SEED)
    return dk.generate_corpus(spec, 500, id_prefix="held")


@pytest.fixture(scope="session")
def held_tractable(held_out) -> list[dk.ParallelPair]:
    kept = [p for p in held_out if len(p.tgt) <= dk.ORACLE_MAX_TARGET_LEN]
    assert len(kept) >= 200
    return kept


@pytest.fixture(scope="session")
def big_corpus(std_spec) -> list[dk.ParallelPair]:
    return dk.generate_corpus(std_spec, 10000)


@pytest.fixture(scope="session")
def big_adapted(big_corpus) -> list[dk.ParallelPair]:
    return dk.adapt_corpus(big_corpus)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    import sys

    # use the module instance pytest executed, not a fresh import
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if module is None:
        return
    lines = module.summary_lines()
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
