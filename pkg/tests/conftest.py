import os

import numpy as np
import pytest

from gwasgls.datagen import DatasetPaths, GenSpec, gen_dataset
from gwasgls.pipeline import SolvePaths


def make_spd(n, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((n, 2 * n))
    M = G @ G.T / (2 * n) + np.eye(n)
    return np.tril(M) + np.tril(M, -1).T


def solve_paths(dataset: DatasetPaths, out):
    return SolvePaths(cov=dataset.cov, covariates=dataset.covariates,
                      pheno=dataset.pheno, geno=dataset.geno, out=out)


@pytest.fixture(scope="session")
def seed42_dataset(tmp_path_factory):
    """The canonical desk-scale instance: n=100, m=500, p=4, seed 42."""
    d = tmp_path_factory.mktemp("seed42")
    return gen_dataset(GenSpec(n=100, m=500, p=4, seed=42), str(d))


@pytest.fixture(scope="session")
def degenerate_dataset(tmp_path_factory):
    """seed-42 dataset with marker 10 zeroed and marker 20 set equal to the
    intercept covariate; exactly those two must be flagged degenerate."""
    from gwasgls import fileio

    d = tmp_path_factory.mktemp("degen")
    paths = gen_dataset(GenSpec(n=60, m=40, p=4, seed=42), str(d))
    X = np.array(fileio.read_matrix(paths.geno, "GWAX"))
    X[:, 10] = 0.0
    X[:, 20] = 1.0  # duplicates the intercept column
    fileio.write_matrix(paths.geno, "GWAX", X)
    return paths, (10, 20)


@pytest.fixture()
def out_path(tmp_path):
    def _mk(name):
        return str(tmp_path / name)
    return _mk


# verdict lines appended by tests/test_acceptance.py; echoed after the
# run so they survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
