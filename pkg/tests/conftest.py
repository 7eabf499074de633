import time

import numpy as np
import pytest

from surroshap.grid import OperatingConditions, system_from_dict, synthesize_system
from surroshap.surrogate import TrainConfig, generate_dataset, load_dataset, save_dataset, train


def entity(i, kind, bus=0, beta=0.0, p_max=10.0, offer=0.0):
    return {"id": i, "kind": kind, "bus": bus, "beta": beta, "p_max": p_max, "base_offer": offer}


def single_bus(entities, voll=10_000.0):
    return system_from_dict({"buses": 1, "slack_bus": 0, "branches": [], "entities": entities, "voll": voll})


def conditions(t=1, rho_g=(), r_max=(), d_max=(), voll=10_000.0):
    return OperatingConditions(t=t, rho_g=np.array(rho_g, float), r_max=np.array(r_max, float),
                               d_max=np.array(d_max, float), voll=voll)


@pytest.fixture
def game3():
    """Thermal (beta 1, 10 MW, offer 10), renewable (3 MW), load (5 MW) on one bus."""
    system = single_bus([entity(0, "thermal", beta=1.0, p_max=10, offer=10),
                         entity(1, "renewable", p_max=3),
                         entity(2, "load", p_max=5)])
    return system, conditions(rho_g=[10], r_max=[3], d_max=[5])


@pytest.fixture(scope="session")
def system26():
    return synthesize_system(6, 4, 16, 30, seed=1)


@pytest.fixture(scope="session")
def dataset26(system26, request):
    """100k OPF-labelled rows; cached between runs since labelling takes a couple of minutes."""
    cache = request.config.cache.mkdir("surroshap")
    path = cache / f"ds26-{system26.digest()[:16]}-100000-3.ssds"
    if path.exists():
        return load_dataset(path)
    ds = generate_dataset(system26, 100_000, seed=3)
    save_dataset(ds, path)
    return load_dataset(path)


@pytest.fixture(scope="session")
def model26(dataset26, system26):
    t0 = time.perf_counter()
    model = train(dataset26, TrainConfig(), beta_thermal=system26.beta[system26.thermal])
    model.metadata["train_seconds"] = time.perf_counter() - t0
    return model


# one summary line per acceptance criterion, printed at the end of the run
acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
