import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for tests.oracles as plain module

from flexloop.fileio import parse_network_file, parse_scenario_file
from flexloop.grid import Branch, Bus, Fpu, NetworkSpec, build_devices, build_network

DATA = Path(__file__).parent.parent / "src" / "flexloop" / "data"


@pytest.fixture(scope="session")
def lab_spec():
    return parse_network_file(DATA / "lv_feeder_5bus.net")


@pytest.fixture(scope="session")
def lab_net(lab_spec):
    return build_network(lab_spec)


@pytest.fixture(scope="session")
def lab_devices(lab_spec, lab_net):
    return build_devices(lab_spec, lab_net)


@pytest.fixture(scope="session")
def exp_a():
    return parse_scenario_file(DATA / "exp_a_14p5kw.scn")


@pytest.fixture(scope="session")
def exp_b():
    return parse_scenario_file(DATA / "exp_b_ev_disturbance.scn")


def make_two_bus(r_ohm=0.016, x_ohm=0.016, with_fpu=False):
    """Slack + one PQ bus. Default impedance is 0.01 + j0.01 p.u. at the
    400 V / 100 kVA base (Z_base = 1.6 ohm)."""
    devices = (Fpu(bus=2, p_min_w=-50e3, p_max_w=50e3, q_min_var=-50e3, q_max_var=50e3),) if with_fpu else ()
    spec = NetworkSpec(
        buses=(Bus(1, 400.0, "slack"), Bus(2, 400.0, "pq")),
        branches=(Branch(1, 2, r_ohm, x_ohm),),
        devices=devices,
    )
    net = build_network(spec)
    return net, build_devices(spec, net)


@pytest.fixture
def two_bus():
    return make_two_bus()


def random_injections(rng, n_pq, scale=0.05):
    return rng.uniform(-scale, scale, (n_pq, 2))


# acceptance reporting: collected lines are printed in the terminal summary

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
