import pytest

from teecred.actors import RevocationMode
from teecred.pki import Role
from teecred.world import World

STANDARD = [
    ("tsm", Role.TSM), ("ta_a", Role.TA), ("ta_b", Role.TA),
    ("ra", Role.RA), ("ma", Role.MA), ("ba", Role.BA),
]


def standard_world(seed=1, mode=RevocationMode.BLACKLIST, program=None, creds=("payment", "transit", "door"),
                   issuer="ma", **overrides):
    """tsm, two TAs, ra, ma and ba; ta_a holds ``creds``."""
    world = World(seed, mode)
    for name, role in STANDARD:
        world.add(name, role, **overrides.get(name, {}))
    if creds:
        world.issue("ta_a", creds, issuer)
    world.arm(program)
    return world


@pytest.fixture
def world():
    return standard_world()


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
