import pytest

from dexweaver import corpus
from dexweaver.dex import write_dex
from dexweaver.package import generate_identity, write_zip

MANIFEST = b'<manifest package="test.app"/>\n'


@pytest.fixture(scope="session")
def toy_map():
    return corpus.permission_map()


@pytest.fixture(scope="session")
def identity():
    return generate_identity(seed=7)


@pytest.fixture(scope="session")
def other_identity():
    return generate_identity(seed=8)


def fixture_apk(name, extra=()):
    dex = write_dex(corpus.load(name))
    return write_zip([("AndroidManifest.xml", MANIFEST), ("classes.dex", dex), *extra])


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
