import shutil

import pytest


@pytest.fixture(scope="session")
def vita_cli():
    """Path of the inference engine's executable; the parity and integration
    tests drive the engine through it."""
    exe = shutil.which("vita")
    if exe is None:
        pytest.fail("the 'vita' command line tool is not on PATH")
    return exe
