import pytest
import structlog


@pytest.fixture(autouse=True)
def _reset_structlog():
    """run_cli() configures structlog globally with the sys.stderr of the moment;
    under pytest capture that stream is closed after the test, so restore defaults."""
    yield
    structlog.reset_defaults()
