import pytest


@pytest.fixture(scope="session")
def table_cache(tmp_path_factory):
    """Stream tables are slow to build; share one cache directory per session."""
    return str(tmp_path_factory.mktemp("stream_tables"))
