import numpy as np
import pytest

from splitfed import segnet, server, synthdata
from splitfed.segnet import DecoderSpec, EncoderSpec


@pytest.fixture(scope="session")
def source_pair():
    """An untrained but fixed encoder/decoder pair standing in for the source model."""
    enc = segnet.build_encoder(EncoderSpec("small"), 11)[0]
    dec = segnet.build_decoder(DecoderSpec(), 12)
    rng = np.random.default_rng(13)
    # non-zero biases so no gradient path is trivially zero
    dec = dec.replace(**{k: (rng.standard_normal(v.shape) * 0.05).astype(np.float32)
                         for k, v in dec.items() if k.endswith(".b")})
    return enc, dec


@pytest.fixture
def live_server(source_pair):
    """A loopback server hosting the fixture decoder and encoder."""
    enc, dec = source_pair
    srv, thread = server.start_server(server.ServerState.create(dec, source_encoder=enc))
    yield srv
    srv.stop()
    thread.join(timeout=10)


@pytest.fixture(scope="session")
def tiny_split():
    return synthdata.generate_domain(synthdata.DEFAULT_SPECS[1], 8, 4, 3)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
