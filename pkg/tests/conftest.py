import numpy as np
import pytest

from mimictun import synth, timing
from mimictun.profile import (
    CaptureRecord,
    DelayCorpus,
    ObservationTable,
    Profile,
    build_schema,
)


def tiny_profile(counts, width=1, constant=None, checksum=True, delays=(0.03, 0.04), key=bytes(16)):
    """Profile with one ENCODED field per entry of ``counts``; observations 0, 1, 2, ..."""
    fields = []
    tables = {}
    if constant is not None:
        fields.append({"name": "hdr", "width": len(constant), "kind": "constant"})
        tables["hdr"] = ObservationTable("hdr", (constant,))
    for i, n in enumerate(counts):
        name = f"f{i + 1}"
        fields.append({"name": name, "width": width, "kind": "encoded"})
        tables[name] = ObservationTable(name, tuple(v.to_bytes(width, "big") for v in range(n)))
    if checksum:
        fields.append({"name": "chk", "width": 2, "kind": "computed"})
    schema = build_schema(fields)
    return Profile(schema, tables, DelayCorpus(tuple(delays)), key, schema[-1].end)


def records(times, payloads):
    return [CaptureRecord(t, p) for t, p in zip(times, payloads)]


@pytest.fixture(scope="session")
def game_profile():
    return synth.synchro_profile(seed=0)


@pytest.fixture(scope="session")
def small_profile():
    return synth.synchro_profile(seed=1, small=True)


@pytest.fixture(scope="session")
def synchro_model(game_profile):
    return timing.fit(game_profile.delay_corpus.delays)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one "criterion N: PASS/FAIL ..." line per acceptance check, shown at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(k.split(".")[0]), k)):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
