import struct

import numpy as np
import pytest


def write_pcm(path, frames, rate, bits, fmt_tag=1):
    """Hand-rolled RIFF writer: ``frames`` is (n,) or (n, channels) of raw integer/float sample values."""
    frames = np.asarray(frames)
    if frames.ndim == 1:
        frames = frames[:, None]
    channels = frames.shape[1]
    flat = frames.reshape(-1)
    if fmt_tag == 3:
        payload = flat.astype("<f4").tobytes()
    elif bits == 8:
        payload = flat.astype(np.uint8).tobytes()
    elif bits == 16:
        payload = flat.astype("<i2").tobytes()
    elif bits == 24:
        payload = b"".join(int(v).to_bytes(3, "little", signed=True) for v in flat)
    elif bits == 32:
        payload = flat.astype("<i4").tobytes()
    else:
        raise ValueError(bits)
    block = channels * bits // 8
    fmt = struct.pack("<HHIIHH", fmt_tag, channels, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) % 2:
        body += b"\0"
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: tests marked ``criterion(n, title)`` get one PASS / FAIL / SKIP line each
_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion implemented by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "call" or rep.skipped or rep.failed:
        if rep.passed:
            status = "PASS"
        elif rep.skipped:
            status = "SKIP"
        else:
            status = "FAIL"
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        if status == "SKIP" and isinstance(rep.longrepr, tuple):
            detail = rep.longrepr[2]
        if number not in _ACCEPTANCE or _ACCEPTANCE[number][0] == "PASS":
            _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
