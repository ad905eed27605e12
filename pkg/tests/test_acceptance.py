"""Acceptance suite: one check per criterion, each with its own time budget.

Every test records a ``criterion N: PASS/FAIL`` line that is printed in the
"acceptance criteria" section at the end of the pytest run.  Criterion 7 is
split into its three parts so a failing part does not hide the others.
"""
import asyncio
import hashlib
import math
import os
import random
import time

import numpy as np
import pytest

from mimictun import cli, framing, stats, synth, timing
from mimictun.fte_codec import decode_bytes, encode_bytes, validate_syntax
from mimictun.profile import capacity, theoretical_goodput
from mimictun.sim import simulate
from mimictun.timing import BinMap, infer_model
from mimictun.tunnel import ChannelConfig, Endpoint, Tunnel

from conftest import ACCEPTANCE_LINES

ROWS3 = ((0.1, 0.6, 0.3), (0.4, 0.4, 0.2), (0.25, 0.25, 0.5))
RUNS = 20


def record(key, ok, detail, elapsed, budget):
    """Store the summary line and fail the test if the check or its budget failed."""
    in_time = elapsed <= budget
    verdict = "PASS" if ok and in_time else "FAIL"
    line = f"criterion {key}: {verdict}  {detail}  ({elapsed:.2f}s, budget {budget:g}s)"
    ACCEPTANCE_LINES[key] = line
    print(line)
    assert ok, line
    assert in_time, line


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_capacity(game_profile):
    t0 = time.perf_counter()
    s_bits, b_bits = capacity(game_profile)
    chunk = framing.chunk_size_for(game_profile)
    goodput = theoretical_goodput(game_profile, 0.03334)
    elapsed = time.perf_counter() - t0
    ok = b_bits == 516 and chunk == 64 and abs(goodput - 15477) <= 1
    record("1", ok, f"S={s_bits:.2f} B={b_bits} chunk={chunk} goodput={goodput:.1f} bps", elapsed, 1)


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_codec_round_trip(game_profile):
    rnd = random.Random(2)
    t0 = time.perf_counter()
    good = valid = 0
    for _ in range(10_000):
        chunk = rnd.randbytes(64)
        payload = encode_bytes(game_profile, chunk)
        valid += validate_syntax(game_profile, payload)
        good += decode_bytes(game_profile, payload, 64) == chunk
    elapsed = time.perf_counter() - t0
    record("2", good == valid == 10_000, f"{good}/10000 round trips, {valid}/10000 valid datagrams", elapsed, 10)


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_segmentation():
    rnd = random.Random(3)
    t0 = time.perf_counter()
    sizes = list(range(1, 130)) + [k * 63 + d for k in range(2, 239) for d in (-5, -4, -3)]
    sizes += [rnd.randint(1, 15000) for _ in range(300)] + [14999, 15000]
    bad = []
    for size in sizes:
        payload = rnd.randbytes(size)
        frames = framing.segment(payload, 64)
        rnd.shuffle(frames)
        if framing.reassemble(frames, 64) != payload or len(frames) != math.ceil((size + 4) / 63):
            bad.append(size)

    p59 = bytes(range(59))
    f59 = framing.segment(p59, 64)
    exact59 = len(f59) == 1 and f59[0].to_bytes() == b"\x00" + (59).to_bytes(4, "big") + p59
    p63 = bytes(range(100, 163))
    f63 = framing.segment(p63, 64, randbytes=lambda n: b"\xee" * n)
    exact63 = (
        [f.seq for f in f63] == [0, 1]
        and f63[0].body == (63).to_bytes(4, "big") + p63[:59]
        and f63[1].body == p63[59:] + b"\xee" * 59
    )
    elapsed = time.perf_counter() - t0
    ok = not bad and exact59 and exact63
    detail = f"{len(sizes) - len(bad)}/{len(sizes)} sizes in 1..15000 reassembled, 59B exact={exact59}, 63B exact={exact63}"
    record("3", ok, detail, elapsed, 10)


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_hmm_recovery():
    t0 = time.perf_counter()
    delays = synth.markov_delays(10_000, ROWS3, synth.SYNCHRO_MODES, synth.SYNCHRO_SD, np.random.default_rng(4))
    model = timing.fit(delays)
    err = float(np.abs(model.transitions - np.array(ROWS3)).max()) if model.transitions.shape == (3, 3) else math.inf

    stream = "ba" * 250 + "bc" * 750
    bm = BinMap((1.0, 2.0, 3.0), (1.5, 2.5), ("a", "b", "c"))
    counted = infer_model(stream, [{"a": 1.0, "b": 2.0, "c": 3.0}[c] for c in stream], bm)
    p_ba = counted.transitions[1, 0]
    elapsed = time.perf_counter() - t0
    ok = err <= 0.05 and p_ba == 0.25
    record("4", ok, f"max |P - truth| = {err:.4f} (tol 0.05), P(b->a) = {p_ba}", elapsed, 5)


# -- 5 ---------------------------------------------------------------------

def ecdf_gap_bruteforce(a, b):
    best = 0.0
    for x in list(a) + list(b):
        fa = sum(1 for v in a if v <= x) / len(a)
        fb = sum(1 for v in b if v <= x) / len(b)
        best = max(best, abs(fa - fb))
    return best


def test_criterion_5_statistics():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, m = rng.integers(1, 40, 2)
        a = np.round(rng.normal(0, 1, n), 1).tolist()
        b = np.round(rng.normal(0.3, 1.2, m), 1).tolist()
        worst = max(worst, abs(stats.ks_statistic(a, b) - ecdf_gap_bruteforce(a, b)))
    chi = stats.chi2_homogeneity([90, 10], [10, 90])
    sf = stats.chi2_sf(3.841, 1)
    thr = stats.ks_threshold(100, 100)
    elapsed = time.perf_counter() - t0
    ok = (
        worst <= 1e-12
        and abs(chi.statistic - 128) <= 1e-9 and chi.df == 1
        and abs(sf - 0.05) <= 0.001
        and abs(thr - 0.19234) <= 1e-5
    )
    detail = f"KS max err {worst:.1e} over 1000 pairs, chi2={chi.statistic:.6g} df={chi.df}, sf(3.841,1)={sf:.5f}, cut(100,100)={thr:.5f}"
    record("5", ok, detail, elapsed, 30)


# -- 6 ---------------------------------------------------------------------

def _write_lines(path, values):
    path.write_text("\n".join(repr(float(v)) for v in values) + "\n")


@pytest.mark.slow
def test_criterion_6_timing_indistinguishable(tmp_path, capsys):
    t0 = time.perf_counter()
    verdicts = []
    firings = []
    for run in range(RUNS):
        corpus = synth.synchro_delays(20_000, seed=100 + run)
        profile = synth.synchro_profile(seed=0, delays=corpus)
        model = timing.fit(corpus)
        a = Endpoint(profile, model, seed=2 * run, record=True)
        b = Endpoint(profile, model, seed=2 * run + 1)
        a.submit(os.urandom(200_000))
        simulate(a, b, until=10_050 * model.mean_delay, stop_when=lambda r: a.sender.counters.firings >= 10_000)
        firings.append(a.sender.counters.firings)
        (tmp_path / "m.json").write_text(timing.save_model(model))
        _write_lines(tmp_path / "gaps.txt", np.diff(a.send_log))
        rc = cli.main(["verify", str(tmp_path / "m.json"), str(tmp_path / "gaps.txt"), "--seed", str(run)])
        verdicts.append(rc == 0)
    capsys.readouterr()
    elapsed = time.perf_counter() - t0
    passed = sum(verdicts)
    ok = passed >= 18 and min(firings) >= 10_000
    record("6", ok, f"{passed}/{RUNS} runs equivalent (need 18), >= {min(firings)} firings each", elapsed, 600)


# -- 7 ---------------------------------------------------------------------

async def _echo_server():
    async def handle(reader, writer):
        while data := await reader.read(4096):
            writer.write(data)
            await writer.drain()
        writer.close()
    return await asyncio.start_server(handle, "127.0.0.1", 0)


async def _loopback_transfer(profile, model, payload, drop, timeout):
    echo = await _echo_server()
    server = Tunnel(ChannelConfig(profile, model, "server", None, ("127.0.0.1", 0),
                                  target=("127.0.0.1", echo.sockets[0].getsockname()[1]),
                                  seed=71, drop_rate=drop, drop_seed=72))
    await server.start()
    client = Tunnel(ChannelConfig(profile, model, "client", server.local_address, ("127.0.0.1", 0),
                                  local_port=0, seed=73, drop_rate=drop, drop_seed=74))
    await client.start()
    try:
        reader, writer = await asyncio.open_connection(*client.tcp_address)
        writer.write(payload)
        await writer.drain()
        back = await asyncio.wait_for(reader.readexactly(len(payload)), timeout)
        await asyncio.sleep(1.0)  # let the last completion acks land
        writer.close()
        return back, client.status(), server.status()
    finally:
        client.stop()
        server.stop()
        echo.close()


@pytest.fixture(scope="module")
def loopback_runs(game_profile, synchro_model):
    data = os.urandom(1024)
    out = {"data": data}
    t0 = time.perf_counter()
    out["clean"] = asyncio.run(_loopback_transfer(game_profile, synchro_model, data, 0.0, 60))
    out["clean_time"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    try:
        out["lossy"] = asyncio.run(_loopback_transfer(game_profile, synchro_model, data, 0.1, 240))
    except asyncio.TimeoutError:
        out["lossy"] = None
    out["lossy_time"] = time.perf_counter() - t0
    return out


def _sha(b):
    return hashlib.sha256(b).hexdigest()


@pytest.mark.slow
def test_criterion_7a_loopback_hash_identical(loopback_runs):
    back, cst, sst = loopback_runs["clean"]
    data = loopback_runs["data"]
    ok = _sha(back) == _sha(data) and sst["recv"]["bytes_delivered"] == 1024 and cst["send"]["bytes_completed"] == 1024
    record("7.a", ok, f"1 KiB echoed through client/server, sha256 match={_sha(back) == _sha(data)}",
           loopback_runs["clean_time"], 300)


@pytest.mark.slow
def test_criterion_7b_goodput_bracket(loopback_runs):
    # Measured the way the tunnel reports it: acknowledged payload bits over the
    # time from the first data frame to the last completion.  The framing here
    # carries 63 payload bytes in nearly every firing, so a clean 1 KiB transfer
    # lands in the kilobit range, well above the bracket and below the ceiling.
    _, cst, _ = loopback_runs["clean"]
    g = cst["goodput_bps"]
    ok = 100 <= g <= 500
    record("7.b", ok, f"goodput {g:.0f} bps (bracket [100, 500], ceiling 15477)", loopback_runs["clean_time"], 300)


@pytest.mark.slow
def test_criterion_7c_lossy_completes(loopback_runs):
    run = loopback_runs["lossy"]
    data = loopback_runs["data"]
    ok = run is not None and run[0] == data and run[1]["send"]["dropped_by_link"] > 0
    detail = "timed out" if run is None else (
        f"1 KiB intact at 10% drop, {run[1]['send']['dropped_by_link']} datagrams dropped, "
        f"{run[1]['send']['retransmissions']} retransmissions, goodput {run[1]['goodput_bps']:.0f} bps")
    record("7.c", ok, detail, loopback_runs["lossy_time"], 300)


# -- 8 ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_load_independent_timing(game_profile, synchro_model):
    t0 = time.perf_counter()
    horizon = 2000 * synchro_model.mean_delay
    accepted = []
    for run in range(RUNS):
        idle = Endpoint(game_profile, synchro_model, seed=1000 + run, record=True)
        simulate(idle, Endpoint(game_profile, synchro_model, seed=2000 + run), until=horizon)
        busy = Endpoint(game_profile, synchro_model, seed=3000 + run, record=True)
        busy.submit(os.urandom(200_000))
        simulate(busy, Endpoint(game_profile, synchro_model, seed=4000 + run), until=horizon)
        # saturated: stream bytes were still queued when the window closed
        assert busy.sender.backlog_bytes > 0
        rng = np.random.default_rng(run)
        gi = rng.choice(np.diff(idle.send_log), 100, replace=False)
        gb = rng.choice(np.diff(busy.send_log), 100, replace=False)
        accepted.append(not stats.ks_two_sample(gi, gb).reject)
    elapsed = time.perf_counter() - t0
    n = sum(accepted)
    record("8", n >= 18, f"{n}/{RUNS} idle-vs-saturated KS tests fail to reject (need 18)", elapsed, 600)
