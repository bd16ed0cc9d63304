import random

import numpy as np
import pytest

from spacdc import codec
from spacdc.cluster import (
    Cluster,
    ClusterReport,
    Message,
    TaskSpec,
    WaitPolicy,
    collusion_audit,
    make_profiles,
    run_job,
    simulate_delays,
)
from spacdc.codec import default_anchors
from spacdc.ecc import P256, TOY_CURVE, CipherMatrix
from spacdc.errors import JobFailed, ProtocolError
from spacdc.realmat import QuantizedMatrix, partition_rows


def _cluster(N, *, stragglers=(), colluders=(), encrypt=True, **kw):
    profiles = make_profiles(N, P256, stragglers=stragglers, colluders=colluders, rng_seed=1)
    return Cluster(profiles, P256, master_seed=2, encrypt=encrypt, **kw)


def _X(rows=8, cols=5, seed=0):
    return np.random.default_rng(seed).standard_normal((rows, cols))


def test_wait_policy_parse_roundtrip():
    for text in ("all", "first_r(7)", "deadline(2.5)"):
        assert str(WaitPolicy.parse(text)) == text
    for bad in ("some", "first_r(0)", "first_r()", "deadline(-1)"):
        with pytest.raises(ValueError):
            WaitPolicy.parse(bad)


def test_wait_policy_select():
    completion = np.array([3.0, 1.0, 2.0, 10.0])
    order = [1, 2, 0, 3]
    assert WaitPolicy("all").select(order, completion) == (order, 10.0)
    assert WaitPolicy("first_r", 2).select(order, completion) == ([1, 2], 2.0)
    assert WaitPolicy("deadline", 5.0).select(order, completion) == ([1, 2, 0], 5.0)
    assert WaitPolicy("deadline", 0.5).select(order, completion) == ([], 0.5)


def test_simulated_delays():
    plain = make_profiles(4, TOY_CURVE, base_delay=2.0)
    np.testing.assert_array_equal(simulate_delays(plain, 0), [2.0] * 4)
    slow = make_profiles(4, TOY_CURVE, stragglers=[2], base_delay=1.0, straggler_delay=10.0)
    assert np.argmax(simulate_delays(slow, 0, jitter_max=0.5)) == 2
    many = make_profiles(100_000, TOY_CURVE, base_delay=0.0)
    assert simulate_delays(many, 3, jitter_max=2.0).mean() == pytest.approx(1.0, rel=0.01)


def test_make_profiles_rejects_out_of_range():
    with pytest.raises(ValueError):
        make_profiles(3, TOY_CURVE, stragglers=[3])


def test_no_straggler_run_matches_bare_codec():
    N, K, T, seed = 8, 2, 1, 11
    cfg = default_anchors(N, K, T)
    X = _X()
    out, report = _cluster(N, encrypt=False, scale_bits=40).run(TaskSpec("identity", X, cfg), seed)
    mask_seq = np.random.SeedSequence(seed).spawn(3 + N)[0]
    blocks = partition_rows(X, K)
    shares = codec.encode(blocks, codec.gen_masks(T, blocks[0].shape, 1.0, mask_seq), cfg)
    direct = codec.recover([codec.ReturnedResult(s.worker_index, s.payload) for s in shares], cfg)
    for a, b in zip(out, direct):
        np.testing.assert_allclose(a, b, atol=1e-10)
    ref = [np.linalg.norm(d - b) / np.linalg.norm(b) for d, b in zip(direct, blocks)]
    np.testing.assert_allclose(report.decode_targets_error, ref, rtol=1e-6)


def test_small_scenario_with_straggler():
    N = 8
    cl = _cluster(N, stragglers=[5])
    spec = TaskSpec("gram", _X(), default_anchors(N, 2, 1), WaitPolicy("first_r", N - 1))
    out, report = cl.run(spec, 0)
    assert report.returned_set == [0, 1, 2, 3, 4, 6, 7]
    assert [o.shape for o in out] == [(4, 4), (4, 4)]
    assert report.wall_clock >= max(report.per_worker_elapsed[i] for i in report.returned_set)
    _, full = cl.run(TaskSpec("gram", _X(), default_anchors(N, 2, 1)), 0)
    assert report.wall_clock < full.wall_clock


def test_same_seed_is_bit_identical():
    N = 6
    spec = TaskSpec("square", _X(), default_anchors(N, 2, 1), WaitPolicy("first_r", 4))
    runs = [_cluster(N, stragglers=[1], colluders=[3], jitter_max=0.3).run(spec, 5) for _ in range(2)]
    (o1, r1), (o2, r2) = runs
    for a, b in zip(o1, o2):
        np.testing.assert_array_equal(a, b)
    assert r1.csv_rows() == r2.csv_rows()
    np.testing.assert_array_equal(r1.colluder_views[3], r2.colluder_views[3])


def test_job_fails_when_nothing_arrives():
    spec = TaskSpec("identity", _X(), default_anchors(4, 2, 1), WaitPolicy("deadline", 0.1))
    with pytest.raises(JobFailed):
        _cluster(4, encrypt=False).run(spec, 0)


def test_receive_rejects_wrong_shape_and_plaintext():
    cl = _cluster(3)
    kp = cl.profiles[0].keypair
    msg = cl._send(np.ones((2, 2)), kp.pk, random.Random(0), "to_worker", 0, "share")
    with pytest.raises(ProtocolError, match="worker 0"):
        cl._receive(msg, kp.sk, (3, 3))
    forged = Message("to_worker", 0, "share", QuantizedMatrix(np.zeros((2, 2), dtype=object), 0))
    with pytest.raises(ProtocolError):
        cl._receive(forged, kp.sk)


def test_codec_size_must_match_cluster():
    with pytest.raises(ValueError):
        _cluster(4).run(TaskSpec("identity", _X(), default_anchors(5, 2, 1)), 0)


def test_realtime_mode_agrees_with_virtual_time():
    N = 5
    spec = TaskSpec("identity", _X(), default_anchors(N, 2, 1), WaitPolicy("first_r", 4))
    virt, rv = _cluster(N, stragglers=[2], encrypt=False).run(spec, 3)
    real, rr = _cluster(N, stragglers=[2], encrypt=False, realtime=True, time_unit=5e-3).run(spec, 3)
    assert sorted(rr.returned_set) == rv.returned_set == [0, 1, 3, 4]
    for a, b in zip(virt, real):
        np.testing.assert_array_equal(a, b)


def test_uncoded_baseline():
    N = 4
    X = _X(10, 3)
    W = np.random.default_rng(1).standard_normal((3, 2))
    Y, report = _cluster(N).run_uncoded("backprop_delta", X, W, 0)
    np.testing.assert_allclose(Y, X @ W, atol=1e-5)
    assert report.wait_policy == "all" and report.returned_set == list(range(N))
    with pytest.raises(ValueError):
        _cluster(N).run_uncoded("gram", X)


def test_report_csv_schema():
    N = 4
    _, report = _cluster(N, stragglers=[0], colluders=[1]).run(
        TaskSpec("identity", _X(), default_anchors(N, 2, 1), WaitPolicy("first_r", 3)), 0)
    rows = report.csv_rows()
    assert rows[0] == ["index", "elapsed_ms", "returned", "straggler", "colluder"]
    assert [r[0] for r in rows[1:N + 1]] == list(range(N))
    assert rows[1][2:] == [0, 1, 0] and rows[2][2:] == [1, 0, 1]
    assert rows[N + 1][0] == "summary" and rows[N + 1][2] == 3
    assert rows[N + 2][0] == "max_rel_error" and float(rows[N + 2][1]) >= 0


def _report_with(colluders):
    return ClusterReport([], [], [], 0.0, {}, [], list(colluders), 0, "all", False)


def test_audit_passes_everywhere_with_a_very_large_mask():
    X = _X()
    N = 8
    cfg = default_anchors(N, 2, 1, mask_scale=1e5 * np.abs(X).max())
    for i in range(N):
        rec = collusion_audit(_report_with([i]), X, cfg, rng_seed=i)
        assert rec.verdict == "pass", (i, rec)


def test_audit_flags_pooled_views_beyond_the_bound():
    X = _X()
    cfg = default_anchors(8, 2, 1, mask_scale=1e3 * np.abs(X).max())
    rec = collusion_audit(_report_with([2, 6]), X, cfg)
    assert rec.verdict == "bound_exceeded"
    assert rec.residual_mask < 1e-12  # two views cancel a single mask
    assert rec.p_value < 1e-6
    t0 = default_anchors(8, 2, 0)
    assert collusion_audit(_report_with([0]), X, t0).verdict == "bound_exceeded"


def test_audit_is_deterministic_and_needs_colluders():
    X = _X()
    cfg = default_anchors(8, 2, 1, mask_scale=100.0)
    a = collusion_audit(_report_with([4]), X, cfg, rng_seed=9)
    b = collusion_audit(_report_with([4]), X, cfg, rng_seed=9)
    assert a == b
    with pytest.raises(ValueError):
        collusion_audit(_report_with([]), X, cfg)


def test_run_job_wrapper():
    N = 4
    profiles = make_profiles(N, TOY_CURVE, rng_seed=0)
    out, report = run_job(TaskSpec("identity", _X(4, 2), default_anchors(N, 1, 0)), profiles, 0,
                          curve=TOY_CURVE, encrypt=False)
    assert report.returned_set == list(range(N)) and not report.encrypted
