import csv

import numpy as np
import pytest

from spacdc.cli import bench_rows, main
from spacdc.config import ExperimentConfig, parse_text, scenario_values
from spacdc.ecc import deserialize_cipher, mea_decrypt
from spacdc.errors import InvalidConfig
from spacdc.realmat import dequantize, read_matrix, write_matrix


def data_rows(path):
    return list(csv.reader(l for l in path.read_text().splitlines() if not l.startswith("#")))


def header_line(path):
    return path.read_bytes().split(b"\n", 1)[0].decode()


@pytest.fixture
def fixture_matrix(tmp_path):
    path = tmp_path / "x.txt"
    write_matrix(path, np.arange(1.0, 13.0).reshape(4, 3))
    return path


# -------------------------------------------------------------- config

def test_parse_text_comments_and_unknown_keys():
    vals = parse_text("# c\ncodec.k = 3  # inline\n\ncluster.stragglers = [1, 2]\n")
    assert vals == {"codec.k": "3", "cluster.stragglers": "[1, 2]"}
    with pytest.raises(InvalidConfig, match="unknown key"):
        parse_text("codec.zzz = 1")
    with pytest.raises(InvalidConfig, match="expected"):
        parse_text("codec.k 3")


def test_layering_and_typed_access(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("codec.k = 3\ncluster.n = 10\ncluster.stragglers = 1,2\n")
    cfg = ExperimentConfig.load(path, seed=4, overrides={"codec.k": "5"})
    assert cfg.int("codec.k") == 5 and cfg.int("codec.n") == 10
    assert cfg.list("cluster.stragglers", int) == [1, 2]
    assert cfg.bool("cluster.encrypt") is True
    with pytest.raises(InvalidConfig):
        cfg.float("train.dataset")
    with pytest.raises(InvalidConfig):
        ExperimentConfig.load(overrides={"codec.n": "4", "cluster.n": "5"})


def test_hash_tracks_values_and_seed_but_not_output_dir():
    a = ExperimentConfig.load(seed=1)
    assert a.hash() == ExperimentConfig.load(seed=1, overrides={"output.dir": "elsewhere"}).hash()
    assert a.hash() != ExperimentConfig.load(seed=2).hash()
    assert a.hash() != ExperimentConfig.load(seed=1, overrides={"codec.k": "3"}).hash()
    assert a.header().startswith(f"spacdc config_hash={a.hash()} seed=1")


def test_scenarios_pin_sizes():
    for name, S in (("s1", 0), ("s2", 3), ("s3", 5), ("s4", 7)):
        v = scenario_values(name, 0)
        assert v["codec.n"] == "30" and v["codec.t"] == "3"
        assert len([s for s in v["cluster.stragglers"].split(",") if s]) == S
        assert v["cluster.wait_policy"] == f"first_r({30 - S})"
    assert scenario_values("s4", 1) == scenario_values("s4", 1)


# -------------------------------------------------------------- encode

def test_encode_writes_shares_and_manifest(tmp_path, fixture_matrix):
    args = ["encode", "--set", f"cluster.input={fixture_matrix}", "--set", "codec.n=4",
            "--set", "codec.k=2", "--set", "codec.t=1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    shares = sorted((tmp_path / "a").glob("share_*.bin"))
    assert len(shares) == 4
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    beta_line = next(l for l in manifest.splitlines() if l.startswith("beta = "))
    assert len(beta_line.split("=")[1].split(",")) == 3
    for p in list(shares) + [tmp_path / "a" / "manifest.txt"]:
        assert header_line(p).startswith("# spacdc config_hash=")
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_encoded_share_decrypts_to_a_codec_share(tmp_path, fixture_matrix):
    from spacdc.cli import build_cluster, codec_config
    from spacdc.codec import encode, gen_masks
    from spacdc.realmat import partition_rows

    over = {"cluster.input": str(fixture_matrix), "codec.n": "4", "output.dir": str(tmp_path)}
    assert main(["encode"] + sum((["--set", f"{k}={v}"] for k, v in over.items()), [])) == 0
    cfg = ExperimentConfig.load(overrides=over)
    cluster, code = build_cluster(cfg), codec_config(cfg)
    blob = (tmp_path / "share_002.bin").read_bytes().split(b"\n", 1)[1]
    share = dequantize(mea_decrypt(deserialize_cipher(blob), cluster.profiles[2].keypair.sk, cluster.curve))
    mask_seq = np.random.SeedSequence(0).spawn(3 + 4)[0]
    blocks = partition_rows(read_matrix(fixture_matrix), 2)
    ref = encode(blocks, gen_masks(1, blocks[0].shape, 1.0, mask_seq), code)[2].payload
    np.testing.assert_allclose(share, ref, atol=2 ** -24)


def test_encode_without_input_is_a_config_error(tmp_path):
    assert main(["encode", "--out", str(tmp_path)]) == 2


def test_encode_missing_input_is_an_io_error(tmp_path):
    assert main(["encode", "--set", f"cluster.input={tmp_path / 'nope.txt'}", "--out", str(tmp_path)]) == 4


# -------------------------------------------------------------- run

REPORT_HEADER = ["index", "elapsed_ms", "returned", "straggler", "colluder"]


def _check_report_schema(rows, N):
    assert rows[0] == REPORT_HEADER
    for r in rows[1:N + 1]:
        assert len(r) == 5 and r[2] in "01" and r[3] in "01" and r[4] in "01"
        float(r[1])
    assert rows[N + 1][0] == "summary"
    assert rows[N + 2][0] == "max_rel_error"


def test_run_scenario_s4(tmp_path):
    assert main(["run", "--scenario", "s4", "--seed", "3", "--out", str(tmp_path)]) == 0
    rows = data_rows(tmp_path / "report.csv")
    _check_report_schema(rows, 30)
    assert int(rows[31][2]) == 23
    assert sum(int(r[2]) for r in rows[1:31]) == 23
    assert not any(int(r[2]) and int(r[3]) for r in rows[1:31])
    assert len(list(tmp_path.glob("result_*.txt"))) == 4


def test_run_identity_reproduces_input(tmp_path, fixture_matrix):
    assert main(["run", "--set", f"cluster.input={fixture_matrix}", "--set", "codec.n=8",
                 "--set", "cluster.function=identity", "--out", str(tmp_path)]) == 0
    X = read_matrix(fixture_matrix)
    got = np.vstack([read_matrix(tmp_path / "result_00.txt"), read_matrix(tmp_path / "result_01.txt")])
    rows = data_rows(tmp_path / "report.csv")
    err = float(rows[-1][1])
    # reported error matches the error of the written outputs
    blocks = [X[:2], X[2:]]
    measured = max(np.linalg.norm(got[2 * j:2 * j + 2] - b) / np.linalg.norm(b) for j, b in enumerate(blocks))
    assert measured == pytest.approx(err, rel=1e-5)


def test_run_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["run", "--scenario", "s2", "--out", str(tmp_path / d)]) == 0
    for name in ("report.csv", "result_00.txt"):
        assert (tmp_path / "a" / name).read_text() == (tmp_path / "b" / name).read_text()


def test_fewer_stragglers_do_not_hurt(tmp_path):
    errs = {"s1": [], "s4": []}
    for scen in errs:
        for seed in range(5):
            out = tmp_path / f"{scen}_{seed}"
            assert main(["run", "--scenario", scen, "--seed", str(seed), "--out", str(out),
                         "--set", "cluster.encrypt=false"]) == 0
            errs[scen].append(float(data_rows(out / "report.csv")[-1][1]))
    assert np.median(errs["s1"]) <= np.median(errs["s4"])


def test_job_failure_exit_code(tmp_path):
    assert main(["run", "--set", "cluster.wait_policy=deadline(0.1)", "--out", str(tmp_path)]) == 3


def test_bad_config_exit_codes(tmp_path):
    assert main(["run", "--set", "nope.key=1", "--out", str(tmp_path)]) == 2
    assert main(["run", "--set", "cluster.wait_policy=sometimes", "--out", str(tmp_path)]) == 2
    assert main(["run", "--set", "cluster.stragglers=99", "--out", str(tmp_path)]) == 2
    assert main(["run", "--config", str(tmp_path / "absent.cfg"), "--out", str(tmp_path)]) == 4
    with pytest.raises(SystemExit) as exc:
        main(["run", "--scenario", "s9"])
    assert exc.value.code == 2


# -------------------------------------------------------------- train

def test_train_both_emits_paired_traces(tmp_path):
    args = ["train", "--algo", "both", "--out", str(tmp_path), "--set", "train.epochs=3",
            "--set", "cluster.encrypt=false"]
    assert main(args) == 0
    a, b = data_rows(tmp_path / "trace_spacdc.csv"), data_rows(tmp_path / "trace_conv.csv")
    assert a[0] == b[0] == ["epoch", "loss", "accuracy", "epoch_ms"]
    assert len(a) == len(b) == 4
    assert header_line(tmp_path / "trace_spacdc.csv") == header_line(tmp_path / "trace_conv.csv")


def test_train_scenario2_spacdc_is_faster(tmp_path):
    args = ["train", "--algo", "both", "--scenario", "s2", "--out", str(tmp_path),
            "--set", "train.epochs=2", "--set", "cluster.encrypt=false"]
    assert main(args) == 0
    ms = lambda name: np.median([float(r[3]) for r in data_rows(tmp_path / name)[1:]])
    assert ms("trace_spacdc.csv") < ms("trace_conv.csv")


def test_train_blobs_accuracy(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "cluster.encrypt=false"]) == 0
    rows = data_rows(tmp_path / "trace_spacdc.csv")
    assert len(rows) == 31 and float(rows[-1][2]) > 0.9


# -------------------------------------------------------------- audit / bench

def test_audit_rows(tmp_path, fixture_matrix):
    X = read_matrix(fixture_matrix)
    args = ["audit", "--out", str(tmp_path), "--set", f"cluster.input={fixture_matrix}",
            "--set", "codec.n=8", "--set", "codec.t=1", "--set", "cluster.colluders=0",
            "--set", f"codec.mask_scale={1e5 * np.abs(X).max()}", "--set", "audit.trials=4000"]
    assert main(args) == 0
    rows = data_rows(tmp_path / "audit.csv")
    assert rows[0][:3] == ["n_colluders", "colluders", "verdict"]
    assert [r[2] for r in rows[1:]] == ["pass", "bound_exceeded"]
    first = (tmp_path / "audit.csv").read_text()
    assert main(args) == 0
    assert (tmp_path / "audit.csv").read_text() == first


def test_audit_needs_masks(tmp_path):
    assert main(["audit", "--set", "codec.t=0", "--out", str(tmp_path)]) == 2


def test_bench_csv(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--set", "bench.sizes=2,4,8",
                 "--set", "bench.repeats=3", "--set", "bench.rows=8", "--set", "bench.cols=8"]) == 0
    rows = data_rows(tmp_path / "bench.csv")
    assert rows[0] == ["operation", "size", "median_ns", "ns_per_target"]
    assert [(r[0], int(r[1])) for r in rows[1:]] == [
        ("decode", 2), ("decode", 4), ("decode", 8), ("encode", 2), ("encode", 4), ("encode", 8)]
    with pytest.raises(InvalidConfig):
        bench_rows([0], 1, 2, 2, 0)
