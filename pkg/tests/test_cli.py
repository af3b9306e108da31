import numpy as np
import pytest
from click.testing import CliRunner

from slq.bench import load_points, oracle_query
from slq.cli import main, parse_addr
from slq.dap import DapService, Mailbox
from slq.dsp import DspService
from slq.index import load_delta, load_index
from slq.paillier import load_keypair, load_public_key
from slq.transport import FrameServer, session_seed, start_server


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    for args in (["keygen", "--bits", "512", "--out", str(root / "keys"), "--seed", "3"],
                 ["gen-data", "--dist", "uni", "-n", "400", "--seed", "2", "--out", str(root / "pts.txt")],
                 ["build", "--data", str(root / "pts.txt"), "--pk", str(root / "keys" / "pk.bin"),
                  "-m", "150", "--out", str(root / "idx.slq")]):
        res = runner.invoke(main, args)
        assert res.exit_code == 0, res.output
    return root


def test_parse_addr():
    assert parse_addr("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_addr(":81") == ("127.0.0.1", 81)


def test_build_outputs(workspace):
    pk = load_public_key((workspace / "keys" / "pk.bin").read_bytes())
    index = load_index((workspace / "idx.slq").read_bytes(), pk)
    assert index.meta.n == 400
    assert (workspace / "idx.slq.owner.json").exists()


def test_query_round_trip(workspace):
    keys = load_keypair((workspace / "keys" / "keypair.bin").read_bytes())
    pk = keys.pk
    mailbox = Mailbox()
    dap = FrameServer(("127.0.0.1", 0), pk.key_id,
                      lambda i: DapService(keys, seed=session_seed(b"d", i), mailbox=mailbox),
                      threaded=True)
    start_server(dap)
    index = load_index((workspace / "idx.slq").read_bytes(), pk)
    dsp = FrameServer(("127.0.0.1", 0), pk.key_id,
                      lambda i: DspService(pk, index, dap.address, seed=session_seed(b"s", i)))
    start_server(dsp)
    try:
        out = workspace / "tr.txt"
        res = CliRunner().invoke(main, [
            "query", "--index", str(workspace / "idx.slq"), "--pk", str(workspace / "keys" / "pk.bin"),
            "--dsp", "%s:%d" % dsp.address, "--dap", "%s:%d" % dap.address,
            "--range", "0.1,0.1,0.4,0.3", "--record-transcript", str(out)])
        assert res.exit_code == 0, res.output
    finally:
        dsp.shutdown()
        dap.shutdown()
        dsp.server_close()
        dap.server_close()
    lines = [l for l in res.output.splitlines() if not l.startswith("#")]
    got = sorted(tuple(float(v) for v in l.split(",")) for l in lines)
    pts = load_points(workspace / "pts.txt")
    truth = sorted(tuple(pts[i]) for i in oracle_query(pts, [0.1, 0.1], [0.4, 0.3]))
    assert got == truth
    assert "send SLQ_MARK" in out.read_text()


def test_query_rejects_bad_range(workspace):
    res = CliRunner().invoke(main, [
        "query", "--index", str(workspace / "idx.slq"), "--pk", str(workspace / "keys" / "pk.bin"),
        "--dsp", "127.0.0.1:1", "--dap", "127.0.0.1:1", "--range", "0.1,0.2"])
    assert res.exit_code != 0


def test_update_writes_delta(workspace, tmp_path):
    import shutil

    for name in ("idx.slq", "idx.slq.owner.json"):
        shutil.copy(workspace / name, tmp_path / name)
    pts = load_points(workspace / "pts.txt")
    res = CliRunner().invoke(main, [
        "update", "--index", str(tmp_path / "idx.slq"), "--pk", str(workspace / "keys" / "pk.bin"),
        "--insert", "0.5,0.5", "--delete", "%r,%r" % tuple(map(float, pts[0])), "--delete", "9,9",
        "--delta-out", str(tmp_path / "d.bin")])
    assert res.exit_code == 0, res.output
    assert "not_found" in res.output and "deleted" in res.output
    pk = load_public_key((workspace / "keys" / "pk.bin").read_bytes())
    assert load_delta((tmp_path / "d.bin").read_bytes(), pk).ops
    assert load_index((tmp_path / "idx.slq").read_bytes(), pk).meta.n == 400


def test_bench_command(tmp_path):
    conf = tmp_path / "bench.conf"
    conf.write_text("n = 200\nqueries = 2\nquery_size = 2%\naspect_ratio = 1\nK = 512\nseed = 1\n")
    res = CliRunner().invoke(main, ["bench", "--config", str(conf), "--csv", str(tmp_path / "r.csv")])
    assert res.exit_code == 0, res.output
    assert "recall 1.0000" in res.output
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 3


def test_help_lists_commands():
    res = CliRunner().invoke(main, ["--help"])
    for cmd in ("keygen", "gen-data", "build", "serve-dap", "serve-dsp", "query", "update", "bench"):
        assert cmd in res.output
