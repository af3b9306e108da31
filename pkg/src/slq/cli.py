"""Command-line entry point: ``slq <command>``."""
from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from . import __version__
from .bench import (DISTRIBUTIONS, config_objects, gen_dataset, load_points, make_keys,
                    parse_config, run_bench, save_points)
from .dap import DapService, Mailbox
from .dsp import DspService, send_query, seed_bytes
from .index import (Delta, IndexConfig, OwnerIndex, build_index, load_index, load_rank_table,
                    serialize_delta)
from .paillier import (ALLOWED_BITS, Encrypter, dump_public_key, dump_secret_key, load_keypair,
                       load_public_key)
from .primitives import Prf
from .protocols import DEFAULT_SIGMA, fetch_masked, merge_results, rank_to_point, trapdoor
from .transport import FrameServer, TransportError, open_session, session_seed

PK_FILE = "pk.bin"
SK_FILE = "keypair.bin"


def parse_addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise click.BadParameter(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


def _load_pk(path: str):
    return load_public_key(Path(path).read_bytes())


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose: int) -> None:
    """Privacy-preserving learned spatial range queries over Paillier ciphertexts."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--bits", type=click.Choice([str(b) for b in ALLOWED_BITS]), default="1024",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", type=int, default=None, help="Deterministic keys (testing only).")
def keygen(bits: str, out_dir: str, seed: int | None) -> None:
    """Generate a key pair; writes pk.bin and keypair.bin."""
    keys = make_keys(int(bits), seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / PK_FILE).write_bytes(dump_public_key(keys.pk))
    (out / SK_FILE).write_bytes(dump_secret_key(keys))
    click.echo(f"key {keys.pk.key_id.hex()} ({bits} bits) written to {out}")


@main.command("gen-data")
@click.option("--dist", type=click.Choice(["uni", "nor", "ske"]), default="uni", show_default=True)
@click.option("-n", "--n", "n", type=int, default=2000, show_default=True)
@click.option("-d", "--d", "d", type=int, default=2, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--exponent", type=float, default=4.0, show_default=True,
              help="Exponent applied to the last dimension for ske.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def gen_data(dist: str, n: int, d: int, seed: int, exponent: float, out: str) -> None:
    """Write a synthetic dataset, one point per line."""
    save_points(out, gen_dataset(dist, n, d, seed, exponent))
    click.echo(f"{n} {dist} points written to {out}")


@main.command()
@click.option("--data", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pk", "pk_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("-d", "--d", "d", type=int, default=2, show_default=True)
@click.option("-b", type=int, default=IndexConfig.b, show_default=True, help="Bucket capacity.")
@click.option("-m", type=int, default=IndexConfig.m, show_default=True, help="Points per leaf.")
@click.option("-k", type=int, default=IndexConfig.k, show_default=True, help="Predictors per level.")
@click.option("--dummy-ratio", type=float, default=IndexConfig.dummy_ratio, show_default=True)
@click.option("--hidden", type=int, default=IndexConfig.hidden, show_default=True)
@click.option("--fuzzy/--no-fuzzy", default=True, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def build(data, pk_path, out, d, b, m, k, dummy_ratio, hidden, fuzzy, seed) -> None:
    """Build and encrypt an index (data-owner side)."""
    pk = _load_pk(pk_path)
    cfg = IndexConfig(b=b, m=m, k=k, dummy_ratio=dummy_ratio, hidden=hidden, fuzzy=fuzzy, seed=seed)
    owner = build_index(load_points(data, d), pk, cfg, enc=Encrypter(pk, rng=Prf(f"owner-{seed}")))
    violations = owner.audit()
    if violations:
        raise click.ClickException(f"{len(violations)} points fall outside their leaf's error bound")
    owner.save(out)
    click.echo(f"index with {owner.dsp.bucket_count} buckets and {len(owner.slice_leaves)} leaves "
               f"written to {out}")


@main.command("serve-dap")
@click.option("--keys", "key_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--listen", default="127.0.0.1:7701", show_default=True)
@click.option("--threaded", is_flag=True, help="One thread per session.")
@click.option("--seed", type=int, default=None, help="Deterministic session randomness.")
def serve_dap(key_dir: str, listen: str, threaded: bool, seed: int | None) -> None:
    """Serve DAP duties until interrupted."""
    keys = load_keypair((Path(key_dir) / SK_FILE).read_bytes())
    base = None if seed is None else Prf(f"dap-{seed}").key
    mailbox = Mailbox()
    server = FrameServer(parse_addr(listen), keys.pk.key_id,
                         lambda idx: DapService(keys, seed=session_seed(base, idx), mailbox=mailbox),
                         threaded=threaded)
    click.echo(f"DAP listening on {server.address[0]}:{server.address[1]}")
    _serve(server)


@main.command("serve-dsp")
@click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pk", "pk_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dap", "dap_addr", required=True)
@click.option("--listen", default="127.0.0.1:7702", show_default=True)
@click.option("--seed", type=int, default=None, help="Deterministic session randomness.")
def serve_dsp(index_path: str, pk_path: str, dap_addr: str, listen: str, seed: int | None) -> None:
    """Serve client range queries against an encrypted index."""
    pk = _load_pk(pk_path)
    index = load_index(Path(index_path).read_bytes(), pk)
    dap = parse_addr(dap_addr)
    base = seed_bytes(seed)
    server = FrameServer(parse_addr(listen), pk.key_id,
                         lambda idx: DspService(pk, index, dap, seed=session_seed(base, idx)))
    click.echo(f"DSP listening on {server.address[0]}:{server.address[1]}")
    _serve(server)


def _serve(server: FrameServer) -> None:
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


@main.command()
@click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="Index file; the published boundaries are read from its owner file.")
@click.option("--pk", "pk_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--dsp", "dsp_addr", required=True)
@click.option("--dap", "dap_addr", required=True)
@click.option("--range", "rng_text", required=True, help="lo_1,...,lo_d,hi_1,...,hi_d")
@click.option("--sigma", type=int, default=DEFAULT_SIGMA, show_default=True)
@click.option("--record-transcript", type=click.Path(dir_okay=False), default=None,
              help="Write the DSP-DAP transcript of this query as text.")
def query(index_path, pk_path, dsp_addr, dap_addr, rng_text, sigma, record_transcript) -> None:
    """Run one encrypted range query and print the matching points."""
    pk = _load_pk(pk_path)
    table = load_rank_table(index_path)
    coords = parse_floats(rng_text)
    if len(coords) != 2 * table.d:
        raise click.BadParameter(f"expected {2 * table.d} numbers", param_hint="--range")
    lo, hi = coords[:table.d], coords[table.d:]
    q = trapdoor(lo, hi, table, Encrypter(pk))
    try:
        with open_session("tcp", pk, endpoint=parse_addr(dsp_addr)) as dsp:
            reply = send_query(dsp, q, sigma)
        with open_session("tcp", pk, endpoint=parse_addr(dap_addr)) as dap:
            _, masked = fetch_masked(dap, reply.share.token)
    except TransportError as exc:
        raise click.ClickException(str(exc)) from exc
    ranks = merge_results(reply.share, masked)
    if record_transcript:
        Path(record_transcript).write_text(reply.dap_transcript)
    click.echo(f"# {len(ranks)} result(s), scan width {reply.width}, {reply.candidates} candidates")
    for r in sorted(ranks):
        click.echo(",".join(repr(c) for c in rank_to_point(table, r)))


@main.command()
@click.option("--index", "index_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pk", "pk_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--insert", "inserts", multiple=True, help="Point to insert, e.g. 0.5,0.25")
@click.option("--delete", "deletes", multiple=True, help="Point to delete.")
@click.option("--delta-out", type=click.Path(dir_okay=False), default=None,
              help="Also write the DSP-side edits of this batch.")
def update(index_path, pk_path, inserts, deletes, delta_out) -> None:
    """Insert or delete points (data-owner side) and rewrite the index."""
    pk = _load_pk(pk_path)
    owner = OwnerIndex.load(index_path, pk, Encrypter(pk))
    ops = []
    for text in inserts:
        res = owner.insert(parse_floats(text))
        ops += res.delta.ops
        click.echo(f"insert {text}: bucket {res.bucket}{' (new bucket)' if res.new_bucket else ''}")
    for text in deletes:
        res = owner.delete(parse_floats(text))
        ops += res.delta.ops
        click.echo(f"delete {text}: {res.status}")
    owner.save(index_path)
    if delta_out:
        Path(delta_out).write_bytes(serialize_delta(Delta(ops), pk))
    if owner.should_rebuild():
        click.echo("update volume exceeds the rebuild threshold; rebuild recommended")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="key = value file; command-line options override it.")
@click.option("--dist", type=click.Choice(DISTRIBUTIONS), default=None)
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("-n", "--n", "n", type=int, default=None)
@click.option("--queries", type=int, default=None)
@click.option("--query-size", type=float, default=None, help="Percent of the data space.")
@click.option("--aspect-ratio", type=float, default=None)
@click.option("-K", "--key-bits", "key_bits", type=int, default=None)
@click.option("-b", type=int, default=None)
@click.option("-m", type=int, default=None)
@click.option("--fuzzy/--no-fuzzy", default=None)
@click.option("--mode", type=click.Choice(["inproc", "tcp"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None)
def bench(config_path, dist, data, n, queries, query_size, aspect_ratio, key_bits, b, m, fuzzy,
          mode, seed, csv_path) -> None:
    """Build an index for a workload, run its queries, report metrics."""
    conf = parse_config(Path(config_path).read_text()) if config_path else {}
    overrides = {"distribution": dist, "data": data, "n": n, "queries": queries,
                 "query_size": query_size, "aspect_ratio": aspect_ratio, "K": key_bits, "b": b,
                 "m": m, "fuzzy": fuzzy, "mode": mode, "seed": seed}
    conf.update({k: v for k, v in overrides.items() if v is not None})
    if data and "distribution" not in conf:
        conf["distribution"] = "file"
    wl, cfg, opts = config_objects(conf)
    report = run_bench(wl, cfg, key_bits=opts["key_bits"], mode=opts["mode"], sigma=opts["sigma"],
                       insertion_rate=opts["insertion_rate"])
    click.echo(report.summary())
    if csv_path:
        report.to_csv(csv_path)
        click.echo(f"per-query CSV written to {csv_path}")
    if report.min_precision < 1.0:
        sys.exit(1)


if __name__ == "__main__":
    main()
