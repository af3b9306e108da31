"""The DSP as a network service: answers client QUERY frames.

Each client query opens a fresh session to the DAP, runs the encrypted range
query and the Return step, and answers the client with the mailbox token and
the masks.  The client then fetches the masked rows from the DAP itself.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass

from .index import SLQIndex
from .paillier import PublicKey
from .primitives import DspContext, Prf
from .protocols import DEFAULT_SIGMA, ClientShare, EncRangeQuery, return_results, slq_range_query
from .transport import REPLY, MsgType, ProtocolError, Session, Transcript, open_session, session_seed
from .wire import Reader, Writer


@dataclass
class QueryReply:
    share: ClientShare
    width: int
    candidates: int
    dap_transcript: str


def encode_query(pk: PublicKey, q: EncRangeQuery, sigma: int = DEFAULT_SIGMA) -> Writer:
    return Writer(pk).u32(q.d).u32(sigma).cts(q.lo).cts(q.hi)


def decode_query(rd: Reader) -> tuple[EncRangeQuery, int]:
    d = rd.u32()
    sigma = rd.u32()
    if not 1 <= d <= 16 or not 1 <= sigma <= 64:
        raise ProtocolError("malformed query header")
    return EncRangeQuery(rd.cts(d), rd.cts(d)), sigma


def send_query(session: Session, q: EncRangeQuery, sigma: int = DEFAULT_SIGMA) -> QueryReply:
    """Client side: submit an encrypted rectangle to the DSP."""
    rd = session.request(MsgType.QUERY, encode_query(session.pk, q, sigma))
    token = rd.raw(16)
    count = rd.u32()
    d = rd.u32()
    width = rd.u32()
    candidates = rd.u32()
    masks = [rd.sints(d) for _ in range(count)]
    text = rd.raw(rd.u32()).decode()
    rd.done()
    return QueryReply(ClientShare(token, d, masks), width, candidates, text)


class DspService:
    """Handler for one client connection to the DSP."""

    def __init__(self, pk: PublicKey, index: SLQIndex, dap_endpoint: tuple[str, int],
                 seed: bytes | None = None) -> None:
        self.pk = pk
        self.key_id = pk.key_id
        self.index = index
        self.dap_endpoint = dap_endpoint
        self.seed = seed if seed is not None else secrets.token_bytes(32)
        self.transcript = Transcript()
        self.queries = 0
        self.last_dap_transcript: Transcript | None = None

    def handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        if msg_type != MsgType.QUERY:
            raise ProtocolError(f"DSP does not serve message type {msg_type}")
        rd = Reader(self.pk, payload)
        q, sigma = decode_query(rd)
        rd.done()
        if q.d != self.index.meta.d:
            raise ProtocolError("query dimension does not match the index")
        idx = self.queries
        self.queries += 1
        with open_session("tcp", self.pk, endpoint=self.dap_endpoint) as session:
            dsp = DspContext.create(self.pk, session, session_seed(self.seed, idx))
            out = slq_range_query(dsp, self.index, q, sigma)
            share = return_results(dsp, out.results, q.d)
        self.last_dap_transcript = session.transcript
        text = session.transcript.dumps().encode()
        w = Writer(self.pk).raw(share.token).u32(len(share.masks)).u32(q.d)
        w.u32(out.width).u32(out.candidates)
        for row in share.masks:
            w.sints(row)
        w.u32(len(text)).raw(text)
        return msg_type | REPLY, w.payload()


def seed_bytes(seed: int | None) -> bytes | None:
    return None if seed is None else Prf(f"dsp-{seed}").key
