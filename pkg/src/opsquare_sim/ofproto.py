"""Binary control-channel protocol and in-process sessions.

OpenFlow-flavored but trimmed to what an optical fabric needs: feature
discovery, LUT programming (flow mods carrying an optical flow id and a
wavelength), statistics polling, and errors. All integers big-endian.

    header (8B):  version=0x01 | msg_type | length(2) | xid(4)
    msg_type:     1 FEATURE_REQUEST   (no body)
                  2 FEATURE_REPLY     dpid(8) kind(1) n_ports(2) caps(4)
                  3 FLOW_MOD          command(1) in_port(2) flow_id(4)
                                      wavelength(2) n_instr(1) instr*
                  4 STATS_REQUEST     (no body)
                  5 STATS_REPLY      n_records(2) + 44B records
                  6 ERROR             code(2) text_len(2) utf-8 text

FLOW_MOD instructions: OUTPUT = 0x00 port(2); SET_PRIORITY = 0x01 prio(1).
At most one of each. For ToR entries in_port is repurposed to carry the
destination ToR flat index the entry matches on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable

from .errors import ProtocolViolation

VERSION = 0x01

_HEADER = struct.Struct("!BBHI")
_FEATURE_REPLY = struct.Struct("!QBHI")
_FLOWMOD_FIXED = struct.Struct("!BHIHB")
_INSTR_OUTPUT = struct.Struct("!BH")
_INSTR_PRIORITY = struct.Struct("!BB")
_STATS_COUNT = struct.Struct("!H")
_STATS_RECORD = struct.Struct("!IQQQQQ")
_ERROR_FIXED = struct.Struct("!HH")

INSTR_OUTPUT = 0x00
INSTR_SET_PRIORITY = 0x01

CAP_OPTICAL_FAST_SWITCHING = 1 << 0


class MsgType(IntEnum):
    FEATURE_REQUEST = 1
    FEATURE_REPLY = 2
    FLOW_MOD = 3
    STATS_REQUEST = 4
    STATS_REPLY = 5
    ERROR = 6


class FlowModCommand(IntEnum):
    ADD = 0
    MODIFY = 1
    DELETE = 2


class ErrorCode(IntEnum):
    BAD_PORT = 1
    BAD_REQUEST = 2


class CodecError(Exception):
    """Base for all encode/decode failures."""


class Truncated(CodecError):
    pass


class BadVersion(CodecError):
    pass


class UnknownType(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class MalformedBody(CodecError):
    pass


class EncodeError(CodecError):
    pass


@dataclass(frozen=True)
class FeatureRequest:
    xid: int


@dataclass(frozen=True)
class FeatureReply:
    xid: int
    datapath_id: int
    device_kind: int  # NodeKind wire value
    n_ports: int
    capabilities: int


@dataclass(frozen=True)
class FlowMod:
    xid: int
    command: FlowModCommand
    in_port: int          # ToR entries: destination ToR flat index
    flow_id: int          # slice id
    wavelength: int
    output_port: int | None = None
    priority: int | None = None


@dataclass(frozen=True)
class StatsRequest:
    xid: int


@dataclass(frozen=True)
class StatsRecord:
    slice_id: int
    lost_packets: int
    retransmitted_packets: int
    packets_sent: int
    mean_latency_ns: int
    window_ns: int


@dataclass(frozen=True)
class StatsReply:
    xid: int
    records: tuple[StatsRecord, ...] = field(default_factory=tuple)


@dataclass(frozen=True)
class ErrorMsg:
    xid: int
    code: ErrorCode
    text: str = ""


Message = (FeatureRequest | FeatureReply | FlowMod | StatsRequest
           | StatsReply | ErrorMsg)


def _check(value: int, bits: int, what: str) -> int:
    if not 0 <= value < (1 << bits):
        raise EncodeError(f"{what}={value} does not fit {bits} bits")
    return value


def encode(msg: Message) -> bytes:
    if isinstance(msg, FeatureRequest):
        body = b""
        mtype = MsgType.FEATURE_REQUEST
    elif isinstance(msg, FeatureReply):
        body = _FEATURE_REPLY.pack(
            _check(msg.datapath_id, 64, "datapath_id"),
            _check(msg.device_kind, 8, "device_kind"),
            _check(msg.n_ports, 16, "n_ports"),
            _check(msg.capabilities, 32, "capabilities"))
        mtype = MsgType.FEATURE_REPLY
    elif isinstance(msg, FlowMod):
        instrs = b""
        n = 0
        if msg.output_port is not None:
            instrs += _INSTR_OUTPUT.pack(
                INSTR_OUTPUT, _check(msg.output_port, 16, "output_port"))
            n += 1
        if msg.priority is not None:
            instrs += _INSTR_PRIORITY.pack(
                INSTR_SET_PRIORITY, _check(msg.priority, 8, "priority"))
            n += 1
        body = _FLOWMOD_FIXED.pack(
            _check(int(msg.command), 8, "command"),
            _check(msg.in_port, 16, "in_port"),
            _check(msg.flow_id, 32, "flow_id"),
            _check(msg.wavelength, 16, "wavelength"),
            n) + instrs
        mtype = MsgType.FLOW_MOD
    elif isinstance(msg, StatsRequest):
        body = b""
        mtype = MsgType.STATS_REQUEST
    elif isinstance(msg, StatsReply):
        body = _STATS_COUNT.pack(_check(len(msg.records), 16, "n_records"))
        for r in msg.records:
            body += _STATS_RECORD.pack(
                _check(r.slice_id, 32, "slice_id"),
                _check(r.lost_packets, 64, "lost_packets"),
                _check(r.retransmitted_packets, 64, "retransmitted_packets"),
                _check(r.packets_sent, 64, "packets_sent"),
                _check(r.mean_latency_ns, 64, "mean_latency_ns"),
                _check(r.window_ns, 64, "window_ns"))
        mtype = MsgType.STATS_REPLY
    elif isinstance(msg, ErrorMsg):
        text = msg.text.encode()
        if len(text) > 0xFFFF:
            raise EncodeError("error text too long")
        body = _ERROR_FIXED.pack(int(msg.code), len(text)) + text
        mtype = MsgType.ERROR
    else:
        raise EncodeError(f"cannot encode {type(msg).__name__}")
    length = _HEADER.size + len(body)
    if length > 0xFFFF:
        raise EncodeError("message exceeds 16-bit length field")
    return _HEADER.pack(VERSION, mtype, length, _check(msg.xid, 32, "xid")) + body


def decode(buf: bytes) -> Message:
    """Decode exactly one message; trailing bytes are a length mismatch."""
    msg, used = decode_prefix(buf)
    if used != len(buf):
        raise LengthMismatch(f"{len(buf) - used} trailing bytes after message")
    return msg


def decode_prefix(buf: bytes, offset: int = 0) -> tuple[Message, int]:
    """Decode one message starting at offset; returns (message, next offset)."""
    if len(buf) - offset < _HEADER.size:
        raise Truncated("buffer shorter than header")
    version, mtype, length, xid = _HEADER.unpack_from(buf, offset)
    if version != VERSION:
        raise BadVersion(f"version {version:#x}")
    if length < _HEADER.size:
        raise LengthMismatch(f"declared length {length} below header size")
    if len(buf) - offset < length:
        raise Truncated(f"declared {length} bytes, have {len(buf) - offset}")
    body = buf[offset + _HEADER.size:offset + length]
    end = offset + length

    if mtype == MsgType.FEATURE_REQUEST:
        if body:
            raise LengthMismatch("FEATURE_REQUEST carries no body")
        return FeatureRequest(xid), end
    if mtype == MsgType.FEATURE_REPLY:
        if len(body) != _FEATURE_REPLY.size:
            raise LengthMismatch("FEATURE_REPLY body must be 15 bytes")
        dpid, kind, n_ports, caps = _FEATURE_REPLY.unpack(body)
        if kind > 2:
            raise MalformedBody(f"unknown device_kind {kind}")
        return FeatureReply(xid, dpid, kind, n_ports, caps), end
    if mtype == MsgType.FLOW_MOD:
        return _decode_flow_mod(xid, body), end
    if mtype == MsgType.STATS_REQUEST:
        if body:
            raise LengthMismatch("STATS_REQUEST carries no body")
        return StatsRequest(xid), end
    if mtype == MsgType.STATS_REPLY:
        return _decode_stats_reply(xid, body), end
    if mtype == MsgType.ERROR:
        return _decode_error(xid, body), end
    raise UnknownType(f"msg_type {mtype}")


def _decode_flow_mod(xid: int, body: bytes) -> FlowMod:
    if len(body) < _FLOWMOD_FIXED.size:
        raise LengthMismatch("FLOW_MOD body shorter than fixed part")
    command, in_port, flow_id, wavelength, n_instr = _FLOWMOD_FIXED.unpack_from(body)
    try:
        cmd = FlowModCommand(command)
    except ValueError:
        raise MalformedBody(f"unknown flow mod command {command}") from None
    pos = _FLOWMOD_FIXED.size
    output_port = priority = None
    for _ in range(n_instr):
        if pos >= len(body):
            raise LengthMismatch("instruction list truncated")
        itype = body[pos]
        if itype == INSTR_OUTPUT:
            if pos + _INSTR_OUTPUT.size > len(body):
                raise LengthMismatch("OUTPUT instruction truncated")
            if output_port is not None:
                raise MalformedBody("duplicate OUTPUT instruction")
            _, output_port = _INSTR_OUTPUT.unpack_from(body, pos)
            pos += _INSTR_OUTPUT.size
        elif itype == INSTR_SET_PRIORITY:
            if pos + _INSTR_PRIORITY.size > len(body):
                raise LengthMismatch("SET_PRIORITY instruction truncated")
            if priority is not None:
                raise MalformedBody("duplicate SET_PRIORITY instruction")
            _, priority = _INSTR_PRIORITY.unpack_from(body, pos)
            pos += _INSTR_PRIORITY.size
        else:
            raise MalformedBody(f"unknown instruction type {itype}")
    if pos != len(body):
        raise LengthMismatch("bytes left over after instruction list")
    return FlowMod(xid, cmd, in_port, flow_id, wavelength, output_port, priority)


def _decode_stats_reply(xid: int, body: bytes) -> StatsReply:
    if len(body) < _STATS_COUNT.size:
        raise LengthMismatch("STATS_REPLY body shorter than record count")
    (n,) = _STATS_COUNT.unpack_from(body)
    expect = _STATS_COUNT.size + n * _STATS_RECORD.size
    if len(body) != expect:
        raise LengthMismatch(f"{n} records imply {expect} body bytes, have {len(body)}")
    records = []
    pos = _STATS_COUNT.size
    for _ in range(n):
        records.append(StatsRecord(*_STATS_RECORD.unpack_from(body, pos)))
        pos += _STATS_RECORD.size
    return StatsReply(xid, tuple(records))


def _decode_error(xid: int, body: bytes) -> ErrorMsg:
    if len(body) < _ERROR_FIXED.size:
        raise LengthMismatch("ERROR body shorter than fixed part")
    code, text_len = _ERROR_FIXED.unpack_from(body)
    if len(body) != _ERROR_FIXED.size + text_len:
        raise LengthMismatch("ERROR text length disagrees with body size")
    try:
        ec = ErrorCode(code)
    except ValueError:
        raise MalformedBody(f"unknown error code {code}") from None
    try:
        text = body[_ERROR_FIXED.size:].decode()
    except UnicodeDecodeError:
        raise MalformedBody("error text is not valid UTF-8") from None
    return ErrorMsg(xid, ec, text)


def dump(msg: Message) -> str:
    """One-line human-readable form, stable for debug logs."""
    if isinstance(msg, FeatureRequest):
        return f"FEATURE_REQUEST xid={msg.xid}"
    if isinstance(msg, FeatureReply):
        kind = ("TOR", "IS", "ES")[msg.device_kind]
        return (f"FEATURE_REPLY xid={msg.xid} dpid={msg.datapath_id} kind={kind} "
                f"ports={msg.n_ports} caps={msg.capabilities:#x}")
    if isinstance(msg, FlowMod):
        parts = [f"FLOW_MOD xid={msg.xid} cmd={msg.command.name} "
                 f"flow={msg.flow_id} dst={msg.in_port} wl={msg.wavelength}"]
        if msg.output_port is not None:
            parts.append(f"out={msg.output_port}")
        if msg.priority is not None:
            parts.append(f"prio={msg.priority}")
        return " ".join(parts)
    if isinstance(msg, StatsRequest):
        return f"STATS_REQUEST xid={msg.xid}"
    if isinstance(msg, StatsReply):
        recs = " ".join(
            f"[slice={r.slice_id} lost={r.lost_packets} rtx={r.retransmitted_packets}"
            f" sent={r.packets_sent} lat={r.mean_latency_ns} win={r.window_ns}]"
            for r in msg.records)
        return f"STATS_REPLY xid={msg.xid} n={len(msg.records)} {recs}".rstrip()
    if isinstance(msg, ErrorMsg):
        return f"ERROR xid={msg.xid} code={msg.code.name} text={msg.text!r}"
    raise TypeError(type(msg).__name__)


class Session:
    """Reliable ordered channel between controller and one device agent.

    Both directions cross the codec. `request` delivers the encoded message
    to the agent after `delay_ns`, and the agent's reply travels back the
    same way. Replies must echo the request xid.
    """

    def __init__(self, clock, handler: Callable[[Message], Message | None],
                 delay_ns: int = 0):
        self.clock = clock
        self.handler = handler
        self.delay_ns = delay_ns

    def request(self, msg: Message, on_reply: Callable[[Message], None] | None = None):
        buf = encode(msg)
        self.clock.schedule(self.clock.now + self.delay_ns,
                            self._deliver, buf, msg.xid, on_reply)

    def _deliver(self, buf: bytes, xid: int, on_reply):
        reply = self.handler(decode(buf))
        if reply is None:
            return
        if reply.xid != xid:
            raise ProtocolViolation(
                f"reply xid {reply.xid} does not match request xid {xid}")
        rbuf = encode(reply)
        if on_reply is not None:
            self.clock.schedule(self.clock.now + self.delay_ns,
                                lambda: on_reply(decode(rbuf)))
