//! OpenFlow 1.0 wire codec for the message subset the testbed exchanges.
//!
//! Everything here is a pure value transformation: decoding never keeps
//! references to connection state, encoding is deterministic, and both sides
//! of the codec round-trip field-exactly. Byte order is big-endian
//! throughout, as the protocol requires.
//!
//! Framing safety is the one non-negotiable rule: a header whose length field
//! is smaller than the 8-byte header itself is rejected immediately and never
//! propagated, so a corrupt peer can at worst get itself disconnected — it
//! cannot wedge the framing loop.

use std::fmt;

/// The only protocol version this crate speaks.
pub const OFP_VERSION: u8 = 1;

/// Size of the fixed message header.
pub const HEADER_LEN: usize = 8;

/// Length of the canonical benchmark packet-in probe: an 18-byte packet-in
/// fixed part (header included) followed by a 64-byte Ethernet frame.
pub const PROBE_PACKET_IN_LEN: usize = 82;

/// Length of the Ethernet frame carried by the canonical probe.
pub const PROBE_FRAME_LEN: usize = 64;

/// Raw OpenFlow 1.0 message type codes, including types this crate does not
/// model as structured messages but must still recognize on the wire.
pub mod type_code {
    pub const HELLO: u8 = 0;
    pub const ERROR: u8 = 1;
    pub const ECHO_REQUEST: u8 = 2;
    pub const ECHO_REPLY: u8 = 3;
    pub const VENDOR: u8 = 4;
    pub const FEATURES_REQUEST: u8 = 5;
    pub const FEATURES_REPLY: u8 = 6;
    pub const GET_CONFIG_REQUEST: u8 = 7;
    pub const GET_CONFIG_REPLY: u8 = 8;
    pub const SET_CONFIG: u8 = 9;
    pub const PACKET_IN: u8 = 10;
    pub const FLOW_REMOVED: u8 = 11;
    pub const PORT_STATUS: u8 = 12;
    pub const PACKET_OUT: u8 = 13;
    pub const FLOW_MOD: u8 = 14;
    pub const STATS_REQUEST: u8 = 16;
    pub const STATS_REPLY: u8 = 17;
    pub const BARRIER_REQUEST: u8 = 18;
    pub const BARRIER_REPLY: u8 = 19;
}

/// Flood pseudo-port: "output to all ports except ingress".
pub const OFPP_FLOOD: u16 = 0xfffb;

/// Wildcard mask with every match field wildcarded.
pub const OFPFW_ALL: u32 = 0x003f_ffff;
pub const OFPFW_IN_PORT: u32 = 1 << 0;
pub const OFPFW_DL_SRC: u32 = 1 << 2;
pub const OFPFW_DL_DST: u32 = 1 << 3;

/// Flow-mod command: add a new flow.
pub const OFPFC_ADD: u16 = 0;

/// Default flow priority, matching the protocol's OFP_DEFAULT_PRIORITY.
pub const DEFAULT_PRIORITY: u16 = 0x8000;

/// Packet-in reason: no matching flow entry.
pub const REASON_NO_MATCH: u8 = 0;

const MATCH_LEN: usize = 40;
const ACTION_OUTPUT_LEN: usize = 8;
const FEATURES_REPLY_FIXED: usize = 32;
const PHY_PORT_LEN: usize = 48;
const PACKET_IN_FIXED: usize = 18;
const FLOW_MOD_FIXED: usize = HEADER_LEN + MATCH_LEN + 24;
const PACKET_OUT_FIXED: usize = 16;

/// Codec error. `MalformedLength` and `BadVersion` identify a peer that
/// cannot be spoken to; the rest describe individual bad messages.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WireError {
    #[error("header length field {length} is below the {HEADER_LEN}-byte minimum")]
    MalformedLength { length: u16 },
    #[error("unsupported OpenFlow version {version} (only {OFP_VERSION} is spoken)")]
    BadVersion { version: u8 },
    #[error("truncated body: header promises {expected} bytes, {got} present")]
    TruncatedBody { expected: usize, got: usize },
    #[error("field out of range: {what}")]
    FieldOutOfRange { what: &'static str },
    #[error("sink capacity {capacity} too small for {needed}-byte message")]
    InsufficientCapacity { needed: usize, capacity: usize },
}

/// Message type as carried in the header. Types outside the modeled subset
/// are preserved as `Unknown` so they can be skipped (or answered raw by the
/// switch emulator) instead of poisoning the connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MsgType {
    Hello,
    Error,
    EchoRequest,
    EchoReply,
    FeaturesRequest,
    FeaturesReply,
    PacketIn,
    PacketOut,
    FlowMod,
    Unknown(u8),
}

impl MsgType {
    pub fn from_code(code: u8) -> MsgType {
        match code {
            type_code::HELLO => MsgType::Hello,
            type_code::ERROR => MsgType::Error,
            type_code::ECHO_REQUEST => MsgType::EchoRequest,
            type_code::ECHO_REPLY => MsgType::EchoReply,
            type_code::FEATURES_REQUEST => MsgType::FeaturesRequest,
            type_code::FEATURES_REPLY => MsgType::FeaturesReply,
            type_code::PACKET_IN => MsgType::PacketIn,
            type_code::PACKET_OUT => MsgType::PacketOut,
            type_code::FLOW_MOD => MsgType::FlowMod,
            other => MsgType::Unknown(other),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            MsgType::Hello => type_code::HELLO,
            MsgType::Error => type_code::ERROR,
            MsgType::EchoRequest => type_code::ECHO_REQUEST,
            MsgType::EchoReply => type_code::ECHO_REPLY,
            MsgType::FeaturesRequest => type_code::FEATURES_REQUEST,
            MsgType::FeaturesReply => type_code::FEATURES_REPLY,
            MsgType::PacketIn => type_code::PACKET_IN,
            MsgType::PacketOut => type_code::PACKET_OUT,
            MsgType::FlowMod => type_code::FLOW_MOD,
            MsgType::Unknown(code) => code,
        }
    }
}

/// Validated fixed header: 8 bytes, big-endian `version, type, length, xid`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfHeader {
    pub version: u8,
    pub msg_type: MsgType,
    /// Total message length including this header; always >= 8.
    pub length: u16,
    pub xid: u32,
}

impl OfHeader {
    pub fn new(msg_type: MsgType, length: u16, xid: u32) -> OfHeader {
        debug_assert!(length as usize >= HEADER_LEN);
        OfHeader { version: OFP_VERSION, msg_type, length, xid }
    }

    /// Serialized form: exactly 8 bytes.
    pub fn serialize(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0] = self.version;
        out[1] = self.msg_type.code();
        out[2..4].copy_from_slice(&self.length.to_be_bytes());
        out[4..8].copy_from_slice(&self.xid.to_be_bytes());
        out
    }

    /// Length of the body that follows the header.
    pub fn body_len(&self) -> usize {
        self.length as usize - HEADER_LEN
    }
}

/// Parses and validates a fixed header from the first 8 bytes of `bytes`.
///
/// The length field is checked before anything else: a value below 8 means
/// the peer's framing cannot be trusted at all, so no header is produced.
pub fn parse_header(bytes: &[u8]) -> Result<OfHeader, WireError> {
    debug_assert!(bytes.len() >= HEADER_LEN, "parse_header needs 8 bytes");
    let length = u16::from_be_bytes([bytes[2], bytes[3]]);
    if (length as usize) < HEADER_LEN {
        return Err(WireError::MalformedLength { length });
    }
    let version = bytes[0];
    if version != OFP_VERSION {
        return Err(WireError::BadVersion { version });
    }
    Ok(OfHeader {
        version,
        msg_type: MsgType::from_code(bytes[1]),
        length,
        xid: u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
    })
}

/// Returns the length of the next complete frame at the start of `buf`, or
/// `None` if more bytes are needed. Errors out (without consuming anything)
/// on an untrustworthy header, so the caller can drop the connection.
pub fn frame_len(buf: &[u8]) -> Result<Option<usize>, WireError> {
    if buf.len() < HEADER_LEN {
        return Ok(None);
    }
    let header = parse_header(buf)?;
    let len = header.length as usize;
    if buf.len() < len {
        Ok(None)
    } else {
        Ok(Some(len))
    }
}

/// Converts 6 MAC bytes to the 48-bit integer form used by the MAC table.
pub fn mac_from_bytes(b: &[u8]) -> u64 {
    debug_assert!(b.len() >= 6);
    (u64::from(b[0]) << 40)
        | (u64::from(b[1]) << 32)
        | (u64::from(b[2]) << 24)
        | (u64::from(b[3]) << 16)
        | (u64::from(b[4]) << 8)
        | u64::from(b[5])
}

/// Converts a 48-bit MAC integer back to wire bytes.
pub fn mac_to_bytes(mac: u64) -> [u8; 6] {
    [
        (mac >> 40) as u8,
        (mac >> 32) as u8,
        (mac >> 24) as u8,
        (mac >> 16) as u8,
        (mac >> 8) as u8,
        mac as u8,
    ]
}

/// OpenFlow 1.0 flow match (40 bytes on the wire). Fields the learning
/// switch does not match on stay zeroed with their wildcard bits set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Match {
    pub wildcards: u32,
    pub in_port: u16,
    pub dl_src: [u8; 6],
    pub dl_dst: [u8; 6],
    pub dl_vlan: u16,
    pub dl_vlan_pcp: u8,
    pub dl_type: u16,
    pub nw_tos: u8,
    pub nw_proto: u8,
    pub nw_src: u32,
    pub nw_dst: u32,
    pub tp_src: u16,
    pub tp_dst: u16,
}

impl Match {
    /// Exact match on ingress port and both MACs; everything else wildcarded.
    /// This is the match shape a learning switch installs.
    pub fn exact_l2(in_port: u16, src_mac: u64, dst_mac: u64) -> Match {
        Match {
            wildcards: OFPFW_ALL & !(OFPFW_IN_PORT | OFPFW_DL_SRC | OFPFW_DL_DST),
            in_port,
            dl_src: mac_to_bytes(src_mac),
            dl_dst: mac_to_bytes(dst_mac),
            ..Match::default()
        }
    }

    fn encode(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&self.wildcards.to_be_bytes());
        out[4..6].copy_from_slice(&self.in_port.to_be_bytes());
        out[6..12].copy_from_slice(&self.dl_src);
        out[12..18].copy_from_slice(&self.dl_dst);
        out[18..20].copy_from_slice(&self.dl_vlan.to_be_bytes());
        out[20] = self.dl_vlan_pcp;
        out[21] = 0; // pad
        out[22..24].copy_from_slice(&self.dl_type.to_be_bytes());
        out[24] = self.nw_tos;
        out[25] = self.nw_proto;
        out[26] = 0; // pad
        out[27] = 0; // pad
        out[28..32].copy_from_slice(&self.nw_src.to_be_bytes());
        out[32..36].copy_from_slice(&self.nw_dst.to_be_bytes());
        out[36..38].copy_from_slice(&self.tp_src.to_be_bytes());
        out[38..40].copy_from_slice(&self.tp_dst.to_be_bytes());
    }

    fn decode(b: &[u8]) -> Match {
        Match {
            wildcards: be32(b, 0),
            in_port: be16(b, 4),
            dl_src: b[6..12].try_into().unwrap(),
            dl_dst: b[12..18].try_into().unwrap(),
            dl_vlan: be16(b, 18),
            dl_vlan_pcp: b[20],
            dl_type: be16(b, 22),
            nw_tos: b[24],
            nw_proto: b[25],
            nw_src: be32(b, 28),
            nw_dst: be32(b, 32),
            tp_src: be16(b, 36),
            tp_dst: be16(b, 38),
        }
    }
}

/// Flow actions. Only the output action appears in this testbed's traffic;
/// any other action type on the wire is a decode error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Output { port: u16, max_len: u16 },
}

impl Action {
    fn encode(&self, out: &mut [u8]) {
        match *self {
            Action::Output { port, max_len } => {
                out[0..2].copy_from_slice(&0u16.to_be_bytes()); // OFPAT_OUTPUT
                out[2..4].copy_from_slice(&(ACTION_OUTPUT_LEN as u16).to_be_bytes());
                out[4..6].copy_from_slice(&port.to_be_bytes());
                out[6..8].copy_from_slice(&max_len.to_be_bytes());
            }
        }
    }
}

fn decode_actions(mut b: &[u8]) -> Result<Vec<Action>, WireError> {
    let mut actions = Vec::new();
    while !b.is_empty() {
        if b.len() < 4 {
            return Err(WireError::FieldOutOfRange { what: "action shorter than its 4-byte header" });
        }
        let kind = be16(b, 0);
        let len = be16(b, 2) as usize;
        if len < 8 || !len.is_multiple_of(8) || len > b.len() {
            return Err(WireError::FieldOutOfRange { what: "action length" });
        }
        if kind != 0 {
            return Err(WireError::FieldOutOfRange { what: "unsupported action type" });
        }
        actions.push(Action::Output { port: be16(b, 4), max_len: be16(b, 6) });
        b = &b[len..];
    }
    Ok(actions)
}

/// Physical port description in a features reply (48 bytes on the wire).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhyPort {
    pub port_no: u16,
    pub hw_addr: [u8; 6],
    pub name: [u8; 16],
    pub config: u32,
    pub state: u32,
    pub curr: u32,
    pub advertised: u32,
    pub supported: u32,
    pub peer: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub xid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub xid: u32,
    pub err_type: u16,
    pub code: u16,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Echo {
    pub xid: u32,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturesRequest {
    pub xid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturesReply {
    pub xid: u32,
    pub datapath_id: u64,
    pub n_buffers: u32,
    pub n_tables: u8,
    pub capabilities: u32,
    pub actions: u32,
    pub ports: Vec<PhyPort>,
}

/// A switch-to-controller "flow table missed, decide for me" message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketIn {
    pub xid: u32,
    pub buffer_id: u32,
    pub total_len: u16,
    pub in_port: u16,
    pub reason: u8,
    /// Ethernet frame: destination MAC at 0..6, source MAC at 6..12.
    pub frame: Vec<u8>,
}

impl PacketIn {
    pub fn dst_mac(&self) -> u64 {
        mac_from_bytes(&self.frame[0..6])
    }
    pub fn src_mac(&self) -> u64 {
        mac_from_bytes(&self.frame[6..12])
    }
}

/// Borrowed, allocation-free view of a packet-in frame. This is the decode
/// path the pre-allocated buffer strategy uses: scalar fields are parsed and
/// the frame stays where the socket read put it.
#[derive(Debug, Clone, Copy)]
pub struct PacketInView<'a> {
    pub xid: u32,
    pub buffer_id: u32,
    pub total_len: u16,
    pub in_port: u16,
    pub reason: u8,
    pub frame: &'a [u8],
}

impl<'a> PacketInView<'a> {
    /// Parses a complete packet-in message (header included).
    pub fn parse(msg: &'a [u8]) -> Result<PacketInView<'a>, WireError> {
        if msg.len() < PACKET_IN_FIXED {
            return Err(WireError::TruncatedBody { expected: PACKET_IN_FIXED, got: msg.len() });
        }
        let frame = &msg[PACKET_IN_FIXED..];
        if frame.len() < 12 {
            return Err(WireError::FieldOutOfRange { what: "packet-in frame shorter than two MACs" });
        }
        Ok(PacketInView {
            xid: be32(msg, 4),
            buffer_id: be32(msg, 8),
            total_len: be16(msg, 12),
            in_port: be16(msg, 14),
            reason: msg[16],
            frame,
        })
    }

    pub fn dst_mac(&self) -> u64 {
        mac_from_bytes(&self.frame[0..6])
    }
    pub fn src_mac(&self) -> u64 {
        mac_from_bytes(&self.frame[6..12])
    }
}

/// Controller-to-switch flow-table installation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowMod {
    pub xid: u32,
    pub match_: Match,
    pub cookie: u64,
    pub command: u16,
    pub idle_timeout: u16,
    pub hard_timeout: u16,
    pub priority: u16,
    pub buffer_id: u32,
    pub out_port: u16,
    pub flags: u16,
    pub actions: Vec<Action>,
}

/// Idle timeout written into learned flows. The value travels on the wire
/// only; nothing in the testbed expires entries.
pub const LEARNED_FLOW_IDLE_TIMEOUT: u16 = 5;

impl FlowMod {
    /// The flow-mod a learning switch sends in answer to a packet-in:
    /// exact L2 match, ADD, xid and buffer_id echoed from the probe, a single
    /// output action. A flood decision uses the flood pseudo-port so that
    /// every packet-in is answered by exactly one flow-mod.
    pub fn learned(
        xid: u32,
        buffer_id: u32,
        in_port: u16,
        src_mac: u64,
        dst_mac: u64,
        out_port: u16,
    ) -> FlowMod {
        FlowMod {
            xid,
            match_: Match::exact_l2(in_port, src_mac, dst_mac),
            cookie: 0,
            command: OFPFC_ADD,
            idle_timeout: LEARNED_FLOW_IDLE_TIMEOUT,
            hard_timeout: 0,
            priority: DEFAULT_PRIORITY,
            buffer_id,
            out_port: 0xffff, // OFPP_NONE: no "send to this port on delete" semantics
            flags: 0,
            actions: vec![Action::Output { port: out_port, max_len: 0 }],
        }
    }
}

/// Controller-to-switch single-packet injection. Present in the codec so the
/// harness can recognize, measure, and audit controllers that answer probes
/// with packet-outs; this testbed's engine never sends one in benchmark mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketOut {
    pub xid: u32,
    pub buffer_id: u32,
    pub in_port: u16,
    pub actions: Vec<Action>,
    /// Raw frame to send; empty when buffer_id references a switch buffer.
    pub data: Vec<u8>,
}

/// A message whose type lies outside the modeled subset, kept raw so callers
/// can skip it or answer it byte-wise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownMsg {
    pub type_code: u8,
    pub xid: u32,
    pub body: Vec<u8>,
}

/// Fully materialized message, the owned decode result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OfMessage {
    Hello(Hello),
    Error(ErrorMsg),
    EchoRequest(Echo),
    EchoReply(Echo),
    FeaturesRequest(FeaturesRequest),
    FeaturesReply(FeaturesReply),
    PacketIn(PacketIn),
    PacketOut(PacketOut),
    FlowMod(FlowMod),
    Unknown(UnknownMsg),
}

impl OfMessage {
    pub fn msg_type(&self) -> MsgType {
        match self {
            OfMessage::Hello(_) => MsgType::Hello,
            OfMessage::Error(_) => MsgType::Error,
            OfMessage::EchoRequest(_) => MsgType::EchoRequest,
            OfMessage::EchoReply(_) => MsgType::EchoReply,
            OfMessage::FeaturesRequest(_) => MsgType::FeaturesRequest,
            OfMessage::FeaturesReply(_) => MsgType::FeaturesReply,
            OfMessage::PacketIn(_) => MsgType::PacketIn,
            OfMessage::PacketOut(_) => MsgType::PacketOut,
            OfMessage::FlowMod(_) => MsgType::FlowMod,
            OfMessage::Unknown(u) => MsgType::Unknown(u.type_code),
        }
    }

    pub fn xid(&self) -> u32 {
        match self {
            OfMessage::Hello(m) => m.xid,
            OfMessage::Error(m) => m.xid,
            OfMessage::EchoRequest(m) | OfMessage::EchoReply(m) => m.xid,
            OfMessage::FeaturesRequest(m) => m.xid,
            OfMessage::FeaturesReply(m) => m.xid,
            OfMessage::PacketIn(m) => m.xid,
            OfMessage::PacketOut(m) => m.xid,
            OfMessage::FlowMod(m) => m.xid,
            OfMessage::Unknown(m) => m.xid,
        }
    }

    /// The header this message serializes with; length is always derived
    /// from the actual encoded size, so it cannot disagree with the bytes.
    pub fn header(&self) -> OfHeader {
        OfHeader::new(self.msg_type(), encoded_len(self) as u16, self.xid())
    }
}

impl fmt::Display for OfMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = self.header();
        write!(f, "{:?} len={} xid={}", h.msg_type, h.length, h.xid)
    }
}

/// Total encoded size of `msg` in bytes (header included).
pub fn encoded_len(msg: &OfMessage) -> usize {
    match msg {
        OfMessage::Hello(_) | OfMessage::FeaturesRequest(_) => HEADER_LEN,
        OfMessage::Error(m) => HEADER_LEN + 4 + m.data.len(),
        OfMessage::EchoRequest(m) | OfMessage::EchoReply(m) => HEADER_LEN + m.payload.len(),
        OfMessage::FeaturesReply(m) => FEATURES_REPLY_FIXED + m.ports.len() * PHY_PORT_LEN,
        OfMessage::PacketIn(m) => PACKET_IN_FIXED + m.frame.len(),
        OfMessage::PacketOut(m) => {
            PACKET_OUT_FIXED + m.actions.len() * ACTION_OUTPUT_LEN + m.data.len()
        }
        OfMessage::FlowMod(m) => FLOW_MOD_FIXED + m.actions.len() * ACTION_OUTPUT_LEN,
        OfMessage::Unknown(m) => HEADER_LEN + m.body.len(),
    }
}

/// Encodes `msg` into the front of `sink`, returning the bytes written.
///
/// Never allocates: if `sink` cannot hold the message the caller gets
/// `InsufficientCapacity` and decides whether to grow or rotate its buffer —
/// this function will not resize anything behind the caller's back.
pub fn encode_into(msg: &OfMessage, sink: &mut [u8]) -> Result<usize, WireError> {
    let needed = encoded_len(msg);
    if sink.len() < needed {
        return Err(WireError::InsufficientCapacity { needed, capacity: sink.len() });
    }
    let out = &mut sink[..needed];
    out[..HEADER_LEN].copy_from_slice(&msg.header().serialize());
    match msg {
        OfMessage::Hello(_) | OfMessage::FeaturesRequest(_) => {}
        OfMessage::Error(m) => {
            out[8..10].copy_from_slice(&m.err_type.to_be_bytes());
            out[10..12].copy_from_slice(&m.code.to_be_bytes());
            out[12..].copy_from_slice(&m.data);
        }
        OfMessage::EchoRequest(m) | OfMessage::EchoReply(m) => {
            out[8..].copy_from_slice(&m.payload);
        }
        OfMessage::FeaturesReply(m) => {
            out[8..16].copy_from_slice(&m.datapath_id.to_be_bytes());
            out[16..20].copy_from_slice(&m.n_buffers.to_be_bytes());
            out[20] = m.n_tables;
            out[21..24].fill(0); // pad
            out[24..28].copy_from_slice(&m.capabilities.to_be_bytes());
            out[28..32].copy_from_slice(&m.actions.to_be_bytes());
            for (i, port) in m.ports.iter().enumerate() {
                let p = &mut out[FEATURES_REPLY_FIXED + i * PHY_PORT_LEN..][..PHY_PORT_LEN];
                p[0..2].copy_from_slice(&port.port_no.to_be_bytes());
                p[2..8].copy_from_slice(&port.hw_addr);
                p[8..24].copy_from_slice(&port.name);
                p[24..28].copy_from_slice(&port.config.to_be_bytes());
                p[28..32].copy_from_slice(&port.state.to_be_bytes());
                p[32..36].copy_from_slice(&port.curr.to_be_bytes());
                p[36..40].copy_from_slice(&port.advertised.to_be_bytes());
                p[40..44].copy_from_slice(&port.supported.to_be_bytes());
                p[44..48].copy_from_slice(&port.peer.to_be_bytes());
            }
        }
        OfMessage::PacketIn(m) => {
            out[8..12].copy_from_slice(&m.buffer_id.to_be_bytes());
            out[12..14].copy_from_slice(&m.total_len.to_be_bytes());
            out[14..16].copy_from_slice(&m.in_port.to_be_bytes());
            out[16] = m.reason;
            out[17] = 0; // pad
            out[PACKET_IN_FIXED..].copy_from_slice(&m.frame);
        }
        OfMessage::PacketOut(m) => {
            out[8..12].copy_from_slice(&m.buffer_id.to_be_bytes());
            out[12..14].copy_from_slice(&m.in_port.to_be_bytes());
            let actions_len = (m.actions.len() * ACTION_OUTPUT_LEN) as u16;
            out[14..16].copy_from_slice(&actions_len.to_be_bytes());
            let mut off = PACKET_OUT_FIXED;
            for action in &m.actions {
                action.encode(&mut out[off..off + ACTION_OUTPUT_LEN]);
                off += ACTION_OUTPUT_LEN;
            }
            out[off..].copy_from_slice(&m.data);
        }
        OfMessage::FlowMod(m) => {
            m.match_.encode(&mut out[8..48]);
            out[48..56].copy_from_slice(&m.cookie.to_be_bytes());
            out[56..58].copy_from_slice(&m.command.to_be_bytes());
            out[58..60].copy_from_slice(&m.idle_timeout.to_be_bytes());
            out[60..62].copy_from_slice(&m.hard_timeout.to_be_bytes());
            out[62..64].copy_from_slice(&m.priority.to_be_bytes());
            out[64..68].copy_from_slice(&m.buffer_id.to_be_bytes());
            out[68..70].copy_from_slice(&m.out_port.to_be_bytes());
            out[70..72].copy_from_slice(&m.flags.to_be_bytes());
            let mut off = FLOW_MOD_FIXED;
            for action in &m.actions {
                action.encode(&mut out[off..off + ACTION_OUTPUT_LEN]);
                off += ACTION_OUTPUT_LEN;
            }
        }
        OfMessage::Unknown(m) => {
            out[0] = OFP_VERSION;
            out[1] = m.type_code;
            out[8..].copy_from_slice(&m.body);
        }
    }
    Ok(needed)
}

/// Convenience for the per-packet-object strategy: encode into a fresh
/// allocation. (The pooled strategy uses [`encode_into`] instead.)
pub fn encode_to_vec(msg: &OfMessage) -> Vec<u8> {
    let mut out = vec![0u8; encoded_len(msg)];
    let n = encode_into(msg, &mut out).expect("sized exactly");
    debug_assert_eq!(n, out.len());
    out
}

/// Decodes the message body that follows an already-parsed header.
/// `body.len()` must equal `header.body_len()` (the framing layer guarantees
/// this); a shorter slice is reported as `TruncatedBody`.
pub fn decode_message(header: &OfHeader, body: &[u8]) -> Result<OfMessage, WireError> {
    if body.len() != header.body_len() {
        return Err(WireError::TruncatedBody { expected: header.body_len(), got: body.len() });
    }
    let xid = header.xid;
    let msg = match header.msg_type {
        MsgType::Hello => OfMessage::Hello(Hello { xid }),
        MsgType::Error => {
            if body.len() < 4 {
                return Err(WireError::TruncatedBody { expected: 4, got: body.len() });
            }
            OfMessage::Error(ErrorMsg {
                xid,
                err_type: be16(body, 0),
                code: be16(body, 2),
                data: body[4..].to_vec(),
            })
        }
        MsgType::EchoRequest => OfMessage::EchoRequest(Echo { xid, payload: body.to_vec() }),
        MsgType::EchoReply => OfMessage::EchoReply(Echo { xid, payload: body.to_vec() }),
        MsgType::FeaturesRequest => OfMessage::FeaturesRequest(FeaturesRequest { xid }),
        MsgType::FeaturesReply => {
            const FIXED: usize = FEATURES_REPLY_FIXED - HEADER_LEN;
            if body.len() < FIXED || !(body.len() - FIXED).is_multiple_of(PHY_PORT_LEN) {
                return Err(WireError::FieldOutOfRange { what: "features reply size" });
            }
            let n_ports = (body.len() - FIXED) / PHY_PORT_LEN;
            let mut ports = Vec::with_capacity(n_ports);
            for i in 0..n_ports {
                let p = &body[FIXED + i * PHY_PORT_LEN..][..PHY_PORT_LEN];
                ports.push(PhyPort {
                    port_no: be16(p, 0),
                    hw_addr: p[2..8].try_into().unwrap(),
                    name: p[8..24].try_into().unwrap(),
                    config: be32(p, 24),
                    state: be32(p, 28),
                    curr: be32(p, 32),
                    advertised: be32(p, 36),
                    supported: be32(p, 40),
                    peer: be32(p, 44),
                });
            }
            OfMessage::FeaturesReply(FeaturesReply {
                xid,
                datapath_id: be64(body, 0),
                n_buffers: be32(body, 8),
                n_tables: body[12],
                capabilities: be32(body, 16),
                actions: be32(body, 20),
                ports,
            })
        }
        MsgType::PacketIn => {
            const FIXED: usize = PACKET_IN_FIXED - HEADER_LEN;
            if body.len() < FIXED {
                return Err(WireError::TruncatedBody { expected: FIXED, got: body.len() });
            }
            let frame = &body[FIXED..];
            if frame.len() < 12 {
                return Err(WireError::FieldOutOfRange {
                    what: "packet-in frame shorter than two MACs",
                });
            }
            OfMessage::PacketIn(PacketIn {
                xid,
                buffer_id: be32(body, 0),
                total_len: be16(body, 4),
                in_port: be16(body, 6),
                reason: body[8],
                frame: frame.to_vec(),
            })
        }
        MsgType::PacketOut => {
            if body.len() < PACKET_OUT_FIXED - HEADER_LEN {
                return Err(WireError::TruncatedBody {
                    expected: PACKET_OUT_FIXED - HEADER_LEN,
                    got: body.len(),
                });
            }
            let actions_len = be16(body, 6) as usize;
            if 8 + actions_len > body.len() {
                return Err(WireError::FieldOutOfRange { what: "packet-out actions length" });
            }
            OfMessage::PacketOut(PacketOut {
                xid,
                buffer_id: be32(body, 0),
                in_port: be16(body, 4),
                actions: decode_actions(&body[8..8 + actions_len])?,
                data: body[8 + actions_len..].to_vec(),
            })
        }
        MsgType::FlowMod => {
            const FIXED: usize = FLOW_MOD_FIXED - HEADER_LEN;
            if body.len() < FIXED {
                return Err(WireError::TruncatedBody { expected: FIXED, got: body.len() });
            }
            OfMessage::FlowMod(FlowMod {
                xid,
                match_: Match::decode(&body[0..MATCH_LEN]),
                cookie: be64(body, 40),
                command: be16(body, 48),
                idle_timeout: be16(body, 50),
                hard_timeout: be16(body, 52),
                priority: be16(body, 54),
                buffer_id: be32(body, 56),
                out_port: be16(body, 60),
                flags: be16(body, 62),
                actions: decode_actions(&body[FIXED..])?,
            })
        }
        MsgType::Unknown(code) => {
            OfMessage::Unknown(UnknownMsg { type_code: code, xid, body: body.to_vec() })
        }
    };
    Ok(msg)
}

/// Decodes one complete frame (header plus body).
pub fn decode_frame(frame: &[u8]) -> Result<OfMessage, WireError> {
    let header = parse_header(frame)?;
    if frame.len() != header.length as usize {
        return Err(WireError::TruncatedBody {
            expected: header.length as usize,
            got: frame.len(),
        });
    }
    decode_message(&header, &frame[HEADER_LEN..])
}

/// Wire size of the reply produced by [`encode_learned_flow_mod`]: flow-mod
/// fixed part plus one output action.
pub const LEARNED_FLOW_MOD_LEN: usize = FLOW_MOD_FIXED + ACTION_OUTPUT_LEN;

/// Encodes a learned-flow reply (exact-L2 ADD with a single output action)
/// straight into `sink` without materializing a [`FlowMod`] — the
/// zero-allocation encode path for the pooled buffer strategy. Byte-for-byte
/// identical to encoding `FlowMod::learned` with the same arguments.
pub fn encode_learned_flow_mod(
    sink: &mut [u8],
    xid: u32,
    buffer_id: u32,
    in_port: u16,
    src_mac: u64,
    dst_mac: u64,
    out_port: u16,
) -> Result<usize, WireError> {
    if sink.len() < LEARNED_FLOW_MOD_LEN {
        return Err(WireError::InsufficientCapacity {
            needed: LEARNED_FLOW_MOD_LEN,
            capacity: sink.len(),
        });
    }
    let out = &mut sink[..LEARNED_FLOW_MOD_LEN];
    out[0] = OFP_VERSION;
    out[1] = type_code::FLOW_MOD;
    out[2..4].copy_from_slice(&(LEARNED_FLOW_MOD_LEN as u16).to_be_bytes());
    out[4..8].copy_from_slice(&xid.to_be_bytes());
    Match::exact_l2(in_port, src_mac, dst_mac).encode(&mut out[8..48]);
    out[48..56].fill(0); // cookie
    out[56..58].copy_from_slice(&OFPFC_ADD.to_be_bytes());
    out[58..60].copy_from_slice(&LEARNED_FLOW_IDLE_TIMEOUT.to_be_bytes());
    out[60..62].fill(0); // hard_timeout
    out[62..64].copy_from_slice(&DEFAULT_PRIORITY.to_be_bytes());
    out[64..68].copy_from_slice(&buffer_id.to_be_bytes());
    out[68..70].copy_from_slice(&0xffffu16.to_be_bytes()); // OFPP_NONE
    out[70..72].fill(0); // flags
    Action::Output { port: out_port, max_len: 0 }.encode(&mut out[FLOW_MOD_FIXED..]);
    Ok(LEARNED_FLOW_MOD_LEN)
}

/// Builds the canonical 82-byte benchmark probe directly into an array:
/// packet-in fixed part plus a 64-byte Ethernet frame whose destination and
/// source MACs carry the generator's addresses. Pure function of its
/// arguments, so probe streams replay bit-identically.
pub fn probe_packet_in(
    xid: u32,
    buffer_id: u32,
    in_port: u16,
    src_mac: u64,
    dst_mac: u64,
) -> [u8; PROBE_PACKET_IN_LEN] {
    let mut out = [0u8; PROBE_PACKET_IN_LEN];
    out[0] = OFP_VERSION;
    out[1] = type_code::PACKET_IN;
    out[2..4].copy_from_slice(&(PROBE_PACKET_IN_LEN as u16).to_be_bytes());
    out[4..8].copy_from_slice(&xid.to_be_bytes());
    out[8..12].copy_from_slice(&buffer_id.to_be_bytes());
    out[12..14].copy_from_slice(&(PROBE_FRAME_LEN as u16).to_be_bytes());
    out[14..16].copy_from_slice(&in_port.to_be_bytes());
    out[16] = REASON_NO_MATCH;
    // out[17] is the pad byte.
    let frame = &mut out[PACKET_IN_FIXED..];
    frame[0..6].copy_from_slice(&mac_to_bytes(dst_mac));
    frame[6..12].copy_from_slice(&mac_to_bytes(src_mac));
    frame[12..14].copy_from_slice(&0x0800u16.to_be_bytes()); // IPv4 ethertype
    // A minimal, constant IPv4 header fills out the 64-byte frame so probe
    // payloads look like real traffic to anything that inspects them.
    frame[14] = 0x45; // version 4, IHL 5
    frame[16..18].copy_from_slice(&((PROBE_FRAME_LEN - 14) as u16).to_be_bytes());
    frame[22] = 64; // TTL
    frame[23] = 17; // UDP
    out
}

/// Raw reply builders for messages the switch emulator answers byte-wise
/// (these types are deliberately outside the structured message set).
pub fn raw_get_config_reply(xid: u32) -> [u8; 12] {
    let mut out = [0u8; 12];
    out[0] = OFP_VERSION;
    out[1] = type_code::GET_CONFIG_REPLY;
    out[2..4].copy_from_slice(&12u16.to_be_bytes());
    out[4..8].copy_from_slice(&xid.to_be_bytes());
    // flags = 0 (FRAG_NORMAL), miss_send_len = 0xffff (send whole packets)
    out[10..12].copy_from_slice(&0xffffu16.to_be_bytes());
    out
}

pub fn raw_barrier_reply(xid: u32) -> [u8; 8] {
    OfHeader::new(MsgType::Unknown(type_code::BARRIER_REPLY), 8, xid).serialize()
}

#[inline]
fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

#[inline]
fn be32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

#[inline]
fn be64(b: &[u8], off: usize) -> u64 {
    u64::from_be_bytes([
        b[off],
        b[off + 1],
        b[off + 2],
        b[off + 3],
        b[off + 4],
        b[off + 5],
        b[off + 6],
        b[off + 7],
    ])
}
