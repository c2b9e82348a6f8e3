//! Response-stream audit.
//!
//! A controller can inflate its benchmark score by answering probes with
//! packet-out messages instead of installing flows: packet-outs are cheaper
//! to build and skip the flow-table bookkeeping, so responses/s goes up while
//! the switch learns nothing. The audit classifies every response by message
//! type and raises a violation flag the moment a probe is answered with a
//! packet-out, so a "fast" controller that cheats is called out rather than
//! ranked.
//!
//! LLDP packet-outs are exempt: topology-discovery controllers emit those on
//! their own schedule and they are not answers to probes. This matches how
//! the reference benchmark counts.

use serde::{Deserialize, Serialize};

use crate::ofwire::{frame_len, type_code, HEADER_LEN};

/// Ethertype carried by LLDP frames.
const ETHERTYPE_LLDP: u16 = 0x88cc;

/// Classification of one benchmark run's response stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Flow-mod responses (the conformant answer to a packet-in).
    pub flow_mods: u64,
    /// Packet-out responses that answered probes (LLDP excluded).
    pub packet_outs: u64,
    /// LLDP packet-outs (topology discovery; not counted as responses).
    pub lldp_packet_outs: u64,
    /// Frames of any other type seen on the response stream.
    pub other: u64,
    /// Total bytes across flow-mod responses.
    pub flow_mod_bytes: u64,
    /// Total bytes across counted packet-out responses.
    pub packet_out_bytes: u64,
    /// True when any probe was answered with a packet-out.
    pub violation: bool,
    /// Share of counted responses that were flow-mods, in [0, 1].
    /// 1.0 when no responses were counted at all.
    pub conformant_fraction: f64,
}

impl AuditReport {
    /// Builds a report from already-tallied counters (the emulator counts
    /// inline; re-walking gigabytes of responses would be wasteful).
    pub fn from_counts(
        flow_mods: u64,
        flow_mod_bytes: u64,
        packet_outs: u64,
        packet_out_bytes: u64,
        lldp_packet_outs: u64,
        other: u64,
    ) -> AuditReport {
        let counted = flow_mods + packet_outs;
        let conformant_fraction =
            if counted == 0 { 1.0 } else { flow_mods as f64 / counted as f64 };
        AuditReport {
            flow_mods,
            packet_outs,
            lldp_packet_outs,
            other,
            flow_mod_bytes,
            packet_out_bytes,
            violation: packet_outs > 0,
            conformant_fraction,
        }
    }

    /// Classifies a raw byte stream of concatenated OpenFlow frames.
    /// Truncated trailing bytes and frames too short to carry a header are
    /// tallied under `other` rather than treated as fatal: the audit's job is
    /// to describe the stream, not to police framing.
    pub fn from_stream(mut bytes: &[u8]) -> AuditReport {
        let mut flow_mods = 0u64;
        let mut flow_mod_bytes = 0u64;
        let mut packet_outs = 0u64;
        let mut packet_out_bytes = 0u64;
        let mut lldp = 0u64;
        let mut other = 0u64;
        loop {
            match frame_len(bytes) {
                Ok(Some(len)) if bytes.len() >= len => {
                    let frame = &bytes[..len];
                    match frame[1] {
                        type_code::FLOW_MOD => {
                            flow_mods += 1;
                            flow_mod_bytes += len as u64;
                        }
                        type_code::PACKET_OUT => {
                            if is_lldp_packet_out(frame) {
                                lldp += 1;
                            } else {
                                packet_outs += 1;
                                packet_out_bytes += len as u64;
                            }
                        }
                        _ => other += 1,
                    }
                    bytes = &bytes[len..];
                }
                // Partial trailing frame, bogus length field, or exhausted
                // input: stop scanning.
                Ok(Some(_)) | Ok(None) => {
                    if !bytes.is_empty() {
                        other += 1;
                    }
                    break;
                }
                Err(_) => {
                    other += 1;
                    break;
                }
            }
        }
        AuditReport::from_counts(flow_mods, flow_mod_bytes, packet_outs, packet_out_bytes, lldp, other)
    }

    /// Responses that count toward throughput: flow-mods plus non-LLDP
    /// packet-outs.
    pub fn counted_responses(&self) -> u64 {
        self.flow_mods + self.packet_outs
    }
}

/// True when a packet-out frame carries an LLDP payload. Layout: 8-byte
/// header, 4-byte buffer id, 2-byte in-port, 2-byte actions length, actions,
/// then the raw Ethernet frame whose ethertype sits 12 bytes in.
pub fn is_lldp_packet_out(frame: &[u8]) -> bool {
    const FIXED: usize = HEADER_LEN + 4 + 2 + 2;
    if frame.len() < FIXED {
        return false;
    }
    let actions_len = u16::from_be_bytes([frame[FIXED - 2], frame[FIXED - 1]]) as usize;
    let ethertype_off = FIXED + actions_len + 12;
    if frame.len() < ethertype_off + 2 {
        return false;
    }
    u16::from_be_bytes([frame[ethertype_off], frame[ethertype_off + 1]]) == ETHERTYPE_LLDP
}
