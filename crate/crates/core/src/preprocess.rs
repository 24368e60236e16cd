//! Frame to fixed-length vector conversion.
//!
//! The pipeline for one frame is: strip the link header, parse IPv4 and the
//! TCP/UDP header, drop uninformative packets (empty handshake segments and
//! DNS), pad UDP headers to the 20-byte TCP header length, zero the IPv4
//! addresses, then truncate or zero-pad to [`VECTOR_LEN`] bytes. Each byte
//! becomes `byte / 255` when fed to a network.

use std::fmt;
use std::io::Read;
use std::path::PathBuf;

use crate::pcap::{CaptureFrame, CaptureSource, LinkType, PcapError};

/// Length of every packet vector.
pub const VECTOR_LEN: usize = 1500;

const ETHERNET_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPV4_MIN_HEADER: usize = 20;
const TCP_MIN_HEADER: usize = 20;
const UDP_HEADER: usize = 8;
const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;
const DNS_PORT: u16 = 53;

/// Why a frame did not become a vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiscardReason {
    /// TCP segment with SYN, ACK, FIN or RST set and no payload.
    HandshakeNoPayload,
    Dns,
    NonIp,
    UnsupportedTransport,
    /// Headers truncated or inconsistent. Non-first IP fragments also land
    /// here since they carry no transport header.
    MalformedHeader,
}

impl DiscardReason {
    pub const ALL: [DiscardReason; 5] = [
        DiscardReason::HandshakeNoPayload,
        DiscardReason::Dns,
        DiscardReason::NonIp,
        DiscardReason::UnsupportedTransport,
        DiscardReason::MalformedHeader,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DiscardReason::HandshakeNoPayload => "HandshakeNoPayload",
            DiscardReason::Dns => "DNS",
            DiscardReason::NonIp => "NonIP",
            DiscardReason::UnsupportedTransport => "UnsupportedTransport",
            DiscardReason::MalformedHeader => "MalformedHeader",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for DiscardReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportProtocol {
    Tcp,
    Udp,
    Other(u8),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TcpFlags {
    pub syn: bool,
    pub ack: bool,
    pub fin: bool,
    pub rst: bool,
}

impl TcpFlags {
    fn from_byte(b: u8) -> Self {
        Self {
            fin: b & 0x01 != 0,
            syn: b & 0x02 != 0,
            rst: b & 0x04 != 0,
            ack: b & 0x10 != 0,
        }
    }

    fn any(self) -> bool {
        self.syn || self.ack || self.fin || self.rst
    }
}

/// An IPv4 packet split into header, transport header and payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket {
    pub ip_header: Vec<u8>,
    pub transport_protocol: TransportProtocol,
    pub transport_header: Vec<u8>,
    pub payload: Vec<u8>,
    pub flags: TcpFlags,
    pub src_port: u16,
    pub dst_port: u16,
}

/// Fixed-length packet representation. Stored as raw bytes; the network
/// input is `byte / 255`.
#[derive(Clone, PartialEq, Eq)]
pub struct PacketVector {
    bytes: Box<[u8; VECTOR_LEN]>,
    pub source: Option<SourceOffset>,
}

/// Where a vector came from: capture path and record index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceOffset {
    pub path: PathBuf,
    pub record: u64,
}

impl PacketVector {
    pub fn from_bytes(bytes: [u8; VECTOR_LEN]) -> Self {
        Self {
            bytes: Box::new(bytes),
            source: None,
        }
    }

    pub fn bytes(&self) -> &[u8; VECTOR_LEN] {
        &self.bytes
    }

    /// Normalized value of element `i`.
    pub fn value(&self, i: usize) -> f32 {
        self.bytes[i] as f32 / 255.0
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.bytes.iter().map(|&b| b as f32 / 255.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values().collect()
    }
}

impl fmt::Debug for PacketVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let used = VECTOR_LEN - self.bytes.iter().rev().take_while(|&&b| b == 0).count();
        f.debug_struct("PacketVector")
            .field("nonzero_prefix", &used)
            .field("source", &self.source)
            .finish()
    }
}

/// Removes the link-layer header, keeping only IPv4 packets.
pub fn strip_link_header(frame: &CaptureFrame) -> Result<&[u8], DiscardReason> {
    let data = frame.data.as_slice();
    match frame.link_type {
        LinkType::Ethernet => {
            if data.len() < ETHERNET_HEADER_LEN {
                return Err(DiscardReason::MalformedHeader);
            }
            let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
            let mut offset = ETHERNET_HEADER_LEN;
            if ethertype == ETHERTYPE_VLAN {
                if data.len() < ETHERNET_HEADER_LEN + VLAN_TAG_LEN {
                    return Err(DiscardReason::MalformedHeader);
                }
                ethertype = u16::from_be_bytes([data[16], data[17]]);
                offset += VLAN_TAG_LEN;
            }
            if ethertype != ETHERTYPE_IPV4 {
                return Err(DiscardReason::NonIp);
            }
            Ok(&data[offset..])
        }
        LinkType::RawIp => match data.first() {
            None => Err(DiscardReason::MalformedHeader),
            Some(b) if b >> 4 == 4 => Ok(data),
            Some(_) => Err(DiscardReason::NonIp),
        },
        LinkType::Other(_) => Err(DiscardReason::NonIp),
    }
}

/// Splits an IPv4 packet into its parts.
pub fn parse_ip_packet(bytes: &[u8]) -> Result<ParsedPacket, DiscardReason> {
    let first = *bytes.first().ok_or(DiscardReason::MalformedHeader)?;
    if first >> 4 != 4 {
        return Err(DiscardReason::NonIp);
    }
    let header_len = usize::from(first & 0x0F) * 4;
    if header_len < IPV4_MIN_HEADER || bytes.len() < header_len {
        return Err(DiscardReason::MalformedHeader);
    }
    let total_len = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    if total_len < header_len {
        return Err(DiscardReason::MalformedHeader);
    }
    // Trailing link-layer padding is dropped; a snaplen-truncated capture
    // keeps whatever bytes were recorded.
    let packet = &bytes[..total_len.min(bytes.len())];
    let protocol = bytes[9];
    let transport_protocol = match protocol {
        PROTO_TCP => TransportProtocol::Tcp,
        PROTO_UDP => TransportProtocol::Udp,
        _ => return Err(DiscardReason::UnsupportedTransport),
    };
    let fragment_offset = u16::from_be_bytes([bytes[6], bytes[7]]) & 0x1FFF;
    if fragment_offset > 0 {
        return Err(DiscardReason::MalformedHeader);
    }
    let rest = &packet[header_len..];
    let transport_len = match transport_protocol {
        TransportProtocol::Tcp => {
            if rest.len() < TCP_MIN_HEADER {
                return Err(DiscardReason::MalformedHeader);
            }
            let len = usize::from(rest[12] >> 4) * 4;
            if len < TCP_MIN_HEADER || rest.len() < len {
                return Err(DiscardReason::MalformedHeader);
            }
            len
        }
        _ => {
            if rest.len() < UDP_HEADER {
                return Err(DiscardReason::MalformedHeader);
            }
            UDP_HEADER
        }
    };
    let transport_header = &rest[..transport_len];
    let flags = match transport_protocol {
        TransportProtocol::Tcp => TcpFlags::from_byte(transport_header[13]),
        _ => TcpFlags::default(),
    };
    Ok(ParsedPacket {
        ip_header: packet[..header_len].to_vec(),
        transport_protocol,
        src_port: u16::from_be_bytes([transport_header[0], transport_header[1]]),
        dst_port: u16::from_be_bytes([transport_header[2], transport_header[3]]),
        transport_header: transport_header.to_vec(),
        payload: rest[transport_len..].to_vec(),
        flags,
    })
}

/// Flags packets that carry no application information.
pub fn should_discard(pkt: &ParsedPacket) -> Option<DiscardReason> {
    if pkt.transport_protocol == TransportProtocol::Tcp && pkt.payload.is_empty() && pkt.flags.any()
    {
        return Some(DiscardReason::HandshakeNoPayload);
    }
    if pkt.src_port == DNS_PORT || pkt.dst_port == DNS_PORT {
        return Some(DiscardReason::Dns);
    }
    None
}

/// Appends zeros to a UDP header so it is as long as a bare TCP header.
pub fn pad_udp_header(mut pkt: ParsedPacket) -> ParsedPacket {
    if pkt.transport_protocol == TransportProtocol::Udp
        && pkt.transport_header.len() < TCP_MIN_HEADER
    {
        pkt.transport_header.resize(TCP_MIN_HEADER, 0);
    }
    pkt
}

/// Zeroes the source and destination addresses (header bytes 12..20).
/// The header checksum is left stale.
pub fn mask_ip_addresses(mut pkt: ParsedPacket) -> ParsedPacket {
    let end = pkt.ip_header.len().min(20);
    if end > 12 {
        pkt.ip_header[12..end].fill(0);
    }
    pkt
}

/// Concatenates header, transport header and payload into a vector,
/// truncating or zero-padding to [`VECTOR_LEN`].
pub fn vectorize(pkt: &ParsedPacket) -> PacketVector {
    let mut bytes = [0u8; VECTOR_LEN];
    let parts = pkt
        .ip_header
        .iter()
        .chain(&pkt.transport_header)
        .chain(&pkt.payload);
    for (slot, &b) in bytes.iter_mut().zip(parts) {
        *slot = b;
    }
    PacketVector::from_bytes(bytes)
}

/// Full pipeline for one frame.
pub fn preprocess_frame(frame: &CaptureFrame) -> Result<PacketVector, DiscardReason> {
    let ip = strip_link_header(frame)?;
    let pkt = parse_ip_packet(ip)?;
    if let Some(reason) = should_discard(&pkt) {
        return Err(reason);
    }
    let pkt = mask_ip_addresses(pad_udp_header(pkt));
    Ok(vectorize(&pkt))
}

/// Per-capture accounting of kept and discarded frames.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DiscardStats {
    pub kept: u64,
    discarded: [u64; 5],
}

impl DiscardStats {
    pub fn record(&mut self, outcome: Result<(), DiscardReason>) {
        match outcome {
            Ok(()) => self.kept += 1,
            Err(reason) => self.discarded[reason.slot()] += 1,
        }
    }

    pub fn discarded(&self, reason: DiscardReason) -> u64 {
        self.discarded[reason.slot()]
    }

    pub fn total_discarded(&self) -> u64 {
        self.discarded.iter().sum()
    }

    pub fn frames(&self) -> u64 {
        self.kept + self.total_discarded()
    }

    pub fn merge(&mut self, other: &DiscardStats) {
        self.kept += other.kept;
        for (a, b) in self.discarded.iter_mut().zip(other.discarded) {
            *a += b;
        }
    }
}

/// Streams every kept vector of a capture to `sink`, in frame order.
pub fn preprocess_capture_with<R: Read>(
    source: &mut CaptureSource<R>,
    mut sink: impl FnMut(PacketVector),
) -> Result<DiscardStats, PcapError> {
    let mut stats = DiscardStats::default();
    let path = source.path().to_path_buf();
    while let Some(frame) = source.next_frame()? {
        match preprocess_frame(&frame) {
            Ok(mut vector) => {
                vector.source = Some(SourceOffset {
                    path: path.clone(),
                    record: frame.index,
                });
                stats.record(Ok(()));
                sink(vector);
            }
            Err(reason) => stats.record(Err(reason)),
        }
    }
    Ok(stats)
}

/// Collects every kept vector of a capture.
pub fn preprocess_capture<R: Read>(
    source: &mut CaptureSource<R>,
) -> Result<(Vec<PacketVector>, DiscardStats), PcapError> {
    let mut vectors = Vec::new();
    let stats = preprocess_capture_with(source, |v| vectors.push(v))?;
    Ok((vectors, stats))
}
