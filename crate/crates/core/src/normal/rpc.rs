// SPDX-License-Identifier: Apache-2.0

//! App-to-sandbox RPC over the shared region.
//!
//! A frame is a 12-byte little-endian header `command | request_id | length`
//! followed by `length` payload bytes, written at the start of the shared
//! region. The reply overwrites the request in place with the reply bit set
//! in `command`, or `command = ERROR` and a 4-byte error code.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::HypError;
use crate::crypto::hotp;
use crate::manifest::Service;
use crate::memory::CoreId;
use crate::realm::guest::GuestCtx;
use crate::realm::{GuestFault, RealmId, RmmError, PAGE_SIZE};
use crate::system::System;
use crate::trace::{Event, EventKind};

pub const HEADER_LEN: u64 = 12;
pub const CMD_ADD: u32 = 1;
pub const CMD_OTP_REGISTER: u32 = 2;
pub const CMD_OTP_REQUEST: u32 = 3;
pub const CMD_ECHO: u32 = 4;
pub const REPLY_BIT: u32 = 0x8000_0000;
pub const CMD_ERROR: u32 = 0xffff_ffff;

pub const ERR_FRAME_INVALID: u32 = 1;
pub const ERR_UNSUPPORTED: u32 = 2;
pub const ERR_BAD_PAYLOAD: u32 = 3;

pub const OTP_DIGITS: u32 = 6;
pub const OTP_MAX_SECRET: usize = 64;
/// Where the OTP service keeps its state inside its last private page.
const OTP_STATE_OFFSET: u64 = 0x800;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcFrame {
    pub command: u32,
    pub request_id: u32,
    pub payload: Vec<u8>,
}

impl RpcFrame {
    pub fn new(command: u32, request_id: u32, payload: Vec<u8>) -> RpcFrame {
        RpcFrame {
            command,
            request_id,
            payload,
        }
    }

    pub fn add(request_id: u32, a: u64, b: u64) -> RpcFrame {
        let mut p = a.to_le_bytes().to_vec();
        p.extend_from_slice(&b.to_le_bytes());
        RpcFrame::new(CMD_ADD, request_id, p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize + self.payload.len());
        out.extend_from_slice(&self.command.to_le_bytes());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn is_error(&self) -> bool {
        self.command == CMD_ERROR
    }

    pub fn error_code(&self) -> Option<u32> {
        if !self.is_error() || self.payload.len() < 4 {
            return None;
        }
        Some(u32::from_le_bytes(self.payload[..4].try_into().expect("4 bytes")))
    }

    fn error(request_id: u32, code: u32) -> RpcFrame {
        RpcFrame::new(CMD_ERROR, request_id, code.to_le_bytes().to_vec())
    }
}

pub fn decode_header(h: &[u8]) -> (u32, u32, u32) {
    let w = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().expect("4 bytes"));
    (w(0), w(4), w(8))
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RpcError {
    #[error("frame length {len} exceeds the {limit}-byte frame area")]
    FrameInvalid { len: u64, limit: u64 },
    #[error("sandbox has no shared frame area")]
    NotShared,
    #[error("sandbox runs no RPC service")]
    NoResponder,
    #[error("sandbox did not boot")]
    NotBooted,
    #[error("guest fault: {0}")]
    Guest(#[from] GuestFault),
    #[error(transparent)]
    Rmm(#[from] RmmError),
    #[error(transparent)]
    Hyp(#[from] HypError),
    #[error("malformed reply: {0}")]
    BadReply(String),
}

impl RpcError {
    pub fn tag(&self) -> String {
        match self {
            RpcError::FrameInvalid { .. } => "frame_invalid".into(),
            RpcError::NotShared => "not_shared".into(),
            RpcError::NoResponder => "no_responder".into(),
            RpcError::NotBooted => "not_booted".into(),
            RpcError::Guest(f) => f.tag().into(),
            RpcError::Rmm(e) => e.tag(),
            RpcError::Hyp(e) => e.tag(),
            RpcError::BadReply(_) => "bad_reply".into(),
        }
    }
}

/// Guest-side responder. Takes exclusive access to the frame pages, checks
/// the frame, runs `between` (a window the TOCTOU tests use), fetches the
/// length again at use, computes, releases the pages and writes the reply.
pub fn serve(
    ctx: &mut GuestCtx,
    service: Service,
    frame_area: u64,
    between: &mut dyn FnMut(&mut GuestCtx),
) -> Result<RpcFrame, RpcError> {
    if service == Service::Idle {
        return Err(RpcError::NoResponder);
    }
    let region = ctx.shared_region().ok_or(RpcError::NotShared)?;
    let frame_area = frame_area.min(region.len());
    if frame_area < HEADER_LEN {
        return Err(RpcError::NotShared);
    }
    let pages: Vec<u64> = region.page_ipas().take((frame_area / PAGE_SIZE) as usize).collect();
    ctx.rsi_ex_access(&pages, true)?;
    let res = handle(ctx, service, region.base, frame_area, between);
    ctx.rsi_ex_access(&pages, false)?;
    let reply = match &res {
        Ok(r) => r.clone(),
        Err(RpcError::FrameInvalid { .. }) => RpcFrame::error(0, ERR_FRAME_INVALID),
        Err(_) => return res,
    };
    ctx.write(region.base, &reply.encode())?;
    res
}

fn handle(
    ctx: &mut GuestCtx,
    service: Service,
    base: u64,
    frame_area: u64,
    between: &mut dyn FnMut(&mut GuestCtx),
) -> Result<RpcFrame, RpcError> {
    let header = ctx.read(base, HEADER_LEN as usize)?;
    let (command, request_id, len) = decode_header(&header);
    let limit = frame_area - HEADER_LEN;
    if len as u64 > limit {
        return Err(RpcError::FrameInvalid { len: len as u64, limit });
    }
    between(ctx);
    let len = ctx.read_u32(base + 8)?;
    let payload = ctx.read(base + HEADER_LEN, len as usize)?;
    Ok(compute(ctx, service, command, request_id, &payload)?)
}

fn compute(
    ctx: &mut GuestCtx,
    service: Service,
    command: u32,
    id: u32,
    payload: &[u8],
) -> Result<RpcFrame, GuestFault> {
    let reply = |p: Vec<u8>| RpcFrame::new(command | REPLY_BIT, id, p);
    Ok(match (service, command) {
        (Service::Add, CMD_ADD) => {
            if payload.len() != 16 {
                return Ok(RpcFrame::error(id, ERR_BAD_PAYLOAD));
            }
            let a = u64::from_le_bytes(payload[..8].try_into().expect("8"));
            let b = u64::from_le_bytes(payload[8..].try_into().expect("8"));
            reply(a.wrapping_add(b).to_le_bytes().to_vec())
        }
        (Service::Otp, CMD_OTP_REGISTER) => {
            if payload.is_empty() || payload.len() > OTP_MAX_SECRET {
                return Ok(RpcFrame::error(id, ERR_BAD_PAYLOAD));
            }
            let Some(page) = ctx.last_private_page() else {
                return Ok(RpcFrame::error(id, ERR_BAD_PAYLOAD));
            };
            let mut state = (payload.len() as u32).to_le_bytes().to_vec();
            state.extend_from_slice(payload);
            state.resize(4 + OTP_MAX_SECRET, 0);
            state.extend_from_slice(&0u64.to_le_bytes());
            ctx.write(page + OTP_STATE_OFFSET, &state)?;
            reply(vec![])
        }
        (Service::Otp, CMD_OTP_REQUEST) => {
            let Some(page) = ctx.last_private_page() else {
                return Ok(RpcFrame::error(id, ERR_BAD_PAYLOAD));
            };
            let at = page + OTP_STATE_OFFSET;
            let n = ctx.read_u32(at)? as usize;
            if n == 0 || n > OTP_MAX_SECRET {
                return Ok(RpcFrame::error(id, ERR_BAD_PAYLOAD));
            }
            let secret = ctx.read(at + 4, n)?;
            let counter_at = at + 4 + OTP_MAX_SECRET as u64;
            let counter = ctx.read_u64(counter_at)?;
            let code = hotp(&secret, counter, OTP_DIGITS);
            ctx.write(counter_at, &(counter + 1).to_le_bytes())?;
            let mut p = code.to_le_bytes().to_vec();
            p.extend_from_slice(&counter.to_le_bytes());
            reply(p)
        }
        (Service::Echo, CMD_ECHO) => reply(payload.to_vec()),
        _ => RpcFrame::error(id, ERR_UNSUPPORTED),
    })
}

impl System {
    /// App call into a sandbox's RPC service on `core`.
    pub fn app_rpc(&mut self, core: CoreId, realm: RealmId, frame: &RpcFrame) -> Result<RpcFrame, RpcError> {
        self.app_rpc_with(core, realm, &frame.encode(), &mut |_| {})
    }

    /// As [`System::app_rpc`] with raw request bytes and a hook that runs
    /// inside the guest between frame validation and use.
    pub fn app_rpc_with(
        &mut self,
        core: CoreId,
        realm: RealmId,
        request: &[u8],
        between: &mut dyn FnMut(&mut GuestCtx),
    ) -> Result<RpcFrame, RpcError> {
        let rec = self.record(realm)?.clone();
        let service = rec.manifest.service().map_err(HypError::Manifest)?;
        let area = rec.frame_area();
        let res = (|| {
            if area < HEADER_LEN {
                return Err(RpcError::NotShared);
            }
            if request.len() as u64 > area {
                return Err(RpcError::FrameInvalid {
                    len: request.len() as u64,
                    limit: area,
                });
            }
            self.host_shared_write(core, realm, 0, request)?;
            let (out, _) = self
                .rec_enter_service(core, rec.rec, |ctx| serve(ctx, service, area, between))
                .map_err(RpcError::Rmm)?;
            out.ok_or(RpcError::NotBooted)??;
            let h = self.host_shared_read(core, realm, 0, HEADER_LEN as usize)?;
            let (command, request_id, len) = decode_header(&h);
            if len as u64 > area - HEADER_LEN {
                return Err(RpcError::BadReply(format!("length {len}")));
            }
            let payload = self.host_shared_read(core, realm, HEADER_LEN, len as usize)?;
            Ok(RpcFrame {
                command,
                request_id,
                payload,
            })
        })();
        let (command, _, _) = if request.len() >= HEADER_LEN as usize {
            decode_header(request)
        } else {
            (0, 0, 0)
        };
        self.emit(
            Event::new(EventKind::Op("app_rpc".into()))
                .core(core)
                .realm(realm.0)
                .args(format!("command={command}"))
                .outcome(match &res {
                    Ok(f) if f.is_error() => format!("error({})", f.error_code().unwrap_or(0)),
                    Ok(f) => format!("reply len={}", f.payload.len()),
                    Err(e) => e.tag(),
                }),
        );
        res
    }

    pub fn app_add(&mut self, core: CoreId, realm: RealmId, a: u64, b: u64) -> Result<u64, RpcError> {
        let r = self.app_rpc(core, realm, &RpcFrame::add(1, a, b))?;
        if r.command != CMD_ADD | REPLY_BIT || r.payload.len() != 8 {
            return Err(RpcError::BadReply(format!("{r:?}")));
        }
        Ok(u64::from_le_bytes(r.payload[..].try_into().expect("8")))
    }

    pub fn app_otp_register(&mut self, core: CoreId, realm: RealmId, secret: &[u8]) -> Result<(), RpcError> {
        let r = self.app_rpc(core, realm, &RpcFrame::new(CMD_OTP_REGISTER, 1, secret.to_vec()))?;
        if r.command != CMD_OTP_REGISTER | REPLY_BIT {
            return Err(RpcError::BadReply(format!("{r:?}")));
        }
        Ok(())
    }

    /// Next one-time password and the counter it was computed for.
    pub fn app_otp_request(&mut self, core: CoreId, realm: RealmId) -> Result<(u32, u64), RpcError> {
        let r = self.app_rpc(core, realm, &RpcFrame::new(CMD_OTP_REQUEST, 2, vec![]))?;
        if r.command != CMD_OTP_REQUEST | REPLY_BIT || r.payload.len() != 12 {
            return Err(RpcError::BadReply(format!("{r:?}")));
        }
        let code = u32::from_le_bytes(r.payload[..4].try_into().expect("4"));
        let counter = u64::from_le_bytes(r.payload[4..].try_into().expect("8"));
        Ok((code, counter))
    }
}
