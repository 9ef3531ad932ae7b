//! C ABI over the bin-picking environment and the descriptor network.
//!
//! Every function returns a [`CodsStatus`]; on failure the message is available from
//! [`cods_last_error_message`] on the same thread. Handles are opaque and owned by the caller
//! until passed to the matching `*_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use cods_core::binsim::{BinEnv, BinEnvConfig, PickKind};
use cods_core::descriptor::DescriptorNet;
use cods_core::geometry::Pixel;
use cods_core::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Contract = 5,
    Domain = 6,
    Format = 7,
    Panic = 8,
}

/// Outcome of one suction attempt.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodsPickKind {
    Success = 0,
    PartialSeal = 1,
    Miss = 2,
    Collision = 3,
    Unreachable = 4,
}

impl From<PickKind> for CodsPickKind {
    fn from(k: PickKind) -> Self {
        match k {
            PickKind::Success => CodsPickKind::Success,
            PickKind::PartialSeal => CodsPickKind::PartialSeal,
            PickKind::Miss => CodsPickKind::Miss,
            PickKind::Collision => CodsPickKind::Collision,
            PickKind::Unreachable => CodsPickKind::Unreachable,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodsStepResult {
    pub reward: f64,
    pub done: bool,
    pub kind: CodsPickKind,
    /// Instance id of the picked object, 0 when nothing was picked.
    pub picked_id: u32,
    pub remaining: u32,
}

/// Bin-picking environment handle.
pub struct CodsEnv {
    env: BinEnv,
}

/// Descriptor network handle.
pub struct CodsDescriptor {
    net: DescriptorNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CodsStatus {
    match e {
        Error::Domain(_) => CodsStatus::Domain,
        Error::Config(_) => CodsStatus::Config,
        Error::Contract(_) => CodsStatus::Contract,
        Error::Io { .. } => CodsStatus::Io,
        Error::Format(_) => CodsStatus::Format,
    }
}

/// Failure before reaching the core library.
struct ArgError(CodsStatus, &'static str);

impl From<Error> for ArgError {
    fn from(e: Error) -> Self {
        set_error(e.to_string());
        ArgError(status_of(&e), "")
    }
}

fn guard(f: impl FnOnce() -> Result<(), ArgError>) -> CodsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CodsStatus::Ok,
        Ok(Err(ArgError(status, msg))) => {
            if !msg.is_empty() {
                set_error(msg.to_string());
            }
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CodsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, ArgError> {
    if p.is_null() {
        return Err(ArgError(CodsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| ArgError(CodsStatus::InvalidArgument, "string argument is not UTF-8"))
}

unsafe fn handle<'a, T>(p: *mut T) -> Result<&'a mut T, ArgError> {
    p.as_mut().ok_or(ArgError(CodsStatus::NullPointer, "null handle"))
}

unsafe fn out_buffer<'a, T>(p: *mut T, len: usize, needed: usize) -> Result<&'a mut [T], ArgError> {
    if p.is_null() {
        return Err(ArgError(CodsStatus::NullPointer, "null output buffer"));
    }
    if len < needed {
        return Err(ArgError(CodsStatus::InvalidArgument, "output buffer too small"));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cods_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn cods_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Creates an environment from a JSON config (NULL selects the desk-scale defaults).
#[no_mangle]
pub unsafe extern "C" fn cods_env_new(config_json: *const c_char, out: *mut *mut CodsEnv) -> CodsStatus {
    guard(|| {
        if out.is_null() {
            return Err(ArgError(CodsStatus::NullPointer, "null output pointer"));
        }
        let config = if config_json.is_null() {
            BinEnvConfig::desk()
        } else {
            serde_json::from_str(str_arg(config_json)?).map_err(|e| Error::Config(e.to_string()))?
        };
        let env = BinEnv::new(config)?;
        *out = Box::into_raw(Box::new(CodsEnv { env }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cods_env_free(env: *mut CodsEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts an episode; writes the observation size.
#[no_mangle]
pub unsafe extern "C" fn cods_env_reset(env: *mut CodsEnv, seed: u64, width: *mut u32, height: *mut u32) -> CodsStatus {
    guard(|| {
        let env = handle(env)?;
        let frame = env.env.reset(seed)?;
        let (w, h) = (frame.width() as u32, frame.height() as u32);
        if let Some(p) = width.as_mut() {
            *p = w;
        }
        if let Some(p) = height.as_mut() {
            *p = h;
        }
        Ok(())
    })
}

fn observation(env: &CodsEnv) -> Result<&cods_core::render::RGBDFrame, ArgError> {
    env.env.observation().ok_or(ArgError(
        CodsStatus::Contract,
        "no observation; call cods_env_reset first",
    ))
}

/// Copies the depth image (meters, row-major, 0 = no return) into `out[len]`.
#[no_mangle]
pub unsafe extern "C" fn cods_env_depth(env: *mut CodsEnv, out: *mut f32, len: usize) -> CodsStatus {
    guard(|| {
        let env = handle(env)?;
        let depth = observation(env)?.depth.as_slice();
        let buf = out_buffer(out, len, depth.len())?;
        for (o, d) in buf.iter_mut().zip(depth) {
            *o = *d as f32;
        }
        Ok(())
    })
}

/// Copies the RGB image (row-major, 3 bytes per pixel) into `out[len]`.
#[no_mangle]
pub unsafe extern "C" fn cods_env_rgb(env: *mut CodsEnv, out: *mut u8, len: usize) -> CodsStatus {
    guard(|| {
        let env = handle(env)?;
        let rgb = observation(env)?.rgb.as_slice();
        let buf = out_buffer(out, len, rgb.len() * 3)?;
        for (o, p) in buf.chunks_exact_mut(3).zip(rgb) {
            o.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Writes 1 for pickable pixels and 0 elsewhere into `out[len]`.
#[no_mangle]
pub unsafe extern "C" fn cods_env_action_mask(env: *mut CodsEnv, out: *mut u8, len: usize) -> CodsStatus {
    guard(|| {
        let env = handle(env)?;
        let mask = env.env.action_mask()?;
        let buf = out_buffer(out, len, mask.len())?;
        for (o, m) in buf.iter_mut().zip(mask.as_slice()) {
            *o = u8::from(*m);
        }
        Ok(())
    })
}

/// Attempts a pick at pixel (`x`, `y`).
#[no_mangle]
pub unsafe extern "C" fn cods_env_step(env: *mut CodsEnv, x: i32, y: i32, out: *mut CodsStepResult) -> CodsStatus {
    guard(|| {
        let env = handle(env)?;
        let out = out
            .as_mut()
            .ok_or(ArgError(CodsStatus::NullPointer, "null result pointer"))?;
        let r = env.env.step(Pixel::new(x, y))?;
        *out = CodsStepResult {
            reward: r.reward,
            done: r.done,
            kind: r.outcome.kind.into(),
            picked_id: r.outcome.picked_id.unwrap_or(0),
            remaining: r.outcome.remaining as u32,
        };
        Ok(())
    })
}

/// Loads a descriptor checkpoint.
#[no_mangle]
pub unsafe extern "C" fn cods_descriptor_load(path: *const c_char, out: *mut *mut CodsDescriptor) -> CodsStatus {
    guard(|| {
        if out.is_null() {
            return Err(ArgError(CodsStatus::NullPointer, "null output pointer"));
        }
        let (net, _) = DescriptorNet::load(Path::new(str_arg(path)?))?;
        *out = Box::into_raw(Box::new(CodsDescriptor { net }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn cods_descriptor_free(desc: *mut CodsDescriptor) {
    if !desc.is_null() {
        drop(Box::from_raw(desc));
    }
}

/// Descriptor dimension, or 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn cods_descriptor_dim(desc: *const CodsDescriptor) -> u32 {
    desc.as_ref().map_or(0, |d| d.net.config.descriptor_dim as u32)
}

/// Describes the environment's current observation: `width·height·dim` floats, pixel-major.
#[no_mangle]
pub unsafe extern "C" fn cods_descriptor_describe(
    desc: *mut CodsDescriptor,
    env: *mut CodsEnv,
    out: *mut f32,
    len: usize,
) -> CodsStatus {
    guard(|| {
        let desc = handle(desc)?;
        let env = handle(env)?;
        let (map, _) = desc.net.describe(observation(env)?)?;
        let buf = out_buffer(out, len, map.values.len())?;
        for (o, v) in buf.iter_mut().zip(&map.values) {
            *o = *v as f32;
        }
        Ok(())
    })
}
